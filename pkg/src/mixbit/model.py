"""Tiny single-scale dense detector built on the autodiff engine.

The network is a plain convolution stack with hard [0,1] clip activations and
a 1x1 detection head predicting per-cell objectness, box offsets and class
scores. Three backbone stages are tapped for distillation. Under a bit plan
the non-exempt convolutions run with fake-quantized weights and activations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bitsearch import BitPlan
from .quantize import FULL_PRECISION, quantize_activations, quantize_weights
from .tensor import Tensor, clamp01, conv2d, reshape

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0
    activation: str = "clamp01"   # "clamp01" | "none"
    is_head: bool = False

    def to_dict(self) -> dict:
        return {"name": self.name, "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel, "stride": self.stride, "pad": self.pad,
                "activation": self.activation, "is_head": self.is_head}


@dataclass
class NetworkSpec:
    """Ordered convolution layers plus the distillation tap points."""

    layers: list[LayerSpec]
    scale_taps: list[int]
    num_classes: int
    image_size: int
    in_channels: int = 3

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        for t in self.scale_taps:
            if not 0 <= t < len(self.layers):
                raise ValueError(f"tap index {t} out of range")
            if self.layers[t].activation == "none":
                raise ValueError("taps must sit on activated layer outputs")

    @property
    def grid_size(self) -> int:
        size = self.image_size
        for l in self.layers:
            size = (size + 2 * l.pad - l.kernel) // l.stride + 1
        return size

    @property
    def tap_channels(self) -> list[int]:
        return [self.layers[t].out_ch for t in self.scale_taps]

    def to_dict(self) -> dict:
        return {"layers": [l.to_dict() for l in self.layers],
                "scale_taps": list(self.scale_taps),
                "num_classes": self.num_classes,
                "image_size": self.image_size,
                "in_channels": self.in_channels}

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkSpec":
        return cls(layers=[LayerSpec(**l) for l in doc["layers"]],
                   scale_taps=list(doc["scale_taps"]),
                   num_classes=int(doc["num_classes"]),
                   image_size=int(doc["image_size"]),
                   in_channels=int(doc["in_channels"]))


def default_network(num_classes: int, image_size: int = 48,
                    in_channels: int = 3) -> NetworkSpec:
    """Three stride-2 stages tapped for distillation, then a 1x1 head."""
    head_out = 5 + num_classes
    layers = [
        LayerSpec("stem", in_channels, 12, 3, 1, 1),
        LayerSpec("c2", 12, 16, 3, 2, 1),
        LayerSpec("c3", 16, 16, 3, 1, 1),
        LayerSpec("c4", 16, 24, 3, 2, 1),
        LayerSpec("c5", 24, 24, 3, 1, 1),
        LayerSpec("c6", 24, 32, 3, 2, 1),
        LayerSpec("c7", 32, 32, 3, 1, 1),
        LayerSpec("head", 32, head_out, 1, 1, 0, activation="none", is_head=True),
    ]
    return NetworkSpec(layers=layers, scale_taps=[2, 4, 6],
                       num_classes=num_classes, image_size=image_size,
                       in_channels=in_channels)


class Detector:
    """Parameter container and forward pass for a NetworkSpec.

    Weights are the full-precision latents; a BitPlan passed to ``forward``
    fake-quantizes non-exempt layers on the fly (straight-through gradients),
    while exempt layers run bit-identically to the unquantized path.
    """

    def __init__(self, spec: NetworkSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params

    @classmethod
    def init_random(cls, spec: NetworkSpec, seed: int) -> "Detector":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xde7]))
        params: dict[str, Tensor] = {}
        for l in spec.layers:
            fan_in = l.in_ch * l.kernel * l.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(l.out_ch, l.in_ch, l.kernel, l.kernel))
            params[f"{l.name}.weight"] = Tensor(w.astype(np.float32), requires_grad=True)
            # Clip activations are dead below zero; a positive bias keeps
            # units inside the pass-through band at initialization.
            bias0 = 0.0 if l.is_head else 0.25
            bias = np.full(l.out_ch, bias0, dtype=np.float32)
            if l.is_head:
                bias[0] = -2.0  # objectness starts near the background prior
            params[f"{l.name}.bias"] = Tensor(bias, requires_grad=True)
        return cls(spec, params)

    @classmethod
    def from_arrays(cls, spec: NetworkSpec, arrays: dict[str, np.ndarray],
                    trainable: bool = True) -> "Detector":
        params = {k: Tensor(np.array(v, dtype=np.float32, copy=True),
                            requires_grad=trainable)
                  for k, v in arrays.items()}
        return cls(spec, params)

    def trainables(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def layer_weight_arrays(self) -> dict[str, np.ndarray]:
        return {l.name: self.params[f"{l.name}.weight"].data.copy()
                for l in self.spec.layers}

    def forward(self, x, plan: BitPlan | None = None,
                want_taps: bool = False) -> tuple[Tensor, list[Tensor]]:
        """Run the stack; returns (head output, tapped feature maps)."""
        if plan is not None:
            plan_names = {e.name for e in plan.layers}
            if plan_names != {l.name for l in self.spec.layers}:
                raise ValueError("bit plan does not cover this network")
        h = x if isinstance(x, Tensor) else Tensor(x)
        taps: list[Tensor] = []
        for idx, l in enumerate(self.spec.layers):
            w = self.params[f"{l.name}.weight"]
            b = self.params[f"{l.name}.bias"]
            bits = FULL_PRECISION if plan is None else plan.bits_for(l.name)
            if bits != FULL_PRECISION:
                w = quantize_weights(w, bits)
            h = conv2d(h, w, stride=l.stride, pad=l.pad) + reshape(b, (1, l.out_ch, 1, 1))
            if l.activation == "clamp01":
                h = clamp01(h)
                if bits != FULL_PRECISION:
                    from .tensor import ste_round_grid
                    h = ste_round_grid(h, bits)
            if want_taps and idx in self.spec.scale_taps:
                taps.append(h)
        return h, taps


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    zm = z - z.max(axis=axis, keepdims=True)
    e = np.exp(zm)
    return e / e.sum(axis=axis, keepdims=True)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60, 60)))


def nms(dets: list[tuple[float, Box]], iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices."""
    from .detect_eval import iou
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], i))
    keep: list[int] = []
    for i in order:
        if all(iou(dets[i][1], dets[j][1]) < iou_threshold for j in keep):
            keep.append(i)
    return keep


def decode_predictions(raw: np.ndarray, num_classes: int,
                       conf_threshold: float = 0.25,
                       nms_iou: float = 0.5) -> list[list[tuple[int, float, Box]]]:
    """Turn head outputs [N, 5+C, Hg, Wg] into per-image detection lists.

    Per cell: sigmoid objectness, sigmoid in-cell center offsets and sizes
    (all normalized), softmax class scores. Confidence is objectness times the
    best class probability; per-class NMS cleans up duplicates.
    """
    n, ch, hg, wg = raw.shape
    if ch != 5 + num_classes:
        raise ValueError(f"expected {5 + num_classes} channels, got {ch}")
    obj = _sigmoid_np(raw[:, 0])
    txy = _sigmoid_np(raw[:, 1:3])
    twh = _sigmoid_np(raw[:, 3:5])
    cls_prob = _softmax_np(raw[:, 5:], axis=1)
    results: list[list[tuple[int, float, Box]]] = []
    jj, ii = np.meshgrid(np.arange(wg), np.arange(hg))
    for k in range(n):
        dets: list[tuple[int, float, Box]] = []
        conf_all = obj[k] * cls_prob[k].max(axis=0)
        label_all = cls_prob[k].argmax(axis=0)
        ys, xs = np.nonzero(conf_all >= conf_threshold)
        for i, j in zip(ys, xs):
            cx = (j + txy[k, 0, i, j]) / wg
            cy = (i + txy[k, 1, i, j]) / hg
            bw = twh[k, 0, i, j]
            bh = twh[k, 1, i, j]
            x1, y1 = max(0.0, cx - bw / 2), max(0.0, cy - bh / 2)
            x2, y2 = min(1.0, cx + bw / 2), min(1.0, cy + bh / 2)
            if x2 - x1 <= 1e-6 or y2 - y1 <= 1e-6:
                continue
            dets.append((int(label_all[i, j]), float(conf_all[i, j]),
                         (float(x1), float(y1), float(x2), float(y2))))
        kept: list[tuple[int, float, Box]] = []
        for c in range(num_classes):
            cls_dets = [(conf, box) for lbl, conf, box in dets if lbl == c]
            for idx in nms(cls_dets, nms_iou):
                kept.append((c, cls_dets[idx][0], cls_dets[idx][1]))
        kept.sort(key=lambda d: -d[1])
        results.append(kept)
    return results
