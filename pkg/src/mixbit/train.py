"""Two-stage training pipeline: full-precision teacher, then a quantized
student initialized from it and trained under the gated distillation loss.

Stage one trains the detector from scratch with plain SGD. Stage two derives
the per-layer bit plan from the teacher's weights, copies them into the
student bit for bit, and runs quantization-aware training where every batch's
loss is beta * gated-feature-distance + detection loss. The teacher runs
inference only and is asserted unchanged afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bitsearch import BitPlan, build_bit_plan, _derive_seed
from .checkpoint import Checkpoint
from .data import DetectionDataset, SyntheticScene, boxes_to_corners
from .detect_eval import EvalReport, evaluate_detections
from .gate import (GateParams, feature_distill_loss, gumbel_binarize,
                   init_gate_params, attention_scores, project_features,
                   total_loss)
from .model import Detector, NetworkSpec, decode_predictions, default_network
from .tensor import (Tensor, bce_with_logits, gather_cells, sigmoid,
                     slice_channels, smooth_l1, softmax_cross_entropy, tmean,
                     tsum, zero_grads)


class DivergenceError(RuntimeError):
    """Raised when the training loss turns non-finite."""


@dataclass
class TrainConfig:
    seed: int
    epochs: int = 12
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 0.0005
    threshold: float = 0.05          # distribution-distance threshold T
    b_min: int = 2
    restarts: int = 8
    beta: float = 400.0
    tau: float = 1.0
    d_embed: int = 64
    off_logit: float = 8.0
    exempt_first_layer: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float, weight_decay: float
             ) -> tuple[np.ndarray, np.ndarray]:
    """One SGD update: v <- momentum*v + grad + wd*param; param <- param - lr*v."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError("param/grad/velocity shapes differ")
    v = momentum * velocity + grad + weight_decay * param
    return param - lr * v, v


class SGD:
    """Momentum SGD with coupled weight decay over a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            p.data, self.velocities[i] = sgd_step(
                p.data, p.grad, self.velocities[i],
                self.lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        zero_grads(self.params)


@dataclass
class EncodedTargets:
    obj: np.ndarray                      # [N, 1, G, G] objectness {0,1}
    cells: list[tuple[int, int, int]]    # positive (sample, row, col)
    box: np.ndarray                      # [P, 4] targets: tx, ty, w, h in [0,1]
    cls: np.ndarray                      # [P] class ids
    weight: np.ndarray                   # [P] per-image normalization weights


def encode_targets(scenes: list[SyntheticScene], grid: int,
                   num_classes: int) -> EncodedTargets:
    """Rasterize box labels onto the head grid (one positive cell per object)."""
    n = len(scenes)
    obj = np.zeros((n, 1, grid, grid), dtype=np.float32)
    cells: list[tuple[int, int, int]] = []
    box_rows: list[list[float]] = []
    cls_rows: list[int] = []
    weights: list[float] = []
    for k, scene in enumerate(scenes):
        entries = []
        for cls, cx, cy, w, h in scene.boxes:
            j = min(int(cx * grid), grid - 1)
            i = min(int(cy * grid), grid - 1)
            if obj[k, 0, i, j] == 1.0:
                continue  # the generator avoids collisions; drop if any slip in
            obj[k, 0, i, j] = 1.0
            entries.append(((k, i, j), [cx * grid - j, cy * grid - i, w, h], cls))
        for cell, box_t, cls in entries:
            cells.append(cell)
            box_rows.append(box_t)
            cls_rows.append(cls)
            weights.append(1.0 / (n * len(entries)))
    return EncodedTargets(
        obj=obj, cells=cells,
        box=np.asarray(box_rows, dtype=np.float32).reshape(-1, 4),
        cls=np.asarray(cls_rows, dtype=np.int64),
        weight=np.asarray(weights, dtype=np.float32))


def detection_loss(preds: Tensor, targets: EncodedTargets) -> Tensor:
    """Objectness BCE over all cells + smooth-L1 box and CE class terms on
    positive cells, unit-weighted, averaged over the batch."""
    loss = tmean(bce_with_logits(slice_channels(preds, 0, 1), targets.obj))
    if targets.cells:
        w = Tensor(targets.weight)
        box_pred = sigmoid(gather_cells(slice_channels(preds, 1, 5), targets.cells))
        box_terms = tsum(smooth_l1(box_pred, targets.box), axis=1)
        loss = loss + tsum(box_terms * w)
        cls_logits = gather_cells(slice_channels(preds, 5, preds.shape[1]),
                                  targets.cells)
        loss = loss + tsum(softmax_cross_entropy(cls_logits, targets.cls) * w)
    return loss


def evaluate_map(detector: Detector, scenes: list[SyntheticScene],
                 plan: Optional[BitPlan] = None, conf_threshold: float = 0.25,
                 nms_iou: float = 0.5, iou_threshold: float = 0.5,
                 batch_size: int = 64) -> EvalReport:
    """mAP50 of a detector over a scene list (no gradient bookkeeping)."""
    frozen = Detector.from_arrays(detector.spec, detector.state_arrays(),
                                  trainable=False)
    num_classes = detector.spec.num_classes
    preds_per_image: list[list] = []
    gts_per_image: list[list] = []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        images = np.stack([s.image for s in chunk])
        raw, _ = frozen.forward(images, plan=plan)
        preds_per_image.extend(decode_predictions(raw.data, num_classes,
                                                  conf_threshold, nms_iou))
        gts_per_image.extend(
            [(cls, boxes_to_corners((cx, cy, w, h))) for cls, cx, cy, w, h in s.boxes]
            for s in chunk)
    return evaluate_detections(preds_per_image, gts_per_image, num_classes,
                               iou_threshold)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_teacher(config: TrainConfig, dataset: DetectionDataset,
                  network: Optional[NetworkSpec] = None
                  ) -> tuple[Checkpoint, list[dict]]:
    """Train the full-precision detector from scratch with momentum SGD."""
    if not dataset.train:
        raise ValueError("dataset has no training scenes")
    spec = network or default_network(dataset.classes, dataset.image_size)
    det = Detector.init_random(spec, config.seed)
    opt = SGD(det.trainables(), config.lr, config.momentum, config.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xba7c]))
    grid = spec.grid_size
    history: list[dict] = []
    train_scenes = dataset.train
    for epoch in range(config.epochs):
        losses = []
        for idx in _batches(len(train_scenes), config.batch_size, rng):
            chunk = [train_scenes[i] for i in idx]
            images = np.stack([s.image for s in chunk])
            targets = encode_targets(chunk, grid, spec.num_classes)
            preds, _ = det.forward(images)
            loss = detection_loss(preds, targets)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"teacher loss non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
        report = evaluate_map(det, dataset.val) if dataset.val else None
        history.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else None,
            "val_mAP50": report.map50 if report else None,
        })
    return Checkpoint(spec=spec, tensors=det.state_arrays()), history


def train_student_ghost(teacher: Checkpoint, config: TrainConfig,
                        dataset: DetectionDataset
                        ) -> tuple[Checkpoint, BitPlan, list[dict]]:
    """Quantization-aware training of the teacher's own quantized copy.

    The bit plan comes from the teacher's weights; the student's latents start
    as an exact copy; every batch optimizes beta * L_F + L_dec with straight-
    through gradients. The teacher is inference-only throughout.
    """
    spec = teacher.spec
    teacher_det = Detector.from_arrays(spec, teacher.tensors, trainable=False)
    teacher_hash_before = teacher.content_hash()
    plan = build_bit_plan(spec, teacher_det.layer_weight_arrays(),
                          threshold=config.threshold, b_min=config.b_min,
                          restarts=config.restarts, seed=config.seed,
                          exempt_first_layer=config.exempt_first_layer)
    student = Detector.from_arrays(spec, teacher.tensors, trainable=True)
    gate = init_gate_params(spec.tap_channels, d_embed=config.d_embed,
                            tau=config.tau, off_logit=config.off_logit,
                            seed=config.seed)
    opt = SGD(student.trainables() + gate.trainables(), config.lr,
              config.momentum, config.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x57de]))
    grid = spec.grid_size
    history: list[dict] = []
    train_scenes = dataset.train
    for epoch in range(config.epochs):
        losses, lf_vals, ldec_vals = [], [], []
        for step, idx in enumerate(_batches(len(train_scenes), config.batch_size, rng)):
            chunk = [train_scenes[i] for i in idx]
            images = np.stack([s.image for s in chunk])
            targets = encode_targets(chunk, grid, spec.num_classes)
            _, teacher_taps = teacher_det.forward(images, want_taps=True)
            preds, student_taps = student.forward(images, plan=plan, want_taps=True)
            l_dec = detection_loss(preds, targets)
            q, k = project_features(student_taps, teacher_taps, gate)
            decision = gumbel_binarize(attention_scores(q, k), tau=config.tau,
                                       off_logit=config.off_logit,
                                       seed=_derive_seed(config.seed, epoch, step),
                                       hard=False)
            l_f = feature_distill_loss(teacher_taps, student_taps, decision.alpha)
            loss = total_loss(l_f, l_dec, config.beta)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"student loss non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
            lf_vals.append(l_f.item())
            ldec_vals.append(l_dec.item())
        report = evaluate_map(student, dataset.val, plan=plan) if dataset.val else None
        alpha_soft, alpha_hard = _epoch_gate_snapshot(teacher_det, student, gate,
                                                      plan, dataset, config)
        history.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else None,
            "L_F": float(np.mean(lf_vals)) if lf_vals else None,
            "L_dec": float(np.mean(ldec_vals)) if ldec_vals else None,
            "val_mAP50": report.map50 if report else None,
            "alpha_soft": alpha_soft,
            "alpha_hard": alpha_hard,
        })
    if teacher.content_hash() != teacher_hash_before:
        raise AssertionError("teacher checkpoint was modified during student training")
    ckpt = Checkpoint(spec=spec, tensors=student.state_arrays(), bitplan=plan)
    return ckpt, plan, history


def _epoch_gate_snapshot(teacher_det: Detector, student: Detector,
                         gate: GateParams, plan: BitPlan,
                         dataset: DetectionDataset, config: TrainConfig
                         ) -> tuple[list[float], list[float]]:
    """Deterministic (noise-free) gate state on a fixed batch, for telemetry."""
    scenes = (dataset.val or dataset.train)[: config.batch_size]
    images = np.stack([s.image for s in scenes])
    _, t_taps = teacher_det.forward(images, want_taps=True)
    _, s_taps = student.forward(images, plan=plan, want_taps=True)
    q, k = project_features(s_taps, t_taps, gate)
    decision = gumbel_binarize(attention_scores(q, k), tau=config.tau,
                               off_logit=config.off_logit, seed=0,
                               hard=False, sample=False)
    return ([float(v) for v in decision.alpha_soft_np],
            [float(v) for v in decision.alpha_hard_np])
