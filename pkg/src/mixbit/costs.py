"""Exact BOPs and parameter-size accounting for convolution stacks.

All arithmetic is exact integer math (Python ints); "G BOPs" and megabyte
figures are derived only at serialization time. Two BOPs views are reported:

* per-layer ``bops`` follows the textbook formula, pairing each layer's weight
  width with the activation width actually feeding it (the network input and
  activations of exempt layers count as 32-bit);
* the ``quantized_bops_ratio`` compression figure pairs each non-exempt layer
  with its own activation width, so a uniform 8-bit plan compresses by exactly
  (8*8)/(32*32) = 1/16, layerwise and in total.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .bitsearch import BitPlan
from .quantize import FULL_PRECISION

_MAX_BOPS = 2 ** 63 - 1  # sanity bound; Python ints never overflow, but a
                         # per-layer count beyond this signals a bogus spec


@dataclass
class LayerCost:
    name: str
    bops: int
    param_bits: int
    b_w: int
    b_a_prev: int
    exempt: bool


@dataclass
class CostReport:
    per_layer: list[LayerCost]
    total_bops: int
    total_param_bits: int
    fp32_total_bops: int
    fp32_total_param_bits: int
    quantized_bops_ratio: float | None
    quantized_params_ratio: float | None

    @property
    def total_param_bytes(self) -> float:
        # Sub-byte widths can leave a fractional byte total; the sum is kept
        # in bits and divided exactly once.
        return self.total_param_bits / 8

    @property
    def bops_ratio_vs_fp32(self) -> float:
        return self.total_bops / self.fp32_total_bops

    @property
    def params_ratio_vs_fp32(self) -> float:
        return self.total_param_bits / self.fp32_total_param_bits

    def to_dict(self) -> dict:
        return {
            "per_layer": [
                {
                    "name": c.name,
                    "bops": c.bops,
                    "param_bits": c.param_bits,
                    "param_bytes": c.param_bits / 8,
                    "b_w": c.b_w,
                    "b_a_prev": c.b_a_prev,
                    "exempt": c.exempt,
                }
                for c in self.per_layer
            ],
            "total_bops": self.total_bops,
            "total_gbops": self.total_bops / 1e9,
            "total_param_bits": self.total_param_bits,
            "total_param_bytes": self.total_param_bits / 8,
            "total_param_mb_decimal": self.total_param_bits / 8 / 1e6,
            "total_param_mb_binary": self.total_param_bits / 8 / 2 ** 20,
            "fp32_total_bops": self.fp32_total_bops,
            "fp32_total_param_bytes": self.fp32_total_param_bits / 8,
            "compression_vs_fp32": {
                "bops_ratio": self.bops_ratio_vs_fp32,
                "params_ratio": self.params_ratio_vs_fp32,
                "quantized_bops_ratio": self.quantized_bops_ratio,
                "quantized_params_ratio": self.quantized_params_ratio,
            },
        }


def layer_bops(c_prev: int, c_out: int, h_out: int, w_out: int, k_h: int,
               k_w: int, b_w: int, b_a_prev: int) -> int:
    """Bit-operations of one convolution layer, exactly."""
    dims = dict(c_prev=c_prev, c_out=c_out, h_out=h_out, w_out=w_out,
                k_h=k_h, k_w=k_w)
    for name, v in dims.items():
        if not isinstance(v, int) or v <= 0:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    for name, v in (("b_w", b_w), ("b_a_prev", b_a_prev)):
        if not isinstance(v, int) or not 1 <= v <= 32:
            raise ValueError(f"{name} must be an integer in [1,32], got {v!r}")
    total = c_prev * c_out * w_out * h_out * k_w * k_h * b_w * b_a_prev
    if total > _MAX_BOPS:
        raise OverflowError("per-layer BOPs exceed the 64-bit sanity bound")
    return total


def model_params_bytes(network, plan: BitPlan | None = None) -> float:
    """Total weight storage in bytes: sum of c_in*c_out*k*k*bits over layers.

    Full-precision (exempt or unplanned) layers count at 32 bits. Sub-byte
    widths are summed exactly in bits and divided by 8 once at the end.
    """
    total_bits = 0
    for layer in network.layers:
        bits = FULL_PRECISION if plan is None else plan.bits_for(layer.name)
        total_bits += layer.in_ch * layer.out_ch * layer.kernel * layer.kernel * bits
    return total_bits / 8


def cost_report(network, plan: BitPlan | None, input_hw: tuple[int, int]) -> CostReport:
    """Per-layer and total BOPs/params for a network under a bit plan.

    ``plan=None`` reports the full-precision network (everything at 32 bits).
    """
    h, w = input_hw
    entries: list[LayerCost] = []
    fp_bops_total = 0
    act_bits_prev = FULL_PRECISION  # network input counts as 32-bit
    q_bops_num = q_bops_den = 0
    q_bits_num = q_bits_den = 0
    for layer in network.layers:
        h_out = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
        w_out = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
        bits = FULL_PRECISION if plan is None else plan.bits_for(layer.name)
        exempt = bits == FULL_PRECISION
        bops = layer_bops(layer.in_ch, layer.out_ch, h_out, w_out,
                          layer.kernel, layer.kernel, bits, act_bits_prev)
        fp_bops = layer_bops(layer.in_ch, layer.out_ch, h_out, w_out,
                             layer.kernel, layer.kernel, 32, 32)
        n_weights = layer.in_ch * layer.out_ch * layer.kernel * layer.kernel
        entries.append(LayerCost(name=layer.name, bops=bops,
                                 param_bits=n_weights * bits, b_w=bits,
                                 b_a_prev=act_bits_prev, exempt=exempt))
        fp_bops_total += fp_bops
        if not exempt:
            macs = fp_bops // (32 * 32)
            q_bops_num += macs * bits * bits
            q_bops_den += fp_bops
            q_bits_num += n_weights * bits
            q_bits_den += n_weights * 32
        act_bits_prev = bits
        h, w = h_out, w_out
    return CostReport(
        per_layer=entries,
        total_bops=sum(c.bops for c in entries),
        total_param_bits=sum(c.param_bits for c in entries),
        fp32_total_bops=fp_bops_total,
        fp32_total_param_bits=sum(
            layer.in_ch * layer.out_ch * layer.kernel * layer.kernel * 32
            for layer in network.layers),
        quantized_bops_ratio=(q_bops_num / q_bops_den) if q_bops_den else None,
        quantized_params_ratio=(q_bits_num / q_bits_den) if q_bits_den else None,
    )
