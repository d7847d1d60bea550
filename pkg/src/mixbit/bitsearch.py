"""Per-layer bit-width selection by clustering the layer's weights.

For each candidate width n the layer's flattened kernel weights are clustered
into 2^n groups with seeded k-means++ (best of several restarts), and the mean
squared sample-to-center distance serves as a distribution distance d(n). The
chosen width is the smallest n whose distance falls below the threshold T;
when no candidate qualifies the layer stays at the 8-bit initialization.

Layers are searched independently with per-layer derived seeds, so serial and
parallel sweeps agree bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .quantize import FULL_PRECISION

MAX_BITS = 8
LLOYD_MAX_ITERS = 100


@dataclass
class ClusterResult:
    centers: np.ndarray          # K center values
    assignment: np.ndarray       # sample index -> center index
    sse: float                   # sum of squared sample-to-center distances
    restarts_used: int
    degenerate: bool = False     # fewer distinct values than requested clusters


@dataclass
class LayerBits:
    name: str
    bits: int                    # in [b_min, 8], or FULL_PRECISION when exempt
    exempt: bool
    distances: dict[int, float] = field(default_factory=dict)


@dataclass
class BitPlan:
    """Per-layer bit widths plus the threshold and scan floor that produced them.

    The activation following each quantized convolution shares that layer's
    width; exempt layers (and their activations) stay full precision.
    """

    threshold: float
    b_min: int
    layers: list[LayerBits]

    @property
    def per_layer_bits(self) -> list[int]:
        return [e.bits for e in self.layers]

    def bits_for(self, name: str) -> int:
        for e in self.layers:
            if e.name == name:
                return e.bits
        raise KeyError(f"no layer named {name!r} in plan")

    def average_quantized_bits(self) -> Optional[float]:
        picked = [e.bits for e in self.layers if not e.exempt]
        return float(np.mean(picked)) if picked else None

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "b_min": self.b_min,
            "layers": [
                {
                    "name": e.name,
                    "bits": e.bits,
                    "exempt": e.exempt,
                    "distances": {str(n): d for n, d in sorted(e.distances.items())},
                }
                for e in self.layers
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "BitPlan":
        layers = [
            LayerBits(
                name=e["name"],
                bits=int(e["bits"]),
                exempt=bool(e["exempt"]),
                distances={int(n): float(d) for n, d in e.get("distances", {}).items()},
            )
            for e in doc["layers"]
        ]
        return cls(threshold=float(doc["threshold"]), b_min=int(doc["b_min"]),
                   layers=layers)

    @classmethod
    def from_json(cls, text: str) -> "BitPlan":
        return cls.from_dict(json.loads(text))


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _assign(samples: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Nearest-center assignment for 1-d data, O(M log K).

    Requires sorted centers: each sample belongs to the interval between
    neighboring center midpoints. A sample exactly on a midpoint goes to the
    lower-indexed (left) center, matching first-argmin tie-breaking.
    """
    mids = (centers[1:] + centers[:-1]) / 2.0
    return np.searchsorted(mids, samples, side="left")


def _sse(samples: np.ndarray, centers: np.ndarray, assignment: np.ndarray) -> float:
    return float(((samples - centers[assignment]) ** 2).sum())


def _seed_centers(samples: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: first center uniform, the rest proportional to the
    squared distance to the nearest already-chosen center."""
    centers = np.empty(k, dtype=np.float64)
    centers[0] = samples[rng.integers(samples.size)]
    d2 = (samples - centers[0]) ** 2
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[i:] = centers[0]
            break
        centers[i] = samples[rng.choice(samples.size, p=d2 / total)]
        d2 = np.minimum(d2, (samples - centers[i]) ** 2)
    return centers


def _lloyd(samples: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = centers.size
    centers = np.sort(centers)
    assignment = _assign(samples, centers)
    for _ in range(LLOYD_MAX_ITERS):
        counts = np.bincount(assignment, minlength=k)
        sums = np.bincount(assignment, weights=samples, minlength=k)
        occupied = counts > 0
        centers[occupied] = sums[occupied] / counts[occupied]
        if not occupied.all():
            for i in np.flatnonzero(~occupied):
                # Re-seed an emptied cluster at the sample farthest from its
                # assigned center (deterministic: first argmax wins).
                far = (samples - centers[assignment]) ** 2
                centers[i] = samples[int(far.argmax())]
                centers = np.sort(centers)
                assignment = _assign(samples, centers)
        else:
            # means of ordered interval clusters stay ordered
            new_assignment = _assign(samples, centers)
            if np.array_equal(new_assignment, assignment):
                break
            assignment = new_assignment
    return centers, assignment


def kmeanspp_cluster(samples: Sequence[float], k: int, restarts: int = 8,
                     seed: int = 0) -> ClusterResult:
    """Best-of-restarts k-means++ with Lloyd refinement, deterministic per seed.

    When the data has fewer distinct values than requested clusters the result
    is one center per distinct value (zero SSE) with the degenerate flag set.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 1:
        raise ValueError("need at least one sample")
    if k < 1 or restarts < 1:
        raise ValueError("k and restarts must be >= 1")
    distinct = np.unique(x)
    if distinct.size <= k:
        centers = distinct
        assignment = np.searchsorted(distinct, x)
        return ClusterResult(centers=centers, assignment=assignment, sse=0.0,
                             restarts_used=0, degenerate=distinct.size < k)
    rng = np.random.default_rng(seed)
    best: Optional[tuple[float, np.ndarray, np.ndarray]] = None
    for _ in range(restarts):
        centers, assignment = _lloyd(x, _seed_centers(x, k, rng))
        sse = _sse(x, centers, assignment)
        if best is None or sse < best[0]:
            best = (sse, centers, assignment)
    sse, centers, assignment = best
    return ClusterResult(centers=centers, assignment=assignment, sse=sse,
                         restarts_used=restarts)


def distribution_distance(weights: Sequence[float], n: int, restarts: int = 8,
                          seed: int = 0) -> float:
    """Mean squared distance of the weights to their 2^n cluster centers."""
    if not 1 <= n <= MAX_BITS:
        raise ValueError(f"n must be in [1,{MAX_BITS}], got {n}")
    x = np.asarray(weights, dtype=np.float64).ravel()
    result = kmeanspp_cluster(x, 2 ** n, restarts=restarts, seed=seed)
    return result.sse / x.size


def select_bit_width(weights: Sequence[float], threshold: float, b_min: int = 2,
                     restarts: int = 8, seed: int = 0) -> tuple[int, dict[int, float]]:
    """Smallest width in [b_min, 8] whose distance beats the threshold.

    Scans n upward and stops at the first success, so wider candidates are
    never clustered; if nothing qualifies the 8-bit initialization stands
    (n = 8 itself needs no clustering: the outcome is 8 either way). Returns
    the chosen width and the scanned distance table. Each candidate's
    clustering seed is derived from (seed, n) only, so the table is identical
    across thresholds.
    """
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    if not 1 <= b_min <= MAX_BITS:
        raise ValueError(f"b_min must be in [1,{MAX_BITS}]")
    distances: dict[int, float] = {}
    for n in range(b_min, MAX_BITS):
        d = distribution_distance(weights, n, restarts=restarts,
                                  seed=_derive_seed(seed, n))
        distances[n] = d
        if d < threshold:
            return n, distances
    return MAX_BITS, distances


def build_bit_plan(network, layer_weights: dict[str, np.ndarray], threshold: float,
                   b_min: int = 2, restarts: int = 8, seed: int = 0,
                   exempt_first_layer: bool = True) -> BitPlan:
    """Run the width search over every non-exempt convolution of a network.

    ``network`` is a NetworkSpec; weights are the trained full-precision
    kernels keyed by layer name. The first convolution (configurable) and all
    detection-head convolutions are exempt and stay full precision.
    """
    names = [layer.name for layer in network.layers]
    if set(names) != set(layer_weights):
        missing = set(names) ^ set(layer_weights)
        raise ValueError(f"layer/weight mismatch, offending names: {sorted(missing)}")
    entries: list[LayerBits] = []
    for idx, layer in enumerate(network.layers):
        exempt = layer.is_head or (exempt_first_layer and idx == 0)
        if exempt:
            entries.append(LayerBits(name=layer.name, bits=FULL_PRECISION,
                                     exempt=True))
            continue
        bits, distances = select_bit_width(
            layer_weights[layer.name].ravel(), threshold, b_min=b_min,
            restarts=restarts, seed=_derive_seed(seed, idx))
        entries.append(LayerBits(name=layer.name, bits=bits, exempt=False,
                                 distances=distances))
    return BitPlan(threshold=float(threshold), b_min=int(b_min), layers=entries)
