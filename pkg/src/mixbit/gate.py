"""Gated feature self-distillation between matching network scales.

Pooled features from each tap scale are projected into a shared embedding,
scaled attention between the two sides scores how well each scale pair agrees,
and a Gumbel-softmax binary gate decides per scale whether distillation is on.
Only the diagonal (same-position pairs) drives the loss; off-diagonal scores
are kept for diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, cap, concat0, diag, gap, l2norm_spatial, matmul,
                     sigmoid, stack_scalars, ste_binarize, sub, tmean, tsum)


@dataclass
class GateParams:
    """Trainable projections plus the gate's temperature and off-logit."""

    proj_student: list[Tensor]   # per scale, [C_i, d_embed]
    proj_teacher: list[Tensor]   # per scale, [C_j, d_embed]
    d_embed: int
    tau: float = 1.0
    off_logit: float = 0.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        for w in (*self.proj_student, *self.proj_teacher):
            if w.shape[1] != self.d_embed:
                raise ValueError("projection output dim must equal d_embed")

    def trainables(self) -> list[Tensor]:
        return [*self.proj_student, *self.proj_teacher]


@dataclass
class GateDecision:
    """Per-scale-pair on-probabilities and the diagonal distillation mask."""

    soft: Tensor                 # m x m on-probabilities
    alpha: Tensor                # length m; soft, or hard {0,1} via STE
    hard: bool
    soft_off: np.ndarray         # m x m complementary probabilities

    @property
    def alpha_soft_np(self) -> np.ndarray:
        return np.diagonal(self.soft.data).copy()

    @property
    def alpha_hard_np(self) -> np.ndarray:
        return (self.alpha_soft_np > 0.5).astype(np.float64)


def init_gate_params(channels: list[int], d_embed: int = 64, tau: float = 1.0,
                     off_logit: float = 0.0, seed: int = 0) -> GateParams:
    """Seeded bias-free projections, one per scale per side."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9a7e]))
    def make() -> list[Tensor]:
        return [
            Tensor(rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, d_embed)).astype(np.float32),
                   requires_grad=True)
            for c in channels
        ]
    return GateParams(proj_student=make(), proj_teacher=make(),
                      d_embed=d_embed, tau=tau, off_logit=off_logit)


def project_features(student_feats: list[Tensor], teacher_feats: list[Tensor],
                     params: GateParams) -> tuple[Tensor, Tensor]:
    """Queries from student scales, keys from teacher scales: [m, d] each.

    Features are pooled over space and averaged over the batch before the
    linear map, so one gate decision covers the whole batch.
    """
    if len(student_feats) != len(teacher_feats):
        raise ValueError("student/teacher scale counts differ")
    if len(student_feats) != len(params.proj_student):
        raise ValueError("projection count does not match scale count")
    queries = []
    keys = []
    for s, t, ws, wt in zip(student_feats, teacher_feats,
                            params.proj_student, params.proj_teacher):
        if s.shape[2:] != t.shape[2:]:
            raise ValueError(f"spatial shapes differ at a scale: {s.shape} vs {t.shape}")
        queries.append(matmul(tmean(gap(s), axis=0, keepdims=True), ws))
        keys.append(matmul(tmean(gap(t), axis=0, keepdims=True), wt))
    return concat0(queries), concat0(keys)


def attention_scores(queries: Tensor, keys: Tensor) -> Tensor:
    """Scaled dot-product scores between every query/key pair: [m, m]."""
    if queries.shape[1] != keys.shape[1]:
        raise ValueError("query/key embedding dims differ")
    d = queries.shape[1]
    return matmul(queries, _transpose(keys)) * (1.0 / np.sqrt(d))


def _transpose(t: Tensor) -> Tensor:
    from .tensor import _make  # 2-d transpose; local to keep the op table small
    out = _make(t.data.T.copy(), (t,), "transpose")
    if out.requires_grad:
        def _bw():
            t._accumulate(out.grad.T)
        out._backward = _bw
    return out


def gumbel_binarize(scores: Tensor, tau: float, off_logit: float = 0.0,
                    seed: int = 0, hard: bool = False,
                    sample: bool = True) -> GateDecision:
    """Binary gate per score: softmax over (score, off_logit) with Gumbel noise.

    Each entry competes against a constant "do not distill" logit; the on
    probability is softmax((score+G_on)/tau, (off_logit+G_off)/tau). With
    ``sample=False`` the noise is zero (deterministic evaluation). ``hard``
    snaps the diagonal mask to {0,1} with a straight-through gradient.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    m1, m2 = scores.shape
    if sample:
        rng = np.random.default_rng(seed)
        u = rng.random(size=(m1, m2, 2))
        u = np.clip(u, 1e-12, 1.0 - 1e-12)
        g = -np.log(-np.log(u))
    else:
        g = np.zeros((m1, m2, 2))
    shift = (g[..., 0] - g[..., 1] - off_logit).astype(scores.data.dtype)
    z = (scores + Tensor(shift)) * (1.0 / tau)
    p_on = sigmoid(z)
    # Complement computed through the mirrored logit so the K=2 softmax
    # normalization is observable rather than true by construction.
    p_off = 1.0 / (1.0 + np.exp(np.clip(z.data, -60, 60)))
    alpha_soft = diag(p_on)
    alpha = ste_binarize(alpha_soft) if hard else alpha_soft
    return GateDecision(soft=p_on, alpha=alpha, hard=hard, soft_off=p_off)


def distill_mask(decision: GateDecision) -> Tensor:
    """The per-scale gate: diagonal entries of the on-probability matrix."""
    return decision.alpha


def feature_distill_loss(teacher_feats: list[Tensor], student_feats: list[Tensor],
                         alpha: Tensor) -> Tensor:
    """Gated distance between channel-pooled maps, summed over scales.

    Per scale: the Euclidean norm over each sample's pooled spatial map of
    (cap(t) - cap(s)), averaged over the batch, weighted by that scale's gate.
    Teacher features are detached; no gradient ever reaches the teacher.
    """
    if len(teacher_feats) != len(student_feats):
        raise ValueError("scale counts differ")
    if alpha.shape != (len(teacher_feats),):
        raise ValueError("alpha length must equal the scale count")
    per_scale = []
    for t, s in zip(teacher_feats, student_feats):
        if t.shape != s.shape:
            raise ValueError(f"feature shapes differ: {t.shape} vs {s.shape}")
        delta = sub(cap(t.detach()), cap(s))
        per_scale.append(tmean(l2norm_spatial(delta)))
    return tsum(alpha * stack_scalars(per_scale))


def total_loss(distill: Tensor, detection: Tensor, beta: float) -> Tensor:
    """Weighted sum of the distillation and detection objectives."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    return distill * float(beta) + detection
