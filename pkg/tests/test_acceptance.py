"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with `pytest tests/test_acceptance.py -v -s`).

The end-to-end regression trains a real teacher and six students; everything
is seeded and runs in a few minutes on a laptop CPU.
"""

import itertools
import time

import numpy as np
import pytest

from mixbit.bitsearch import (build_bit_plan, distribution_distance,
                              kmeanspp_cluster, select_bit_width, _derive_seed)
from mixbit.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from mixbit.costs import cost_report, layer_bops, model_params_bytes
from mixbit.data import gen_synthetic_dataset
from mixbit.detect_eval import average_precision
from mixbit.gate import feature_distill_loss, gumbel_binarize
from mixbit.model import Detector, LayerSpec, NetworkSpec, default_network
from mixbit.quantize import (FULL_PRECISION, quantize_activations,
                             quantize_uniform, quantize_weights)
from mixbit.tensor import (Tensor, clamp01, finite_diff_check, matmul, reshape,
                           softmax_cross_entropy, tanh, tmean, tsum)
from mixbit.train import (SGD, TrainConfig, evaluate_map, train_student_ghost,
                          train_teacher)

E2E_DATASET_SEED = 42
E2E_TEACHER_SEED = 7
E2E_STUDENT_SEEDS = (11, 12, 16)
E2E_RETENTION_SEED = 16


def _report(name: str) -> None:
    print(f"[PASS] {name}")


# --------------------------------------------------------------------------
# criterion 1: quantizer grid suite


def test_quantizer_grid_suite():
    start = time.perf_counter()
    for k in (1, 2, 4, 8):
        sweep = np.linspace(0.0, 1.0, 30_000)
        q = quantize_uniform(sweep, k)
        assert len(np.unique(q)) == 2 ** k
        scaled = q * (2 ** k - 1)
        assert np.abs(scaled - np.round(scaled)).max() < 1e-6
        rng = np.random.default_rng(k)
        v = rng.random(10_000)
        once = quantize_uniform(v, k)
        assert np.array_equal(quantize_uniform(once, k), once)  # idempotent
        order = np.argsort(v)
        assert np.all(np.diff(once[order]) >= 0)                # monotone
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0, f"grid suite took {elapsed:.2f}s"
    _report(f"quantizer grid suite ({elapsed * 1000:.0f} ms)")


# --------------------------------------------------------------------------
# criterion 2: weight-quantization range and symmetry


def test_weight_quantization_range_and_symmetry():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        w = rng.normal(scale=rng.uniform(0.05, 4.0),
                       size=int(rng.integers(4, 200))).astype(np.float32)
        bits = int(rng.integers(1, 9))
        q = quantize_weights(w, bits)
        assert q.min() >= -1.0 and q.max() <= 1.0
    assert np.array_equal(quantize_weights(np.array([-2.0, 0.0, 2.0]), 1),
                          np.array([-1.0, 1.0, 1.0]))
    _report("weight quantization range/symmetry (100 tensors + hand example)")


# --------------------------------------------------------------------------
# criterion 3: STE gradient suite


def test_ste_gradient_suite():
    # finite differences against the smooth surrogates of the weight and
    # activation quantization paths (round removed, normalizer frozen)
    rng = np.random.default_rng(10)
    w0 = rng.normal(size=10)
    w0[2] = 1.8  # pin the max-magnitude coordinate
    scale = float(np.max(np.abs(np.tanh(w0))))
    mixer_w = rng.normal(size=10)

    def weight_surrogate(v):
        unit = tanh(v) * (0.5 / scale) + 0.5
        return tsum((unit * 2.0 - 1.0) * Tensor(mixer_w))

    assert finite_diff_check(weight_surrogate, Tensor(w0.copy()), eps=1e-4) <= 1e-3

    probe = Tensor(w0.copy(), requires_grad=True)
    tsum(quantize_weights(probe, 8) * Tensor(mixer_w)).backward()
    sprobe = Tensor(w0.copy(), requires_grad=True)
    weight_surrogate(sprobe).backward()
    off_max = np.arange(10) != 2
    rel = (np.abs(probe.grad - sprobe.grad)
           / np.maximum(1.0, np.abs(probe.grad)))[off_max]
    assert rel.max() <= 1e-3

    a0 = np.concatenate([rng.uniform(0.05, 0.95, 8), [-0.4, 1.3]])
    mixer_a = rng.normal(size=10)

    def act_surrogate(v):
        return tsum(clamp01(v) * Tensor(mixer_a))

    assert finite_diff_check(act_surrogate, Tensor(a0.copy()), eps=1e-4) <= 1e-3
    aprobe = Tensor(a0.copy(), requires_grad=True)
    tsum(quantize_activations(aprobe, 4) * Tensor(mixer_a)).backward()
    sprobe = Tensor(a0.copy(), requires_grad=True)
    act_surrogate(sprobe).backward()
    assert np.allclose(aprobe.grad, sprobe.grad, atol=1e-10)

    # a fully 4-bit-quantized classifier must fit linearly separable data
    rng = np.random.default_rng(123)
    n = 64
    X = np.vstack([rng.normal((-1.5, -1.0), 0.4, size=(n // 2, 2)),
                   rng.normal((1.5, 1.0), 0.4, size=(n // 2, 2))]).astype(np.float32)
    y = np.array([0] * (n // 2) + [1] * (n // 2))
    w1 = Tensor(rng.normal(0, 0.5, size=(2, 12)).astype(np.float32), requires_grad=True)
    b1 = Tensor(np.zeros(12, dtype=np.float32), requires_grad=True)
    w2 = Tensor(rng.normal(0, 0.5, size=(12, 2)).astype(np.float32), requires_grad=True)
    b2 = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
    opt = SGD([w1, b1, w2, b2], lr=0.5, momentum=0.9)

    def forward():
        h = clamp01(matmul(Tensor(X), quantize_weights(w1, 4)) + reshape(b1, (1, 12)))
        return matmul(quantize_activations(h, 4), quantize_weights(w2, 4)) \
            + reshape(b2, (1, 2))

    accuracy = 0.0
    for _ in range(200):
        logits = forward()
        loss = tmean(softmax_cross_entropy(logits, y))
        opt.zero_grad()
        loss.backward()
        opt.step()
    accuracy = float((forward().data.argmax(axis=1) == y).mean())
    assert accuracy >= 0.95
    _report(f"STE gradient suite (toy 4-bit classifier accuracy {accuracy:.3f})")


# --------------------------------------------------------------------------
# criterion 4: clustering oracle


def _exhaustive_optimal_sse(samples, k):
    xs = np.sort(np.asarray(samples, dtype=np.float64))
    m = len(xs)
    best = np.inf
    for cuts in itertools.combinations(range(1, m), min(k, m) - 1):
        bounds = [0, *cuts, m]
        sse = sum(float(((xs[a:b] - xs[a:b].mean()) ** 2).sum())
                  for a, b in zip(bounds, bounds[1:]))
        best = min(best, sse)
    return best


def test_clustering_oracle():
    rng = np.random.default_rng(202)
    checked = 0
    for m in range(2, 13):
        for k in range(2, 5):
            x = rng.normal(size=m)
            res = kmeanspp_cluster(x, k, restarts=32, seed=int(rng.integers(1 << 30)))
            assert res.sse == pytest.approx(_exhaustive_optimal_sse(x, k), abs=1e-9)
            checked += 1
    d = distribution_distance([1.0, 2.0, 3.0, 4.0], 1, restarts=32, seed=0)
    assert d == 0.25
    _report(f"clustering oracle ({checked} arrays vs exhaustive partitions)")


# --------------------------------------------------------------------------
# criterion 5: bit-plan properties


def test_bit_plan_properties():
    start = time.perf_counter()
    rng = np.random.default_rng(55)
    for layer in range(50):
        w = rng.normal(scale=rng.uniform(0.02, 2.0), size=400)
        table = {n: distribution_distance(w, n, restarts=8,
                                          seed=_derive_seed(55, layer, n))
                 for n in range(1, 9)}
        values = [table[n] for n in range(1, 9)]
        for a, b in zip(values, values[1:]):
            assert b <= a + 1e-6, f"d(n) increased on layer {layer}"
        assert table[8] > 0.0
        thresholds = [table[8] / 2, float(np.median(values)), 2 * max(values)]
        picked = [select_bit_width(w, threshold=t, b_min=2, restarts=8,
                                   seed=_derive_seed(56, layer))[0]
                  for t in thresholds]
        assert picked[0] == 8          # T below min d -> the 8-bit fallback
        assert picked[0] >= picked[1] >= picked[2]
        assert picked[2] == 2
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0, f"bit-plan properties took {elapsed:.1f}s"
    _report(f"bit-plan properties (50 layers, {elapsed:.1f} s)")


# --------------------------------------------------------------------------
# criterion 6: SCM suite


def test_scm_suite():
    rng = np.random.default_rng(66)
    scores = Tensor(rng.normal(size=(4, 4)).astype(np.float32))
    dec = gumbel_binarize(scores, tau=0.8, off_logit=0.4, seed=1)
    assert np.abs(dec.soft.data + dec.soft_off - 1.0).max() <= 1e-6

    a, off = 0.8, 0.3
    m = 320  # 320^2 > 1e5 independent entries
    mc = gumbel_binarize(Tensor(np.full((m, m), a, dtype=np.float32)),
                         tau=1.0, off_logit=off, seed=9)
    analytic = 1.0 / (1.0 + np.exp(-(a - off)))
    assert (mc.soft.data > 0.5).mean() == pytest.approx(analytic, abs=0.01)

    hard = gumbel_binarize(scores, tau=1.0, seed=2, hard=True)
    assert set(np.unique(hard.alpha.data)).issubset({0.0, 1.0})

    feats = [Tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))]
    same = [Tensor(feats[0].data.copy())]
    assert feature_distill_loss(feats, same,
                                Tensor(np.ones(1, dtype=np.float32))).item() == 0.0
    other = [Tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))]
    assert feature_distill_loss(feats, other,
                                Tensor(np.zeros(1, dtype=np.float32))).item() == 0.0

    t = [Tensor(np.full((1, 2, 2, 2), 4.0, dtype=np.float32))]
    s = [Tensor(np.full((1, 2, 2, 2), 1.0, dtype=np.float32))]
    loss = feature_distill_loss(t, s, Tensor(np.ones(1, dtype=np.float32)))
    assert loss.item() == pytest.approx(6.0, abs=1e-6)
    _report("SCM suite (normalization, Monte-Carlo gate, hard gates, distill loss)")


# --------------------------------------------------------------------------
# criterion 7: cost model exactness


def test_cost_model_exactness():
    assert layer_bops(3, 16, 32, 32, 3, 3, 4, 8) == 14_155_776

    net = NetworkSpec(layers=[LayerSpec("only", 3, 16, 3, 1, 1)],
                      scale_taps=[0], num_classes=2, image_size=32)
    assert model_params_bytes(net) == 1728
    from mixbit.bitsearch import BitPlan, LayerBits
    plan4 = BitPlan(threshold=1.0, b_min=1,
                    layers=[LayerBits(name="only", bits=4, exempt=False)])
    assert model_params_bytes(net, plan4) == 216

    full = default_network(3, 48)
    rng = np.random.default_rng(0)
    weights = {l.name: rng.normal(size=(l.out_ch, l.in_ch, l.kernel, l.kernel))
               for l in full.layers}
    plan8 = build_bit_plan(full, weights, threshold=1e-12, b_min=8, seed=0)
    report = cost_report(full, plan8, (48, 48))
    # exact integer identity over non-exempt layers: 16 * macs*8*8 == macs*32*32
    size = 48
    bops_8 = bops_32 = 0
    for layer in full.layers:
        size_out = (size + 2 * layer.pad - layer.kernel) // layer.stride + 1
        if plan8.bits_for(layer.name) != FULL_PRECISION:
            bops_8 += layer_bops(layer.in_ch, layer.out_ch, size_out, size_out,
                                 layer.kernel, layer.kernel, 8, 8)
            bops_32 += layer_bops(layer.in_ch, layer.out_ch, size_out, size_out,
                                  layer.kernel, layer.kernel, 32, 32)
        size = size_out
    assert 16 * bops_8 == bops_32
    assert report.quantized_bops_ratio == (8 * 8) / (32 * 32)
    assert report.quantized_bops_ratio * 16 == 1.0
    _report("cost model exactness (BOPs, params, uniform 8-bit == 1/16)")


# --------------------------------------------------------------------------
# criterion 8: mAP oracle


def _brute_force_ap(flags, n_gt):
    if n_gt == 0 or not flags:
        return 0.0
    points = []
    tp = fp = 0
    for f in flags:
        tp += bool(f)
        fp += not f
        points.append((tp / n_gt, tp / (tp + fp)))
    ap = prev = 0.0
    for r in sorted({r for r, _ in points}):
        if r <= prev:
            continue
        ap += (r - prev) * max(p for r2, p in points if r2 >= r)
        prev = r
    return ap


def test_map_oracle():
    rng = np.random.default_rng(88)
    for _ in range(200):
        n = int(rng.integers(1, 21))
        flags = (rng.random(n) < rng.uniform(0.2, 0.8)).tolist()
        n_gt = max(sum(flags), int(rng.integers(1, 25)))
        assert average_precision(flags, n_gt) == pytest.approx(
            _brute_force_ap(flags, n_gt), abs=1e-12)
    assert average_precision([True], 1) == 1.0
    assert average_precision([True, False], 2) == pytest.approx(0.5)
    assert average_precision([False, True], 1) == pytest.approx(0.5)
    _report("mAP oracle (200 instances vs threshold enumeration + hand cases)")


# --------------------------------------------------------------------------
# criteria 9 and 10: end-to-end GQSD regression and invariants


@pytest.fixture(scope="module")
def e2e():
    start = time.perf_counter()
    dataset = gen_synthetic_dataset(500, 3, E2E_DATASET_SEED)
    teacher_cfg = TrainConfig(seed=E2E_TEACHER_SEED, epochs=30, batch_size=16,
                              lr=0.02)
    teacher, teacher_history = train_teacher(teacher_cfg, dataset)
    teacher_map = teacher_history[-1]["val_mAP50"]

    det = Detector.from_arrays(teacher.spec, teacher.tensors, trainable=False)
    weights = det.layer_weight_arrays()
    d6 = [distribution_distance(w.ravel(), 6, restarts=8,
                                seed=_derive_seed(E2E_TEACHER_SEED, 6))
          for name, w in weights.items() if name not in ("stem", "head")]
    threshold = float(1.5 * max(d6))  # every layer passes at 6 bits, none below

    students = {}
    for seed in E2E_STUDENT_SEEDS:
        for beta in (400.0, 0.0):
            cfg = TrainConfig(seed=seed, epochs=4, batch_size=16, lr=1e-4,
                              momentum=0.5, threshold=threshold, b_min=2,
                              beta=beta, off_logit=9.0)
            ckpt, plan, history = train_student_ghost(teacher, cfg, dataset)
            students[(seed, beta)] = {
                "checkpoint": ckpt,
                "plan": plan,
                "map": history[-1]["val_mAP50"],
            }
    return {
        "dataset": dataset,
        "teacher": teacher,
        "teacher_map": teacher_map,
        "threshold": threshold,
        "students": students,
        "elapsed": time.perf_counter() - start,
    }


def test_end_to_end_gqsd_regression(e2e):
    teacher_map = e2e["teacher_map"]
    assert teacher_map >= 0.90, f"teacher mAP50 {teacher_map:.4f} below floor"

    retention = e2e["students"][(E2E_RETENTION_SEED, 400.0)]
    plan = retention["plan"]
    avg_bits = plan.average_quantized_bits()
    assert avg_bits <= 6.0, f"average non-exempt bits {avg_bits} exceeds 6"
    student_map = retention["map"]
    assert student_map >= teacher_map - 0.05, (
        f"student mAP50 {student_map:.4f} lost more than 0.05 vs teacher "
        f"{teacher_map:.4f}")

    spec = e2e["teacher"].spec
    report = cost_report(spec, plan, (spec.image_size, spec.image_size))
    assert report.quantized_bops_ratio <= 1 / 16

    wins = sum(e2e["students"][(s, 400.0)]["map"] >= e2e["students"][(s, 0.0)]["map"]
               for s in E2E_STUDENT_SEEDS)
    detail = {s: (round(e2e["students"][(s, 400.0)]["map"], 4),
                  round(e2e["students"][(s, 0.0)]["map"], 4))
              for s in E2E_STUDENT_SEEDS}
    assert wins * 2 > len(E2E_STUDENT_SEEDS), (
        f"distillation beat beta=0 on only {wins}/{len(E2E_STUDENT_SEEDS)} seeds: {detail}")

    elapsed = e2e["elapsed"]
    assert elapsed < 600.0, f"end-to-end pipeline took {elapsed:.0f}s"
    _report(
        "end-to-end GQSD regression "
        f"(teacher {teacher_map:.4f}, student {student_map:.4f} at avg {avg_bits} bits, "
        f"BOPs ratio {report.quantized_bops_ratio:.4f}, OST wins {wins}/3, "
        f"{elapsed:.0f}s)")


def test_frozen_teacher_and_inheritance(e2e, tmp_path):
    dataset = e2e["dataset"]
    teacher = e2e["teacher"]
    hash_before = teacher.content_hash()
    cfg = TrainConfig(seed=3, epochs=1, batch_size=16, lr=1e-4, momentum=0.5,
                      threshold=e2e["threshold"], off_logit=9.0)
    train_student_ghost(teacher, cfg, dataset)
    assert teacher.content_hash() == hash_before

    zero_cfg = TrainConfig(seed=3, epochs=0, threshold=e2e["threshold"])
    ckpt0, _, _ = train_student_ghost(teacher, zero_cfg, dataset)
    for name, arr in teacher.tensors.items():
        assert ckpt0.tensors[name].tobytes() == arr.tobytes()

    path = tmp_path / "teacher.ckpt"
    save_checkpoint(path, teacher)
    loaded = load_checkpoint(path)
    for name, arr in teacher.tensors.items():
        assert loaded.tensors[name].tobytes() == arr.tobytes()
    assert loaded.content_hash() == hash_before
    _report("frozen teacher, weight inheritance, lossless checkpoint round trip")
