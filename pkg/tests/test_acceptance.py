"""Acceptance gate: one PASS/FAIL line per criterion in the terminal summary.

Criteria 3-5 share three full training runs (two-disc variant, default
config, default synthetic set, training seeds 0, 1, 2), so this module
takes a while; everything else runs in seconds.
"""

from __future__ import annotations

import math
import time

import mpmath
import numpy as np
import pytest

from srae.data import Batch, Dataset, SynthSpec, generate_synthetic
from srae.diffcore import finite_diff_check
from srae.losses import FeatureExtractor, cross_entropy, entropy, graph_bindings, perceptual_loss, training_graph
from srae.model import SraeHyper, discriminate, encode, init_params
from srae.selftest import OP_CASES, build_case
from srae.tasks import encode_dataset, fit_domain_classifier, mean_codes, nn_search, rank_by_distance, reconstruct, translate
from srae.training import (
    AE_GROUPS,
    TrainConfig,
    draw_eps,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
)

RESULTS: dict[int, tuple[bool, str]] = {}
TRAIN_SEEDS = (0, 1, 2)
TIME_LIMIT_S = 15 * 60

SMALL = SraeHyper(image_h=8, image_w=8, a=2, b=2, k=3, j=2, m=2,
                  trunk_width=4, stream_width=4, decoder_width=4, disc_width=5)


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (bool(ok), detail)


# ---------------------------------------------------------------- fixtures


@pytest.fixture(scope="module")
def synthetic():
    return generate_synthetic(SynthSpec())


@pytest.fixture(scope="module")
def runs(synthetic):
    """Train the default two-disc configuration once per seed."""
    out = {"extractor_before": {k: v.copy() for k, v in
                                FeatureExtractor.create(1, seed=TrainConfig().extractor_seed).bindings().items()}}
    for seed in TRAIN_SEEDS:
        config = TrainConfig(variant="two-disc", seed=seed)
        start = time.perf_counter()
        ckpt, metrics = train(config, synthetic)
        out[seed] = (ckpt, metrics, time.perf_counter() - start, config)
    return out


def _trained(runs):
    return {seed: runs[seed] for seed in TRAIN_SEEDS}


# ----------------------------------------------------------------- oracles


def _mp_cross_entropy(q, y):
    return -mpmath.log(max(mpmath.mpf(float(q[y])), mpmath.mpf("1e-7")))


def _mp_entropy(q):
    total = mpmath.mpf(0)
    for v in q:
        v = mpmath.mpf(float(v))
        total -= v * mpmath.log(max(v, mpmath.mpf("1e-7")))
    return total


def _mp_features(ext, x):
    """Extractor taps recomputed in arbitrary precision with explicit loops."""
    weights = ext.bindings()
    h = [[[mpmath.mpf(float(v)) for v in px] for px in row] for row in x]
    taps = [h]
    for i in range(1, ext.n + 1):
        w, b = weights[f"ext/conv{i}/w"], weights[f"ext/conv{i}/b"]
        kh, kw, cin, cout = w.shape
        rows, cols = len(h), len(h[0])
        ho, wo = (rows + 1) // 2, (cols + 1) // 2
        wm = [[[[mpmath.mpf(float(w[p, q, c, o])) for o in range(cout)] for c in range(cin)]
               for q in range(kw)] for p in range(kh)]
        out = []
        for r in range(ho):
            orow = []
            for c in range(wo):
                acc = [mpmath.mpf(float(b[o])) for o in range(cout)]
                for p in range(kh):
                    for q in range(kw):
                        rr, cc = 2 * r + p - 1, 2 * c + q - 1
                        if 0 <= rr < rows and 0 <= cc < cols:
                            for ch in range(cin):
                                v = h[rr][cc][ch]
                                if v:
                                    for o in range(cout):
                                        acc[o] += v * wm[p][q][ch][o]
                orow.append([a if a > 0 else a * mpmath.mpf("0.2") for a in acc])
            out.append(orow)
        h = out
        taps.append(h)
    return taps


def _mp_perceptual(ext, x, y):
    total = mpmath.mpf(0)
    for fa, fb in zip(_mp_features(ext, x), _mp_features(ext, y)):
        flat_a = [v for row in fa for px in row for v in px]
        flat_b = [v for row in fb for px in row for v in px]
        total += mpmath.fsum((a - b) ** 2 for a, b in zip(flat_a, flat_b)) / len(flat_a)
    return total


def _rel(a, b):
    return abs(float(a) - float(b)) / max(abs(float(b)), 1e-30)


# --------------------------------------------------------------- criteria


def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    worst_op, failures = 0.0, []
    for name in sorted(OP_CASES):
        for seed in range(20):
            g, bind = build_case(name, seed)
            report = finite_diff_check(g, bind, "loss", h=1e-3, tol=5e-3)
            worst_op = max(worst_op, report.max_error)
            if not report.ok:
                failures.append(f"{name}/{seed}")
    ext = FeatureExtractor.create(1, widths=(3, 4), seed=7)
    worst_full = 0.0
    for variant in ("one-disc", "two-disc"):
        graph = training_graph(SMALL, variant, ext.signature(), 0.0)
        losses = ["recon", "l_q", "l_c"] + (["l_q_d"] if variant == "two-disc" else [])
        for seed in range(20):
            rng = np.random.default_rng(seed)
            params = init_params(SMALL, variant, seed)
            batch = Batch(rng.uniform(size=(4,) + SMALL.image_shape).astype(np.float32), np.arange(4) % 2)
            bind = graph_bindings(params, ext, batch, draw_eps(SMALL, 4, rng), SMALL.m)
            for loss in losses:
                report = finite_diff_check(graph, bind, loss, h=1e-3, tol=5e-3, max_entries=4, seed=seed)
                worst_full = max(worst_full, report.max_error)
                if not report.ok:
                    failures.append(f"{variant}/{loss}/{seed}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 120
    record(1, ok, f"{len(OP_CASES)} ops x 20 seeds max err {worst_op:.1e}; full graphs x 20 seeds max err "
                  f"{worst_full:.1e}; {elapsed:.0f}s (limit 120s); failures {failures[:5]}")
    assert ok


def test_criterion_2_loss_oracles():
    mpmath.mp.dps = 40
    rng = np.random.default_rng(2024)
    worst = {"cross_entropy": 0.0, "entropy": 0.0, "perceptual": 0.0}
    for _ in range(120):
        m = int(rng.integers(2, 6))
        logits = rng.normal(0, 3, m)
        q = np.exp(logits - logits.max())
        q /= q.sum()
        y = int(rng.integers(m))
        worst["cross_entropy"] = max(worst["cross_entropy"], _rel(cross_entropy(q, y), _mp_cross_entropy(q, y)))
        worst["entropy"] = max(worst["entropy"], _rel(entropy(q), _mp_entropy(q)))
    ext = FeatureExtractor.create(1)
    for _ in range(100):
        x = rng.uniform(size=(8, 8, 1)).astype(np.float32)
        y = np.clip(x + rng.normal(0, 0.2, x.shape), 0, 1).astype(np.float32)
        worst["perceptual"] = max(worst["perceptual"], _rel(perceptual_loss(ext, x, y), _mp_perceptual(ext, x, y)))
    ok = all(v <= 1e-5 for v in worst.values())
    record(2, ok, "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (limit 1e-5, >=100 inputs)")
    assert ok


def test_criterion_3_domain_probe(runs, synthetic):
    lines, ok = [], True
    for seed, (ckpt, _, seconds, _) in _trained(runs).items():
        records = encode_dataset(ckpt, synthetic)
        acc_d = fit_domain_classifier(records, "mu_d", 0)[2]
        acc_c = fit_domain_classifier(records, "mu_c", 0)[2]
        run_ok = acc_d >= 0.95 and acc_c <= 0.65 and seconds < TIME_LIMIT_S
        ok &= run_ok
        lines.append(f"seed {seed}: mu_d {acc_d:.3f} mu_c {acc_c:.3f} {seconds / 60:.1f}min")
    record(3, ok, "; ".join(lines) + " (need mu_d >= 0.95, mu_c <= 0.65, < 15 min)")
    assert ok


def test_criterion_4_translation_and_search(runs, synthetic):
    a_idx, b_idx = synthetic.domain_indices(0), synthetic.domain_indices(1)
    mean_b = synthetic.domain_mean_intensity(1)
    lines, ok = [], True
    for seed, (ckpt, *_rest) in _trained(runs).items():
        rng = np.random.default_rng(100 + seed)
        srcs = rng.choice(a_idx, 100, replace=False)
        styles = rng.choice(b_idx, 100, replace=False)
        out = translate(ckpt, synthetic.images[srcs], synthetic.images[styles])
        intensity = np.mean(np.abs(out.reshape(100, -1).mean(axis=1, dtype=np.float64) - mean_b) <= 0.1)
        translated_codes, _ = mean_codes(ckpt, out)
        hits = 0
        for i, src in enumerate(srcs):
            others = rng.choice(a_idx[a_idx != src], 99, replace=False)
            pool, _ = mean_codes(ckpt, synthetic.images[np.concatenate([[src], others])])
            hits += any(idx == 0 for idx, _ in rank_by_distance(translated_codes[i], pool, 5))
        run_ok = intensity >= 0.9 and hits >= 70
        ok &= run_ok
        lines.append(f"seed {seed}: intensity {intensity:.2f} top5 {hits / 100:.2f}")
    record(4, ok, "; ".join(lines) + " (need intensity >= 0.90, top5 >= 0.70)")
    assert ok


def test_criterion_5_training_dynamics(runs):
    lines, ok = [], True
    for seed, (_, metrics, _, config) in _trained(runs).items():
        per_epoch = len(metrics.records) // config.epochs
        ent = metrics.column("entropy_qc")
        l_r = metrics.column("l_r")
        first, last = ent[:per_epoch].mean(), ent[-per_epoch:].mean()
        final = l_r[-per_epoch:].mean()
        run_ok = last > first and final <= l_r[0] / 5
        ok &= run_ok
        lines.append(f"seed {seed}: H {first:.3f}->{last:.3f} l_r {l_r[0]:.3f}->{final:.3f}")
    record(5, ok, "; ".join(lines) + " (need H up, final l_r <= initial/5)")
    assert ok


def test_criterion_6_exactness(runs, synthetic, tmp_path):
    ckpt = runs[TRAIN_SEEDS[0]][0]
    checks = {}
    x = synthetic.images[:8]
    checks["identity swap"] = translate(ckpt, x, x).tobytes() == reconstruct(ckpt, x).tobytes()

    rng = np.random.default_rng(6)
    nn_ok = True
    for _ in range(50):
        pick = np.concatenate([rng.choice(synthetic.domain_indices(d), 25, replace=False) for d in (0, 1)])
        cand = synthetic.images[pick]
        target = synthetic.images[rng.integers(len(synthetic))]
        got = nn_search(ckpt, target, Dataset(cand, synthetic.labels[pick], m=2), 10)
        q, _ = mean_codes(ckpt, target)
        pool, _ = mean_codes(ckpt, cand)
        dists = [math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(row, q[0]))) for row in pool]
        want = sorted(range(len(dists)), key=lambda i: (dists[i], i))[:10]
        nn_ok &= [i for i, _ in got] == want and np.allclose([d for _, d in got], [dists[i] for i in want],
                                                             rtol=1e-12, atol=0)
    checks["nn oracle x50"] = nn_ok

    save_checkpoint(ckpt, tmp_path / "a.srae")
    back = load_checkpoint(tmp_path / "a.srae")
    save_checkpoint(back, tmp_path / "b.srae")
    checks["checkpoint round trip"] = (back.params.equal(ckpt.params) and back.rng_state == ckpt.rng_state
                                       and (tmp_path / "a.srae").read_bytes() == (tmp_path / "b.srae").read_bytes())

    small = generate_synthetic(SynthSpec(counts=(16, 16), image_size=16, seed=3))
    hyper = SraeHyper(image_h=16, image_w=16, a=4, b=4, k=3, j=2, trunk_width=4, stream_width=4,
                      decoder_width=4, disc_width=4)
    config = TrainConfig(epochs=2, batch_size=8, seed=9)
    (c1, m1), (c2, m2) = train(config, small, hyper), train(config, small, hyper)
    strip = [[{k: v for k, v in r.items() if k != "seconds"} for r in m.records] for m in (m1, m2)]
    checks["training reproducible"] = c1.params.equal(c2.params) and strip[0] == strip[1]

    ok = all(checks.values())
    record(6, ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


def test_criterion_7_structural_invariants(runs):
    checks = {}
    ext = FeatureExtractor.create(1, widths=(3, 4), seed=7)
    allowed = {"discriminator": {"theta_q", "theta_qd"}, "reconstruction": set(AE_GROUPS),
               "content": {"theta_c"}, "domain": {"theta_d"}}
    iso = True
    for variant in ("one-disc", "two-disc"):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            params = init_params(SMALL, variant, seed)
            batch = Batch(rng.uniform(size=(4,) + SMALL.image_shape).astype(np.float32), np.arange(4) % 2)
            snaps = []
            train_step(params, SMALL, ext, batch, TrainConfig(variant=variant), rng, snaps)
            prev = params.flat()
            for name, snap in snaps:
                cur = snap.flat()
                changed = {k.split("/")[0] for k in cur if cur[k].tobytes() != prev[k].tobytes()}
                iso &= bool(changed) and changed <= allowed[name]
                prev = cur
            iso &= [n for n, _ in snaps][-1] == ("domain" if variant == "two-disc" else "content")
    checks["group isolation"] = iso

    rng = np.random.default_rng(1)
    params = init_params(SMALL, "two-disc", 1)
    eps = draw_eps(SMALL, 64, rng)
    lat = encode(params, SMALL, rng.uniform(size=(64,) + SMALL.image_shape), eps["eps_c"], eps["eps_d"])
    checks["z_d constant"] = bool(np.all(lat.z_d == lat.z_d[:, :1, :1, :]))
    q = discriminate(params, SMALL, rng.normal(0, 5, (256,) + SMALL.content_shape))
    checks["softmax"] = bool(np.all(q > 0) and np.allclose(q.sum(axis=1, dtype=np.float64), 1, atol=1e-5))

    ent = np.concatenate([m.column("entropy_qc") for _, m, *_ in _trained(runs).values()])
    checks["entropy in [0, ln m]"] = bool(ent.min() >= 0 and ent.max() <= math.log(2) + 1e-6)

    before = runs["extractor_before"]
    after = FeatureExtractor.create(1, seed=TrainConfig().extractor_seed).bindings()
    trained_names = set(runs[TRAIN_SEEDS[0]][0].params.flat())
    checks["frozen extractor"] = (all(np.array_equal(before[k], after[k]) for k in before)
                                  and not any(n.startswith("ext/") for n in trained_names)
                                  and not any(v.flags.writeable for v in after.values()))
    ok = all(checks.values())
    record(7, ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok

