"""Acceptance checks, one per criterion, each printing a PASS/FAIL line.

Run under pytest (lines are echoed in the terminal summary) or directly with
``python3 tests/test_acceptance.py``.
"""
import dataclasses
import functools
import sys
import time
import warnings
from pathlib import Path

import mpmath
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_LINES, central_diff, rel_err  # noqa: E402
from test_evaluator import oracle_metrics, random_instance  # noqa: E402

from gmn import losses, pipeline  # noqa: E402
from gmn.checkpoint import encode_state, load_checkpoint, save_checkpoint  # noqa: E402
from gmn.config import ExperimentConfig  # noqa: E402
from gmn.data import SyntheticSpec, generate_synthetic  # noqa: E402
from gmn.encoder import DpConfig, dp_mask, encoder_forward  # noqa: E402
from gmn.evaluator import Protocol, domain_gap_diagnostic, evaluate, retrieval_metrics  # noqa: E402
from gmn.metric_net import MetricNetParams, similarity, similarity_matrix  # noqa: E402
from gmn.pairs import PairOp, pair_feature, pic_variant_indices  # noqa: E402
from gmn.trainer import TrainConfig, compute_losses, init_state, pk_batch, train  # noqa: E402

GRAD_TOL = 1e-4
PRESET_ORDER = ("baseline", "+A", "+A+B", "+A+B+C")
SEEDS = range(5)


def _record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# 1 -----------------------------------------------------------------------------


def _component_grad_errors(rng):
    """Worst relative error of each loss w.r.t. its direct inputs."""
    errs = {}
    z = rng.standard_normal((6, 5))
    y = rng.integers(0, 5, 6)
    g = losses.cross_entropy(z, y)[1]
    errs["l_cls"] = rel_err(g, central_diff(lambda: losses.cross_entropy(z, y)[0], z)[0])
    emb = rng.standard_normal((6, 4))
    ids = np.repeat(np.arange(3), 2)
    g = losses.triplet_loss_batch_hard(emb, ids)[1]
    num, kink = central_diff(lambda: losses.triplet_loss_batch_hard(emb, ids)[0], emb)
    errs["l_tri"] = rel_err(g, num, kink)
    zl = rng.standard_normal((6, 2))
    lab = rng.integers(0, 2, 6)
    g = losses.gmn_loss(zl, lab)[1]
    errs["l_gmn"] = rel_err(g, central_diff(lambda: losses.gmn_loss(zl, lab)[0], zl)[0])
    variants = pic_variant_indices(ids, rng)

    def pic_total():
        vp, vn = variants.vectors(emb)
        return sum(losses.pic_loss(vp, vn)[:2])

    vp, vn = variants.vectors(emb)
    _, _, gp, gn = losses.pic_loss(vp, vn)
    num, kink = central_diff(pic_total, emb)
    errs["l_pic"] = rel_err(variants.backward(emb, gp, gn), num, kink)
    return errs


def _total_grad_error(rng):
    d_in = int(rng.integers(2, 9))
    widths = tuple(int(w) for w in rng.integers(4, 9, int(rng.integers(1, 3))))
    spec = SyntheticSpec(num_domains=2, identities_per_domain=3, records_per_identity=3, d_in=d_in,
                         seed=int(rng.integers(1000)))
    ds = generate_synthetic(spec)
    cfg = TrainConfig(epochs=2, dp_activation_epoch=1, lr_decay_epochs=(), encoder_widths=widths,
                      identities_per_batch=2, samples_per_identity=2,
                      dp_site=int(rng.integers(len(widths))), lam=float(rng.uniform(0.1, 2.0)),
                      pair_scheme=str(rng.choice(["random", "intra_domain"])),
                      negatives_per_positive=int(rng.integers(1, 3)), seed=int(rng.integers(1000)))
    model = init_state(cfg, ds).model
    batch = ds.take(pk_batch(ds, 2, 2, rng))
    mask = dp_mask(widths[cfg.dp_site], DpConfig(rate=0.5), rng, n=len(batch.identities))
    pair_seed = int(rng.integers(1 << 30))

    def run(need):
        return compute_losses(model, cfg, batch.embeddings, batch.identities, batch.domains,
                              np.random.default_rng(pair_seed), dp_mask_override=mask,
                              need_grads=need)

    _, grads, _ = run(True)
    worst = 0.0
    for name, arr in model.named_arrays().items():
        num, kink = central_diff(lambda: run(False)[0].total, arr)
        worst = max(worst, rel_err(grads[name], num, kink))
    return worst


def check_1():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n_cfg = 20
    worst = {"l_cls": 0.0, "l_tri": 0.0, "l_gmn": 0.0, "l_pic": 0.0, "total": 0.0}
    for _ in range(n_cfg):
        for k, v in _component_grad_errors(rng).items():
            worst[k] = max(worst[k], v)
        worst["total"] = max(worst["total"], _total_grad_error(rng))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < GRAD_TOL and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return ok, f"{n_cfg} configs, worst rel err {detail} (tol {GRAD_TOL}), {elapsed:.1f}s"


# 2 -----------------------------------------------------------------------------


def check_2():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    done = mismatches = 0
    while done < 100:
        scores, pid, gid, pcam, gcam = random_instance(rng)
        n_g = len(gid)
        try:
            o_map, o_cmc = oracle_metrics(scores.tolist(), pid.tolist(), gid.tolist(), pcam.tolist(),
                                          gcam.tolist(), range(1, n_g + 1))
        except ZeroDivisionError:
            continue
        rep = retrieval_metrics(scores, pid, gid, pcam, gcam, ranks=(1,))
        if rep.mAP != o_map or rep.cmc_curve != [o_cmc[r] for r in range(1, n_g + 1)]:
            mismatches += 1
        done += 1
    elapsed = time.perf_counter() - t0
    return (mismatches == 0 and elapsed < 60,
            f"{done} instances, {mismatches} mismatches (exact equality), {elapsed:.1f}s")


# 3 -----------------------------------------------------------------------------


def _scalar_op(a, b, op):
    if op is PairOp.SQUARED_DIFF:
        return (a - b) * (a - b)
    if op is PairOp.ABS:
        return abs(a - b)
    if op is PairOp.MUL:
        return a * b
    return a + b


def check_3():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1000, 16)) * rng.choice([1e-3, 1.0, 1e3], (1000, 1))
    y = rng.standard_normal((1000, 16)) * rng.choice([1e-3, 1.0, 1e3], (1000, 1))
    f_xy, f_yx = pair_feature(x, y), pair_feature(y, x)
    sym = np.array_equal(f_xy, f_yx)
    nonneg = bool((f_xy >= 0).all())
    zero = not pair_feature(x, x).any() and bool((f_xy.sum(axis=1) > 0).all())
    variants = True
    for op in PairOp:
        got = pair_feature(x[:50], y[:50], op)
        ref = [[_scalar_op(float(a), float(b), op) for a, b in zip(xr, yr)]
               for xr, yr in zip(x[:50], y[:50])]
        variants &= np.array_equal(got, np.array(ref))
    ok = sym and nonneg and zero and variants
    return ok, (f"1000 pairs: symmetric {sym}, non-negative {nonneg}, zero iff identical {zero}; "
                f"{len(PairOp)} operator variants equal scalar loops {variants}")


# 4 -----------------------------------------------------------------------------


def check_4():
    rng = np.random.default_rng(4)
    counts_ok = all(
        ((dp_mask(c, DpConfig(rate=0.5), rng, n=200) == 0).sum(axis=1) == c // 2).all()
        for c in range(1, 33))
    mean = dp_mask(8, DpConfig(rate=0.5), rng, n=10_000).mean(axis=0)
    mean_ok = bool(np.all(np.abs(mean - 1.0) <= 0.05))
    ds = generate_synthetic(SyntheticSpec(num_domains=2, identities_per_domain=4,
                                          records_per_identity=4, d_in=6))
    cfg = TrainConfig(epochs=4, dp_activation_epoch=3, lr_decay_epochs=(), encoder_widths=(8, 4),
                      identities_per_batch=2, samples_per_identity=2)
    state = init_state(cfg, ds)
    before = state.rngs["dp"].bit_generator.state
    state, _ = train(cfg, ds, state, until_epoch=2)
    before_ok = state.dp_draws == 0 and state.rngs["dp"].bit_generator.state == before
    state, _ = train(cfg, ds, state)
    after_ok = state.dp_draws > 0
    gen = np.random.default_rng(0)
    g_state = gen.bit_generator.state
    x = ds.embeddings[:10]
    e1, _, _ = encoder_forward(state.model.encoder, DpConfig(rate=0.5), x, training=False, rng=gen)
    eval_ok = (gen.bit_generator.state == g_state
               and np.array_equal(e1, state.model.embed(x)))
    ok = counts_ok and mean_ok and before_ok and after_ok and eval_ok
    return ok, (f"drop count floor(C/2) for C=1..32 {counts_ok}; MC mean in "
                f"[{mean.min():.4f}, {mean.max():.4f}] over 1e4 draws; no DP draws before the activation epoch "
                f"{before_ok}; active from it {after_ok}; off at evaluation {eval_ok}")


# 5 -----------------------------------------------------------------------------


def check_5():
    rng = np.random.default_rng(5)
    mpmath.mp.dps = 50
    z = rng.uniform(-50, 50, (1000, 2))
    s = similarity(z)
    worst = max(abs(v - float(1 / (1 + mpmath.exp(mpmath.mpf(a) - mpmath.mpf(b)))))
                for (a, b), v in zip(z, s))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ext = similarity(np.array([[1e4, -1e4], [-1e4, 1e4], [1e4, 1e4], [-1e4, -1e4]]))
    ext_ok = np.array_equal(ext, [0.0, 1.0, 0.5, 0.5])
    p = MetricNetParams.initialize(32, None, rng)
    a, b = rng.standard_normal((37, 32)), rng.standard_normal((53, 32))
    full = similarity_matrix(p, a, b, tile_size=10 ** 6)
    tiled = all(np.array_equal(full, similarity_matrix(p, a, b, tile_size=t)) for t in (1, 7, 16, 53))
    ok = worst < 1e-9 and ext_ok and tiled
    return ok, (f"max |s - sigmoid| {worst:.1e} on 1000 pairs (tol 1e-9); logits +/-1e4 finite "
                f"{ext_ok}; tiled bit-equals untiled {tiled}")


# 6 -----------------------------------------------------------------------------


def check_6():
    t0 = time.perf_counter()
    spec = ExperimentConfig().data.synthetic
    ratio = spec.domain_shift_scale / spec.noise_scale
    wins = 0
    accs = []
    for seed in range(10):
        rep = domain_gap_diagnostic(generate_synthetic(dataclasses.replace(spec, seed=seed)), 200, seed)
        wins += rep.pair_space_accuracy < rep.instance_space_accuracy
        accs.append((rep.instance_space_accuracy, rep.pair_space_accuracy))
    elapsed = time.perf_counter() - t0
    inst, pair = np.mean(accs, axis=0)
    ok = ratio >= 3 and wins >= 9 and elapsed < 120
    return ok, (f"shift/noise {ratio:.1f}; pair < instance accuracy in {wins}/10 seeds "
                f"(mean {pair:.3f} vs {inst:.3f}, chance {1 / spec.num_domains:.2f}), {elapsed:.1f}s")


# 7 and 8 share the trained models ------------------------------------------------


@functools.lru_cache(maxsize=1)
def ablation_results():
    """mAP / R1 per preset and seed on the held-out domain, plus the full model's feature row."""
    t0 = time.perf_counter()
    base = ExperimentConfig()
    res = {p: [] for p in PRESET_ORDER}
    res["+A+B+C/feature"] = []
    for seed in SEEDS:
        for preset in PRESET_ORDER:
            cfg = base.with_preset(preset).with_seed(seed)
            splits = pipeline.build_splits(cfg)
            state, _ = train(cfg.train, splits.train)
            proto = pipeline.preset_protocol(cfg)
            rep = evaluate(splits.probe, splits.gallery, state.model,
                           dataclasses.replace(cfg.eval, protocol=proto))
            res[preset].append((rep.mAP, rep.cmc[1]))
            if preset == "+A+B+C":
                feat = evaluate(splits.probe, splits.gallery, state.model,
                                dataclasses.replace(cfg.eval, protocol=Protocol.FEATURE_EUCLIDEAN))
                res["+A+B+C/feature"].append((feat.mAP, feat.cmc[1]))
    return res, time.perf_counter() - t0


def check_7():
    res, elapsed = ablation_results()
    mean = {k: np.mean(v, axis=0) for k, v in res.items()}
    m_base, m_a, m_full = mean["baseline"][0], mean["+A"][0], mean["+A+B+C"][0]
    r1_gain = mean["+A+B+C"][1] - mean["baseline"][1]
    ok = m_base <= m_a and m_a <= m_full and r1_gain >= 0.02 and elapsed < 600
    table = ", ".join(f"{k} {mean[k][0]:.3f}/{mean[k][1]:.3f}" for k in PRESET_ORDER)
    return ok, (f"mean mAP/R1 over {len(SEEDS)} seeds: {table}; baseline<=+A {m_base <= m_a}, "
                f"+A<=+A+B+C {m_a <= m_full}, R1 gain {100 * r1_gain:+.1f} pts (need >= +2.0); "
                f"{elapsed:.0f}s")


def check_8():
    res, _ = ablation_results()
    mnet = float(np.mean([m for m, _ in res["+A+B+C"]]))
    feat = float(np.mean([m for m, _ in res["+A+B+C/feature"]]))
    return mnet >= feat, f"full model mean mAP: mnet {mnet:.4f}, feature_euclidean {feat:.4f}"


# 9 -----------------------------------------------------------------------------


def check_9():
    cfg = ExperimentConfig()
    result = pipeline.run_bench(cfg, pipeline.BENCH_SIZES, n_probe=100, repeats=3)
    r2 = result["mnet_similarity_fit"]["r2"]
    ratio = result["total_ratio_at_largest"]
    ok = r2 > 0.9 and ratio <= 3.0 and cfg.data.synthetic.d_in == 32
    return ok, (f"mnet similarity R^2 {r2:.4f} over N_g {list(pipeline.BENCH_SIZES)} (need > 0.9); "
                f"mnet/feature total at N_g={result['largest_gallery']}: {ratio:.2f}x (need <= 3)")


# 10 ----------------------------------------------------------------------------


def check_10(tmp_dir: Path):
    cfg = ExperimentConfig().with_seed(1)
    train_cfg = cfg.train.replace(epochs=6, dp_activation_epoch=3, lr_decay_epochs=(2, 5))
    splits = pipeline.build_splits(cfg)
    a, _ = train(train_cfg, splits.train)
    b, _ = train(train_cfg, splits.train)
    same = encode_state(a) == encode_state(b)
    part, _ = train(train_cfg, splits.train, until_epoch=3)
    path = save_checkpoint(part, tmp_dir / "interrupted.gmnc")
    resumed, _ = train(train_cfg, splits.train, load_checkpoint(path))
    resume_ok = encode_state(resumed) == encode_state(a)
    return same and resume_ok, (f"repeat run bit-identical {same}; resume at epoch 3 of 6 "
                                f"(across LR decay and DP onset) bit-identical {resume_ok}")


# pytest entry points ----------------------------------------------------------------

TITLES = {
    1: "gradient correctness", 2: "metric oracle equivalence", 3: "pair-space algebra",
    4: "DP contract", 5: "similarity", 6: "domain gap (instance vs pair space)",
    7: "ablation direction", 8: "mnet vs feature protocol", 9: "evaluation scaling",
    10: "determinism and resume",
}


def _run(number, *args):
    ok, detail = globals()[f"check_{number}"](*args)
    _record(number, TITLES[number], ok, detail)
    assert ok, detail


def test_criterion_1_gradients():
    _run(1)


def test_criterion_2_metric_oracle():
    _run(2)


def test_criterion_3_pair_space():
    _run(3)


def test_criterion_4_dp_contract():
    _run(4)


def test_criterion_5_similarity():
    _run(5)


def test_criterion_6_domain_gap():
    _run(6)


@pytest.mark.slow
def test_criterion_7_ablation_direction():
    _run(7)


@pytest.mark.slow
def test_criterion_8_mnet_vs_feature():
    _run(8)


def test_criterion_9_scaling():
    _run(9)


def test_criterion_10_determinism(tmp_path):
    _run(10, tmp_path)


if __name__ == "__main__":
    import tempfile

    results = []
    for n in TITLES:
        args = (Path(tempfile.mkdtemp()),) if n == 10 else ()
        ok, detail = globals()[f"check_{n}"](*args)
        results.append(_record(n, TITLES[n], ok, detail))
    print(f"{sum(results)}/{len(results)} criteria pass")
    sys.exit(0 if all(results) else 1)
