import math

import numpy as np
import pytest

from gmn.data import SyntheticSpec, generate_synthetic
from gmn.errors import ConfigError, DataError, EvaluationError
from gmn.evaluator import (EvalConfig, Protocol, domain_gap_diagnostic, evaluate,
                           linear_fit_r2, retrieval_metrics, score_matrix, timing_compare)
from gmn.trainer import TrainConfig, build_model

from conftest import make_dataset


def oracle_metrics(scores, pid, gid, pcam, gcam, ranks, filt=True):
    """Pure-Python CMC / mAP: sort by (-score, index), drop same-camera matches."""
    firsts, aps = [], []
    for i, row in enumerate(scores):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        if filt:
            order = [j for j in order if not (gid[j] == pid[i] and gcam[j] == pcam[i])]
        hits = [k for k, j in enumerate(order) if gid[j] == pid[i]]
        if not hits:
            continue
        firsts.append(hits[0])
        aps.append(math.fsum((n + 1) / (k + 1) for n, k in enumerate(hits)) / len(hits))
    cmc = {r: sum(1 for f in firsts if f < r) / len(firsts) for r in ranks}
    return math.fsum(aps) / len(aps), cmc


def random_instance(rng):
    n_p, n_g = rng.integers(1, 21), rng.integers(5, 21)
    ids = rng.integers(0, 4, n_g)
    pid = rng.choice(ids, n_p)
    # coarse scores so ties are frequent
    scores = rng.integers(0, 6, (n_p, n_g)).astype(float)
    return scores, pid, ids, rng.integers(0, 3, n_p), rng.integers(0, 3, n_g)


def test_brute_force_oracle_exact():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 100:
        scores, pid, gid, pcam, gcam = random_instance(rng)
        try:
            oracle = oracle_metrics(scores.tolist(), pid.tolist(), gid.tolist(), pcam.tolist(),
                                    gcam.tolist(), (1, 5))
        except ZeroDivisionError:
            with pytest.raises(EvaluationError):
                retrieval_metrics(scores, pid, gid, pcam, gcam, (1, 5))
            continue
        rep = retrieval_metrics(scores, pid, gid, pcam, gcam, (1, 5))
        assert rep.mAP == oracle[0]
        assert rep.cmc == oracle[1]
        checked += 1


def test_duplicate_gallery_is_perfect():
    rng = np.random.default_rng(1)
    emb = rng.standard_normal((10, 4))
    probe = make_dataset(emb, np.arange(10), cams=np.zeros(10, int))
    gallery = make_dataset(emb, np.arange(10), cams=np.ones(10, int))
    rep = evaluate(probe, gallery, None, EvalConfig(protocol="feature_euclidean"))
    assert rep.mAP == 1.0 and rep.cmc[1] == 1.0


def test_ap_half_hand_case():
    # the only positive ranks second
    rep = retrieval_metrics([[0.9, 0.5, 0.1]], [1], [0, 1, 2], [0], [1, 1, 1], ranks=(1, 2))
    assert rep.mAP == 0.5
    assert rep.cmc == {1: 0.0, 2: 1.0}


def test_ties_keep_gallery_order():
    rep = retrieval_metrics([[1.0, 1.0]], [7], [3, 7], [0], [1, 1], ranks=(1,))
    assert rep.cmc[1] == 0.0 and rep.mAP == 0.5


def test_cross_camera_filter_and_skips():
    scores = [[0.9, 0.8], [0.2, 0.1]]
    rep = retrieval_metrics(scores, [1, 2], [1, 1], [0, 0], [0, 1], ranks=(1,))
    assert rep.num_valid_probes == 1 and rep.num_skipped_probes == 1
    assert rep.cmc[1] == 1.0
    with pytest.raises(EvaluationError):
        retrieval_metrics([[0.5]], [1], [1], [0], [0], ranks=(1,))
    with pytest.raises(ConfigError):
        retrieval_metrics([[0.5]], [1], [1], None, None, ranks=(1,))
    with pytest.raises(ConfigError):
        retrieval_metrics([[0.5]], [1], [1], [0], [1], ranks=(5,))


def test_cmc_monotone(rng):
    scores, pid, gid, pcam, gcam = random_instance(rng)
    gid[:] = pid[0]
    gcam[:] = pcam[0] + 1
    rep = retrieval_metrics(scores[:1], pid[:1], gid, pcam[:1], gcam, (1, 2, 3))
    assert np.all(np.diff(rep.cmc_curve) >= 0) and rep.cmc_curve[-1] == 1.0


def test_score_matrix_protocols(rng):
    p, g = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
    euc = score_matrix(None, p, g, EvalConfig(protocol="feature_euclidean"))
    np.testing.assert_allclose(-euc, np.linalg.norm(p[:, None] - g[None], axis=2), atol=1e-12)
    cos = score_matrix(None, p, g, EvalConfig(protocol="feature_cosine"))
    assert np.all(np.abs(cos) <= 1 + 1e-12)
    with pytest.raises(ConfigError):
        score_matrix(None, p, g, EvalConfig(protocol="mnet"))
    with pytest.raises(ConfigError):
        Protocol.parse("hamming")
    with pytest.raises(ConfigError):
        EvalConfig(ranks=(5, 1))


def test_timing_compare_rows(rng):
    ds = make_dataset(rng.standard_normal((20, 6)), np.repeat(np.arange(5), 4))
    model = build_model(TrainConfig(encoder_widths=(8, 8)), 6, ds.identities, rng)
    rows = timing_compare(ds, ds, model, ["feature_euclidean", "mnet"], repeats=2)
    assert [r.protocol for r in rows] == ["feature_euclidean", "mnet"]
    assert all(r.total_seconds > 0 and r.n_gallery == 20 for r in rows)


def test_linear_fit():
    a, b, r2 = linear_fit_r2([1, 2, 3, 4], [3, 5, 7, 9])
    assert (a, b) == pytest.approx((1.0, 2.0)) and r2 == pytest.approx(1.0)


def test_domain_gap_separates_shifted_domains():
    ds = generate_synthetic(SyntheticSpec())
    rep = domain_gap_diagnostic(ds, 200, seed=0)
    assert rep.instance_space_accuracy > rep.pair_space_accuracy
    assert rep.instance_space_accuracy > 0.9


def test_domain_gap_at_chance_without_shift():
    # many single-record identities, so no finite set of identity centres to memorise
    spec = SyntheticSpec(domain_shift_scale=0.0, identities_per_domain=400, records_per_identity=1)
    rep = domain_gap_diagnostic(generate_synthetic(spec), 200, seed=0)
    assert abs(rep.instance_space_accuracy - rep.chance_level) < 0.1
    assert abs(rep.pair_space_accuracy - rep.chance_level) < 0.1
    assert rep.instance_train_accuracy >= rep.instance_space_accuracy


def test_domain_gap_errors():
    one = make_dataset(np.zeros((4, 2)), [0, 0, 1, 1])
    with pytest.raises(DataError):
        domain_gap_diagnostic(one)
    two = make_dataset(np.zeros((3, 2)), [0, 1, 2], domains=np.array([0, 0, 1]))
    with pytest.raises(DataError):
        domain_gap_diagnostic(two)
