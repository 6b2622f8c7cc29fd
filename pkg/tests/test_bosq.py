import json
import math

import numpy as np
import pytest

from conftest import make_graph
from sparseq.bosq import (
    EXHAUSTIVE_LIMIT, BilevelConfig, exhaustive_oracle, exhaustive_ranking, run_baseline, run_bosq,
    score_dissimilarity, score_entropy,
)
from sparseq.explainer import Explainer, FileBackend, PersistentCache, SyntheticBackend
from sparseq.nnkernel import TrainConfig, accuracy, gcn_forward, train_inner
from sparseq.selector import top_k_mask
from sparseq.tagcore import gen_planted_dataset, normalize_adjacency

FAST = dict(hidden_dim=16, max_inner_steps=60, patience=20)


def cfg(seed=0, **kw):
    train = TrainConfig(seed=seed, **{**FAST, **kw.pop("train", {})})
    return BilevelConfig(seed=seed, train=train, **kw)


@pytest.fixture(scope="module")
def small():
    return gen_planted_dataset(30, 4, 3, 4, 5.0, 1)


def test_one_step_bilevel_equals_random(small):
    g, clean, _ = small
    a = run_bosq(g, Explainer(FileBackend(clean)), cfg(3, k=4, outer_steps=1))
    b = run_baseline(g, Explainer(FileBackend(clean)), cfg(3, k=4), "random")
    assert a.selected == b.selected
    assert a.metric_value == b.metric_value and a.val_loss == b.val_loss
    assert a.config_hash == b.config_hash


def test_budget_and_warm_cache(small, tmp_path):
    g, clean, _ = small
    cache_path = tmp_path / "aug_cache.jsonl"
    c = cfg(0, k=5, outer_steps=3)
    ex = Explainer(SyntheticBackend(clean), cache=PersistentCache(cache_path, g.name))
    r = run_bosq(g, ex, c)
    assert 5 <= r.oracle_calls <= 3 * 5
    assert sum(t["new_oracle_calls"] for t in r.trace[:-1]) == r.oracle_calls
    assert all(t["new_oracle_calls"] <= 5 for t in r.trace[:-1])
    warm = Explainer(SyntheticBackend(clean), cache=PersistentCache(cache_path, g.name))
    warm.query(range(g.n_nodes))
    r2 = run_bosq(g, Explainer(SyntheticBackend(clean), cache=PersistentCache(cache_path, g.name)), c)
    assert r2.oracle_calls == 0


def test_deterministic_run_json(small):
    g, clean, _ = small
    runs = [run_bosq(g, Explainer(FileBackend(clean)), cfg(2, k=4)).to_json() for _ in range(2)]
    for r in runs:
        r.pop("timings")
    assert json.dumps(runs[0], sort_keys=True) == json.dumps(runs[1], sort_keys=True)


def test_run_json_layout(small, tmp_path):
    g, clean, _ = small
    r = run_bosq(g, Explainer(FileBackend(clean)), cfg(0, k=3, debug_dir=str(tmp_path / "dbg")))
    r.save(tmp_path / "run.json")
    js = json.loads((tmp_path / "run.json").read_text())
    assert {"strategy", "seed", "selected", "oracle_calls", "metric", "timings", "trace"} <= set(js)
    assert set(js["timings"]) == {"select", "oracle", "train", "hypergrad", "total"}
    assert js["metric"]["kind"] == "accuracy" and len(js["selected"]) == 3
    assert js["trace"][-1]["step"] == "final_retrain" and len(js["trace"]) == 4
    dump = json.loads((tmp_path / "dbg" / "hypergrad_001.json").read_text())
    assert len(dump["dLv_dlambda"]) == g.n_nodes
    assert r.final_lambda.shape == (g.n_nodes,)


def test_strategies_share_config_hash(small):
    g, clean, _ = small
    hashes = {run_bosq(g, Explainer(FileBackend(clean)), cfg(1, k=3, strategy=s)).config_hash
              for s in ("bilevel", "random", "dissimilarity", "entropy")}
    assert len(hashes) == 1


def test_random_with_all_nodes_equals_aug_training(small):
    g, clean, _ = small
    c = cfg(0, k=g.n_nodes)
    r = run_baseline(g, Explainer(FileBackend(clean)), c, "random")
    a = normalize_adjacency(g)
    w = train_inner(clean, a, g, c.train).w_star
    assert r.selected == list(range(g.n_nodes))
    assert r.metric_value == accuracy(gcn_forward(clean, a, w), g, g.test_mask)


def test_dissimilarity_constant_features_ties_by_id():
    x = np.ones((6, 2))
    g = make_graph(6, [(0, 1), (1, 2), (3, 4)], x, splits=([1, 1, 1, 0, 0, 0], [0, 0, 0, 1, 1, 0], [0, 0, 0, 0, 0, 1]))
    assert not score_dissimilarity(x, g).any()
    r = run_baseline(g, Explainer(FileBackend(np.zeros((6, 2), np.float32))), cfg(0, k=2), "dissimilarity")
    assert r.selected == [0, 1]


def test_dissimilarity_examples():
    x = np.array([[1, 0], [0, 1], [1, 0], [-1, 0], [0, 0], [2, 0]], dtype=np.float64)
    # 0 ~ 1 (orthogonal), 2 ~ 3 (antiparallel), 5 ~ 0 (parallel), 4 is zero-norm
    g = make_graph(6, [(2, 3), (0, 1), (5, 0), (4, 1)], x)
    s = score_dissimilarity(x, g)
    nb0 = (x[1] + x[5]) / 2
    assert s[0] == pytest.approx(1 - nb0 @ x[0] / np.linalg.norm(nb0))
    assert s[2] == pytest.approx(2.0)
    assert s[3] == pytest.approx(2.0)
    assert s[4] == 0.0
    assert s[5] == pytest.approx(0.0)
    g2 = make_graph(2, [(0, 1)], [[1, 0], [0, 1]])
    np.testing.assert_allclose(score_dissimilarity(g2.features_base, g2), [1.0, 1.0])


def test_entropy_examples():
    assert score_entropy(np.zeros((1, 5)))[0] == pytest.approx(1.0)
    assert score_entropy(np.array([[1e4, 0.0, 0.0]]))[0] == 0.0
    assert score_entropy(np.log([[0.75, 0.25]]))[0] == pytest.approx(0.8113, abs=1e-4)
    with pytest.raises(ValueError):
        score_entropy(np.zeros((3, 1)))


def test_confident_entropy_selects_lowest_ids():
    scores = score_entropy(np.tile([[1e3, -1e3, 0.0]], (8, 1)))
    assert not scores.any()
    assert np.flatnonzero(top_k_mask(scores, 3)).tolist() == [0, 1, 2]


def test_entropy_requires_classification():
    g = make_graph(5, [(0, 1)], np.ones((5, 2)), labels=np.arange(5.0), task="regression")
    with pytest.raises(ValueError, match="classification"):
        run_baseline(g, Explainer(FileBackend(np.ones((5, 2), np.float32))), cfg(0, k=1), "entropy")


def test_non_test_candidates(small):
    g, clean, _ = small
    for strategy in ("bilevel", "random", "dissimilarity"):
        r = run_bosq(g, Explainer(FileBackend(clean)), cfg(4, k=5, strategy=strategy, candidates="non_test"))
        assert not g.test_mask[r.selected].any()


def test_lambda_adam_option(small):
    g, clean, _ = small
    r = run_bosq(g, Explainer(FileBackend(clean)), cfg(0, k=3, lambda_optimizer="adam", lambda_lr=0.1))
    known = {i for t in r.trace[:-1] for i in t["selected"]}
    moved = np.abs(r.final_lambda) > 0
    assert moved.any() and set(r.selected) <= known


def test_config_validation():
    with pytest.raises(ValueError):
        BilevelConfig(outer_steps=0)
    with pytest.raises(ValueError):
        BilevelConfig(strategy="greedy")
    with pytest.raises(ValueError):
        BilevelConfig(candidates="train")


def test_exhaustive_full_subset(small):
    g, clean, _ = small
    g6, c6, _ = gen_planted_dataset(6, 3, 2, 1, 3.0, 0)
    best, loss = exhaustive_oracle(g6, Explainer(FileBackend(c6)), cfg(0, k=6))
    assert best == tuple(range(6)) and np.isfinite(loss)


def test_exhaustive_limits(small):
    g, clean, _ = small
    assert math.comb(30, 15) > EXHAUSTIVE_LIMIT
    with pytest.raises(ValueError, match="exhaustive limit"):
        exhaustive_oracle(g, Explainer(FileBackend(clean)), cfg(0, k=15))
    with pytest.raises(ValueError, match="cached"):
        exhaustive_oracle(g, Explainer(SyntheticBackend(clean)), cfg(0, k=1))


def test_exhaustive_ranking_parallel_matches_serial():
    g, clean, _ = gen_planted_dataset(8, 3, 2, 2, 4.0, 2)
    serial = exhaustive_ranking(g, Explainer(FileBackend(clean)), cfg(0, k=2))
    par = exhaustive_ranking(g, Explainer(FileBackend(clean)), cfg(0, k=2, workers=3))
    assert serial == par and len(serial) == 28
    losses = [v for _, v in serial]
    assert losses == sorted(losses)
    r = run_bosq(g, Explainer(FileBackend(clean)), cfg(0, k=2, strategy="exhaustive"))
    assert tuple(r.selected) == serial[0][0]


def test_monotone_information_in_k():
    # mean test accuracy non-decreasing over K in {0, c/2, c, 2c} within one standard error
    corrupt, seeds = 6, range(10)
    acc = {k: [] for k in (0, 3, 6, 12)}
    for seed in seeds:
        g, clean, _ = gen_planted_dataset(60, 8, 3, corrupt, 6.0, seed)
        a = normalize_adjacency(g)
        tc = TrainConfig(seed=seed)
        base = train_inner(g.features_base, a, g, tc).w_star
        acc[0].append(accuracy(gcn_forward(g.features_base, a, base), g, g.test_mask))
        for k in (3, 6, 12):
            c = BilevelConfig(k=k, seed=seed, train=tc)
            acc[k].append(run_bosq(g, Explainer(FileBackend(clean)), c).metric_value)
    ks = sorted(acc)
    for lo, hi in zip(ks, ks[1:]):
        se = np.sqrt(np.var(acc[lo], ddof=1) / len(seeds) + np.var(acc[hi], ddof=1) / len(seeds))
        assert np.mean(acc[hi]) >= np.mean(acc[lo]) - se, (lo, hi, np.mean(acc[lo]), np.mean(acc[hi]))
