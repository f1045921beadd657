import itertools
import warnings
from fractions import Fraction

import numpy as np
import pytest
import torch

from arn.core import ConfigError, Domain, LabeledSample, ModelConfig
from arn.evaluator import (
    EmbeddingSet,
    average_precision,
    brute_force_oracle,
    chance_map,
    cmc,
    embed,
    evaluate,
    expected_random_ap,
    mean_average_precision,
    metrics,
    rank,
    shared_private_cosine,
)
from arn.network import build_model


def es(vectors, ids, cams=None):
    return EmbeddingSet(np.array(vectors, dtype=float), np.array(ids), None if cams is None else np.array(cams))


def random_instance(rng, max_q=10, max_g=50, d=None, ties=False):
    nq, ng = int(rng.integers(1, max_q + 1)), int(rng.integers(1, max_g + 1))
    d = d or int(rng.integers(2, 9))
    n_ids = int(rng.integers(1, 8))
    if ties:
        # a handful of distinct directions so many scores coincide exactly
        basis = rng.integers(-2, 3, size=(3, d)).astype(float)
        basis[np.all(basis == 0, axis=1)] = 1.0
        q = basis[rng.integers(0, 3, size=nq)]
        g = basis[rng.integers(0, 3, size=ng)]
    else:
        q, g = rng.normal(size=(nq, d)), rng.normal(size=(ng, d))
    queries = es(q, rng.integers(0, n_ids, size=nq), rng.integers(1, 4, size=nq))
    gallery = es(g, rng.integers(0, n_ids, size=ng), rng.integers(1, 4, size=ng))
    return queries, gallery


def quiet_rank(q, g, protocol):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return rank(q.l2_normalized(), g.l2_normalized(), protocol)


class TestRankExamples:
    def test_three_item_order(self):
        q = es([[1, 0]], [7], [1]).l2_normalized()
        g = es([[1, 0], [0, 1], [0.6, 0.8]], [7, 3, 4], [2, 1, 1]).l2_normalized()
        r = rank(q, g, "cross_camera")
        assert r.order[0].tolist() == [0, 2, 1]
        assert r.similarities[0] == pytest.approx([1.0, 0.6, 0.0], abs=1e-15)
        assert cmc(r, 3).tolist() == [1.0, 1.0, 1.0]

    def test_match_at_rank_two(self):
        q = es([[0.6, 0.8]], [1], [1]).l2_normalized()
        g = es([[1, 0], [0, 1]], [1, 2], [2, 2]).l2_normalized()
        r = rank(q, g, "cross_camera")
        assert r.matches[0].tolist() == [False, True]
        assert cmc(r, 2).tolist() == [0.0, 1.0]
        assert mean_average_precision(r) == 0.5

    def test_cross_camera_excludes_same_id_same_camera(self):
        q = es([[1, 0]], [5], [1]).l2_normalized()
        g = es([[1, 0], [0.8, 0.6], [0, 1]], [5, 5, 9], [1, 2, 1]).l2_normalized()
        assert rank(q, g, "cross_camera").order[0].tolist() == [1, 2]
        assert rank(q, g, "plain").order[0].tolist() == [0, 1, 2]

    def test_ties_broken_by_gallery_index(self):
        q = es([[1, 1]], [0], [1]).l2_normalized()
        g = es([[1, 1]] * 5, [3, 0, 3, 0, 1], [2] * 5).l2_normalized()
        assert rank(q, g, "plain").order[0].tolist() == [0, 1, 2, 3, 4]

    def test_query_without_match_is_excluded(self):
        q = es([[1, 0], [0, 1]], [1, 2], [1, 1]).l2_normalized()
        g = es([[1, 0], [0, 1]], [1, 2], [2, 1]).l2_normalized()
        with pytest.warns(RuntimeWarning, match="1 queries"):
            r = rank(q, g, "cross_camera")
        assert r.scorable.tolist() == [True, False]
        assert cmc(r, 1).tolist() == [1.0]
        assert mean_average_precision(r) == 1.0
        assert metrics(r)["num_queries"] == 1

    def test_cameraless_cross_camera_falls_back(self):
        q = es([[1, 0]], [1]).l2_normalized()
        g = es([[1, 0], [0, 1]], [1, 2]).l2_normalized()
        with pytest.warns(RuntimeWarning, match="falls back"):
            r = rank(q, g, "cross_camera")
        assert r.protocol == "plain"

    def test_rejects_unnormalized(self):
        with pytest.raises(ConfigError):
            rank(es([[2, 0]], [1]), es([[1, 0]], [1]).l2_normalized(), "plain")

    def test_unknown_protocol(self):
        x = es([[1, 0]], [1]).l2_normalized()
        with pytest.raises(ConfigError):
            rank(x, x, "market")

    @pytest.mark.parametrize("seed", range(100))
    def test_euclidean_order_equals_cosine_order(self, seed):
        rng = np.random.default_rng(seed)
        q, g = random_instance(rng, max_q=3, max_g=30)
        q, g = q.l2_normalized(), g.l2_normalized()
        r = quiet_rank(q, g, "plain")
        for qi in range(len(q.vectors)):
            dist = np.linalg.norm(g.vectors - q.vectors[qi], axis=1)
            by_dist = np.argsort(dist, kind="stable")
            # equal order except inside floating-point ties
            assert np.allclose(np.sort(dist), dist[r.order[qi]], atol=1e-12)
            assert np.allclose(dist[by_dist], dist[r.order[qi]], atol=1e-12)


class TestAveragePrecision:
    def test_single_hit_first(self):
        assert average_precision(np.array([True, False])) == 1.0

    def test_single_hit_second_of_two(self):
        assert average_precision(np.array([False, True])) == 0.5

    def test_two_hits_at_one_and_three(self):
        assert average_precision(np.array([True, False, True])) == pytest.approx(5 / 6, abs=1e-15)

    @pytest.mark.parametrize("r", range(1, 8))
    def test_single_relevant_is_reciprocal_rank(self, r):
        m = np.zeros(10, dtype=bool)
        m[r - 1] = True
        assert average_precision(m) == pytest.approx(1 / r, abs=1e-15)

    @pytest.mark.parametrize("n,r", [(1, 1), (2, 1), (3, 2), (4, 1), (5, 3), (6, 2), (6, 6)])
    def test_expected_random_ap_matches_enumeration(self, n, r):
        # exact average over every placement of the r relevant items among n slots
        total, count = Fraction(0), 0
        for hits in itertools.combinations(range(n), r):
            total += sum(Fraction(k + 1, p + 1) for k, p in enumerate(hits)) / r
            count += 1
        assert expected_random_ap(r, n) == pytest.approx(float(total / count), abs=1e-12)

    def test_random_scores_reach_chance(self):
        rng = np.random.default_rng(0)
        ids = np.repeat(np.arange(20), 9)
        cams = np.tile([1, 2, 1, 2, 1, 2, 1, 2, 1], 20)
        maps, chances = [], []
        for _ in range(200):
            q = es(rng.normal(size=(20, 16)), np.arange(20), np.ones(20, dtype=int))
            g = es(rng.normal(size=(180, 16)), ids, cams)
            r = rank(q.l2_normalized(), g.l2_normalized(), "cross_camera")
            maps.append(mean_average_precision(r))
            chances.append(chance_map(r))
        assert np.mean(maps) == pytest.approx(np.mean(chances), abs=0.005)


class TestOracleAgreement:
    @pytest.mark.parametrize("protocol", ["plain", "cross_camera"])
    def test_random_instances(self, protocol):
        rng = np.random.default_rng(17)
        for _ in range(40):
            q, g = random_instance(rng)
            r = quiet_rank(q, g, protocol)
            o_cmc, o_map = brute_force_oracle(q, g, protocol)
            assert np.abs(cmc(r, 20) - o_cmc).max() <= 1e-12
            assert abs(mean_average_precision(r) - o_map) <= 1e-12

    @pytest.mark.parametrize("protocol", ["plain", "cross_camera"])
    def test_tie_heavy_instances(self, protocol):
        rng = np.random.default_rng(23)
        for _ in range(30):
            q, g = random_instance(rng, ties=True)
            r = quiet_rank(q, g, protocol)
            o_cmc, o_map = brute_force_oracle(q, g, protocol)
            assert np.abs(cmc(r, 20) - o_cmc).max() <= 1e-12
            assert abs(mean_average_precision(r) - o_map) <= 1e-12

    def test_all_equal_embeddings(self):
        q = es(np.ones((3, 4)), [0, 1, 2], [1, 1, 1])
        g = es(np.ones((9, 4)), [2, 1, 0] * 3, [2] * 9)
        r = quiet_rank(q, g, "cross_camera")
        assert all(o.tolist() == list(range(9)) for o in r.order)
        o_cmc, o_map = brute_force_oracle(q, g, "cross_camera")
        assert np.array_equal(cmc(r, 20), o_cmc)
        assert mean_average_precision(r) == pytest.approx(o_map, abs=1e-12)

    def test_no_scorable_query(self):
        q = es([[1, 0]], [1], [1])
        g = es([[1, 0]], [1], [1])
        r = quiet_rank(q, g, "cross_camera")
        o_cmc, o_map = brute_force_oracle(q, g, "cross_camera")
        assert np.array_equal(cmc(r, 20), o_cmc) and mean_average_precision(r) == o_map == 0.0


class TestInvariances:
    def test_cmc_monotone(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            curve = cmc(quiet_rank(*random_instance(rng), "plain"), 20)
            assert np.all(np.diff(curve) >= 0) and curve[-1] <= 1.0

    def test_scale_and_rotation(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            q, g = random_instance(rng, d=6)
            base = metrics(quiet_rank(q, g, "cross_camera"))
            s = float(rng.uniform(0.01, 100))
            scaled = metrics(quiet_rank(es(q.vectors * s, q.identities, q.cameras), es(g.vectors * s, g.identities, g.cameras), "cross_camera"))
            rot, _ = np.linalg.qr(rng.normal(size=(6, 6)))
            rotated = metrics(
                quiet_rank(es(q.vectors @ rot, q.identities, q.cameras), es(g.vectors @ rot, g.identities, g.cameras), "cross_camera")
            )
            assert scaled == base
            assert rotated == base


def _samples(n, seed=0):
    rng = np.random.default_rng(seed)
    return [
        LabeledSample(rng.uniform(size=(32, 32, 3)), identity=i % 3, camera=1 + i % 2, domain=Domain.TARGET)
        for i in range(n)
    ]


class TestEmbed:
    def test_normalized_rows(self):
        model = build_model(ModelConfig(), seed=0)
        e = embed(_samples(6), model)
        assert e.vectors.shape == (6, 64) and e.normalized
        assert np.allclose(np.linalg.norm(e.vectors, axis=1), 1.0, atol=1e-6)

    def test_same_sample_twice(self):
        s = _samples(1)
        e = embed(s + s, build_model(ModelConfig(), seed=0))
        assert np.array_equal(e.vectors[0], e.vectors[1])

    def test_dropout_off_and_mode_restored(self):
        model = build_model(ModelConfig(), seed=0)
        model.train()
        a = embed(_samples(3), model)
        assert model.training
        assert np.array_equal(a.vectors, embed(_samples(3), model).vectors)

    def test_uses_only_backbone_and_shared_encoder(self):
        model = build_model(ModelConfig(), seed=0)
        calls = {name: 0 for name in ("E_I", "E_C", "E_S", "E_T", "D_C", "C_S")}

        def counter(name):
            def hook(*_):
                calls[name] += 1

            return hook

        for name in calls:
            getattr(model, name).register_forward_hook(counter(name))
        embed(_samples(4), model)
        assert calls["E_I"] == 1 and calls["E_C"] == 1
        assert calls["E_S"] == calls["E_T"] == calls["D_C"] == calls["C_S"] == 0

    def test_evaluate_ranges(self):
        model = build_model(ModelConfig(), seed=0)
        samples = _samples(12)
        m, curve = evaluate(model, samples[:4], samples[4:], "cross_camera")
        assert 0.0 <= m["rank1"] <= 1.0 and 0.0 <= m["mAP"] <= 1.0
        assert len(curve) == 20

    def test_shared_private_cosine_range(self):
        model = build_model(ModelConfig(), seed=0)
        value = shared_private_cosine(model, _samples(5), Domain.TARGET)
        assert 0.0 <= value <= 1.0
        with pytest.raises(ConfigError):
            shared_private_cosine(build_model(ModelConfig(), use_private=False), _samples(2), Domain.TARGET)
