import math

import numpy as np
import pytest

from protofair.model import (
    ALL_PROTOTYPES,
    FilterSpec,
    ModelParams,
    affinity,
    batch_scores,
    cosine_embed,
    init_params,
    load_checkpoint,
    save_checkpoint,
    topk_filter,
)


def ones_model():
    one = np.ones((1, 1))
    return ModelParams("protomf", one, one, one.copy(), one.copy(),
                       one.copy(), one.copy())


class TestCosineEmbed:
    def test_self_similarity(self):
        sim = cosine_embed(np.array([2.0, 3.0]), np.array([[4.0, 6.0]]))
        assert sim.values[0] == pytest.approx(1.0)
        assert sim.mask == frozenset({0})

    def test_orthogonal(self):
        sim = cosine_embed(np.array([1.0, 0.0]), np.array([[0.0, 5.0]]))
        assert sim.values[0] == 0.0

    def test_45_degrees(self):
        sim = cosine_embed(np.array([1.0, 0.0]), np.array([[1.0, 1.0]]))
        assert sim.values[0] == pytest.approx(1 / math.sqrt(2))

    def test_scale_invariance(self, rng):
        x = rng.normal(size=6)
        protos = rng.normal(size=(4, 6))
        base = cosine_embed(x, protos).values
        for c in (1e-6, 0.5, 3.0, 1e6):
            np.testing.assert_allclose(
                cosine_embed(c * x, protos).values, base, atol=1e-12
            )

    def test_degenerate_vectors_give_zero(self):
        protos = np.array([[1.0, 0.0], [0.0, 0.0]])
        sim = cosine_embed(np.zeros(2), protos)
        assert sim.values.tolist() == [0.0, 0.0]
        sim = cosine_embed(np.array([1.0, 0.0]), protos)
        assert sim.values.tolist() == [1.0, 0.0]

    def test_values_bounded(self, rng):
        x = rng.normal(size=5)
        protos = rng.normal(size=(8, 5))
        values = cosine_embed(x, protos).values
        assert np.all(np.abs(values) <= 1.0 + 1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cosine_embed(np.ones(3), np.ones((2, 4)))


class TestTopkFilter:
    def test_top2(self):
        sim = cosine_embed(np.ones(1), np.ones((3, 1)))
        sim.values[:] = [0.9, 0.1, 0.5]
        out = topk_filter(sim, 2)
        assert out.values.tolist() == [0.9, 0.0, 0.5]
        assert out.mask == frozenset({0, 2})

    def test_tie_breaks_to_smaller_index(self):
        sim = cosine_embed(np.ones(1), np.ones((3, 1)))
        sim.values[:] = [0.5, 0.5, 0.1]
        out = topk_filter(sim, 1)
        assert out.mask == frozenset({0})
        assert out.values.tolist() == [0.5, 0.0, 0.0]

    def test_all_sentinel_is_identity(self, rng):
        sim = cosine_embed(rng.normal(size=4), rng.normal(size=(5, 4)))
        out = topk_filter(sim, ALL_PROTOTYPES)
        assert out is sim

    def test_retained_count_and_maximality(self, rng):
        for _ in range(50):
            length = int(rng.integers(1, 9))
            k = int(rng.integers(1, length + 1))
            sim = cosine_embed(rng.normal(size=3), rng.normal(size=(length, 3)))
            out = topk_filter(sim, k)
            assert len(out.mask) == min(k, length)
            kept = [sim.values[i] for i in out.mask]
            dropped = [v for i, v in enumerate(sim.values) if i not in out.mask]
            if dropped and kept:
                assert max(dropped) <= min(kept)
            for i in out.mask:
                assert out.values[i] == sim.values[i]
            for i in set(range(length)) - out.mask:
                assert out.values[i] == 0.0

    def test_invalid_k(self):
        sim = cosine_embed(np.ones(2), np.ones((3, 2)))
        with pytest.raises(ValueError):
            topk_filter(sim, 0)


class TestAffinity:
    def test_mf_dot_product(self):
        params = ModelParams(
            "mf", np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]])
        )
        assert affinity(0, 0, params) == 11.0

    def test_zero_maps_give_zero_scores(self, rng):
        params = init_params("protomf", 4, 5, 3, 2, 2, rng)
        params.user_map[:] = 0.0
        params.item_map[:] = 0.0
        for u in range(4):
            for t in range(5):
                assert affinity(u, t, params) == 0.0

    def test_all_ones_scalar_model(self):
        assert affinity(0, 0, ones_model()) == 2.0

    def test_index_out_of_range(self, rng):
        params = init_params("mf", 2, 3, 4, rng=rng)
        with pytest.raises(IndexError):
            affinity(2, 0, params)
        with pytest.raises(IndexError):
            affinity(0, 3, params)
        with pytest.raises(IndexError):
            batch_scores(0, [0, 5], params)

    def test_deterministic(self, rng):
        params = init_params("protomf", 3, 3, 4, 3, 3, rng)
        filt = FilterSpec(k_u=2, k_t=2)
        a = affinity(1, 2, params, filt)
        for _ in range(5):
            assert affinity(1, 2, params, filt) == a


class TestBatchScores:
    def test_single_item_list(self, rng):
        params = init_params("protomf", 3, 4, 5, 3, 3, rng)
        s = batch_scores(0, [2], params)
        assert s.shape == (1,)
        assert s[0] == affinity(0, 2, params)

    def test_empty_list(self, rng):
        params = init_params("mf", 2, 2, 2, rng=rng)
        assert batch_scores(0, [], params).shape == (0,)

    def test_matches_loop_bit_for_bit(self, rng):
        for variant, filt in [
            ("mf", FilterSpec()),
            ("protomf", FilterSpec()),
            ("protomf", FilterSpec(k_u=3, k_t=2)),
        ]:
            params = init_params(variant, 6, 120, 7, 5, 5, rng)
            items = rng.integers(0, 120, size=100).tolist()
            batch = batch_scores(2, items, params, filt)
            loop = np.array([affinity(2, t, params, filt) for t in items])
            assert np.array_equal(batch, loop)

    def test_k_equals_l_matches_all_sentinel_bitwise(self, rng):
        params = init_params("protomf", 5, 30, 6, 4, 4, rng)
        items = list(range(30))
        via_k = batch_scores(1, items, params, FilterSpec(k_u=4, k_t=4))
        via_all = batch_scores(1, items, params, FilterSpec())
        assert np.array_equal(via_k, via_all)


class TestCheckpoint:
    def test_roundtrip_scores_identical(self, rng, tmp_path):
        params = init_params("protomf", 8, 12, 5, 4, 3, rng)
        filt = FilterSpec(k_u=2, k_t=ALL_PROTOTYPES)
        path = tmp_path / "model.npz"
        save_checkpoint(params, filt, path, extra_meta={"config_hash": "abc"})
        loaded, filt2, meta = load_checkpoint(path)
        assert filt2 == filt
        assert meta["config_hash"] == "abc"
        items = list(range(12))
        for u in range(8):
            assert np.array_equal(
                batch_scores(u, items, params, filt),
                batch_scores(u, items, loaded, filt2),
            )

    def test_mf_roundtrip(self, rng, tmp_path):
        params = init_params("mf", 4, 6, 3, rng=rng)
        path = tmp_path / "mf.npz"
        save_checkpoint(params, FilterSpec(), path)
        loaded, _, meta = load_checkpoint(path)
        assert loaded.variant == "mf"
        assert loaded.user_prototypes is None
        assert np.array_equal(loaded.user_factors, params.user_factors)

    def test_version_check(self, rng, tmp_path):
        import json

        params = init_params("mf", 2, 2, 2, rng=rng)
        path = tmp_path / "bad.npz"
        meta = {"version": 999, "variant": "mf", "k_u": -1, "k_t": -1}
        np.savez(path, meta=np.array(json.dumps(meta)),
                 user_factors=params.user_factors,
                 item_factors=params.item_factors)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)


class TestFilterSpec:
    def test_validation(self):
        FilterSpec(k_u=1, k_t=5).validate(3, 5)
        FilterSpec().validate(3, 5)
        with pytest.raises(ValueError):
            FilterSpec(k_u=4, k_t=1).validate(3, 5)
        with pytest.raises(ValueError):
            FilterSpec(k_u=0, k_t=1).validate(3, 5)

    def test_identity_property(self):
        assert FilterSpec().is_identity
        assert not FilterSpec(k_u=2).is_identity
