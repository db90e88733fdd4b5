import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptlab import analysis
from promptlab.analysis import (EquivalencePreconditionError,
                                UndefinedSimilarityError, avg_attention_distance,
                                linear_cka, make_equal_stat_token_batch,
                                normtune_from_ap, normtune_from_ap_conv,
                                normtune_from_ap_tokens)
from promptlab.layers import make_toy_cnn, make_toy_vit
from promptlab.prompting import PromptSpec, TrainConfig
from promptlab.tensor import ShapeError


class TestAttentionDistance:
    def test_self_attending_is_zero(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=(3, 5))
        q /= np.linalg.norm(q, axis=0, keepdims=True)  # equal-norm queries
        assert avg_attention_distance((q, q)) == 0.0

    def test_cyclic_shift_under_absolute_distance(self):
        # keys shifted by one position with sharp distinct maxima
        scores = np.zeros((4, 4))
        for i in range(4):
            scores[(i - 1) % 4, i] = 5.0
        assert avg_attention_distance(scores) == (1 + 1 + 1 + 3) / 4

    def test_circular_convention(self):
        scores = np.zeros((4, 4))
        for i in range(4):
            scores[(i - 1) % 4, i] = 5.0
        assert avg_attention_distance(scores, distance="circular") == 1.0

    def test_score_shift_invariance(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=(6, 6))
        shifted = scores + 13.7
        assert (avg_attention_distance(scores)
                == avg_attention_distance(shifted))

    def test_nonsquare_rejected(self):
        with pytest.raises(ShapeError):
            avg_attention_distance(np.zeros((3, 4)))

    def test_nan_rejected(self):
        s = np.zeros((2, 2))
        s[0, 0] = np.nan
        with pytest.raises(ValueError):
            avg_attention_distance(s)

    def test_tied_maxima_resolve_to_nearest(self):
        # all keys tie: every query attends to itself, distance 0
        assert avg_attention_distance(np.ones((5, 5))) == 0.0


class TestLinearCKA:
    def test_self_similarity_is_one(self):
        x = np.random.default_rng(2).normal(size=(50, 6))
        assert abs(linear_cka(x, x) - 1.0) < 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(40, 5)), rng.normal(size=(40, 7))
        assert abs(linear_cka(x, y) - linear_cka(y, x)) < 1e-12

    def test_orthogonal_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(60, 8))
        y = rng.normal(size=(60, 8))
        q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        assert abs(linear_cka(x, y @ q) - linear_cka(x, y)) < 1e-9
        assert abs(linear_cka(x, x @ q) - 1.0) < 1e-9

    def test_scale_invariance(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(30, 4))
        y = rng.normal(size=(30, 4))
        assert abs(linear_cka(x, 3.7 * y) - linear_cka(x, y)) < 1e-9

    def test_independent_baseline_below_03(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(200, 8))
        y = rng.normal(size=(200, 8))
        assert linear_cka(x, y) < 0.3

    def test_zero_variance_rejected(self):
        with pytest.raises(UndefinedSimilarityError):
            linear_cka(np.ones((10, 3)), np.random.default_rng(7).normal(size=(10, 3)))

    def test_single_sample_rejected(self):
        with pytest.raises(ValueError):
            linear_cka(np.ones((1, 3)), np.ones((1, 3)))

    @given(st.integers(0, 10 ** 6))
    @settings(max_examples=30, deadline=None)
    def test_range_property(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(20, 3))
        y = rng.normal(size=(20, 5))
        v = linear_cka(x, y)
        assert -1e-9 <= v <= 1 + 1e-9


class TestEquivalenceTokens:
    def test_constructed_batch_matches_below_tol(self):
        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(50):
            B, D, P = int(rng.integers(2, 6)), 2 * int(rng.integers(2, 7)), int(rng.integers(2, 9))
            z = make_equal_stat_token_batch(B, D, P, rng, mu=float(rng.normal()),
                                            spread=float(rng.uniform(0.5, 2.0)))
            delta = rng.normal(size=D)
            gamma, beta, disc = normtune_from_ap_tokens(z, delta)
            worst = max(worst, disc)
            assert np.allclose(beta, delta + z.mean(axis=1).flat[0], atol=1e-12)
        assert worst < 1e-9

    def test_zero_prompt_is_exact(self):
        rng = np.random.default_rng(9)
        z = make_equal_stat_token_batch(3, 8, 5, rng, mu=0.4, spread=1.3)
        gamma, beta, disc = normtune_from_ap_tokens(z, np.zeros(8))
        assert disc == 0.0
        assert np.allclose(beta, z.mean(axis=1).flat[0], atol=1e-15)

    def test_token_shared_full_prompt_accepted(self):
        rng = np.random.default_rng(10)
        z = make_equal_stat_token_batch(2, 6, 4, rng)
        delta = np.tile(rng.normal(size=(6, 1)), (1, 4))
        _, _, disc = normtune_from_ap_tokens(z, delta)
        assert disc < 1e-9

    def test_nonuniform_prompt_rejected(self):
        rng = np.random.default_rng(11)
        z = make_equal_stat_token_batch(2, 6, 4, rng)
        delta = rng.normal(size=(6, 4))
        with pytest.raises(EquivalencePreconditionError, match="shared across tokens"):
            normtune_from_ap_tokens(z, delta)

    def test_unequal_means_rejected(self):
        rng = np.random.default_rng(12)
        z = rng.normal(size=(3, 6, 4))
        with pytest.raises(EquivalencePreconditionError, match="means"):
            normtune_from_ap_tokens(z, np.zeros(6))


class TestEquivalenceConv:
    def test_fifty_random_draws_below_tol(self):
        rng = np.random.default_rng(13)
        worst = 0.0
        for i in range(50):
            B, C, O, H = (int(rng.integers(2, 6)), int(rng.integers(1, 4)),
                          int(rng.integers(1, 5)), int(rng.integers(4, 9)))
            kernel, padding = ((1, "zero") if i % 2 == 0 else (3, "circular"))
            z = rng.normal(size=(B, C, H, H))
            w = rng.normal(size=(O, C, kernel, kernel))
            delta = rng.normal(size=C)
            _, _, disc = normtune_from_ap_conv(z, w, delta, padding=padding)
            worst = max(worst, disc)
        assert worst < 1e-9

    def test_zero_prompt_is_exact(self):
        rng = np.random.default_rng(14)
        z = rng.normal(size=(3, 2, 5, 5))
        w = rng.normal(size=(4, 2, 3, 3))
        _, _, disc = normtune_from_ap_conv(z, w, np.zeros(2), padding="circular")
        assert disc == 0.0

    def test_spatially_uniform_full_prompt_accepted(self):
        rng = np.random.default_rng(15)
        z = rng.normal(size=(2, 2, 4, 4))
        w = rng.normal(size=(3, 2, 1, 1))
        delta = np.tile(rng.normal(size=(2, 1, 1)), (1, 4, 4))
        _, _, disc = normtune_from_ap_conv(z, w, delta, padding="zero")
        assert disc < 1e-9

    def test_nonuniform_prompt_rejected(self):
        rng = np.random.default_rng(16)
        z = rng.normal(size=(2, 2, 4, 4))
        w = rng.normal(size=(3, 2, 1, 1))
        with pytest.raises(EquivalencePreconditionError, match="spatially uniform"):
            normtune_from_ap_conv(z, w, rng.normal(size=(2, 4, 4)))

    def test_zero_padded_3x3_rejected(self):
        rng = np.random.default_rng(17)
        z = rng.normal(size=(2, 2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        with pytest.raises(EquivalencePreconditionError, match="circular"):
            normtune_from_ap_conv(z, w, np.zeros(2), padding="zero")

    def test_beta_assignment_formula(self):
        rng = np.random.default_rng(18)
        z = rng.normal(size=(2, 2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        delta = rng.normal(size=2)
        from promptlab.layers import conv2d
        from promptlab.tensor import Tensor
        gamma, beta, _ = normtune_from_ap_conv(z, w, delta, padding="circular")
        base = conv2d(Tensor(z), Tensor(w), padding="circular").data
        mu = base.mean(axis=(0, 2, 3))
        w_delta = np.einsum("ockl,c->o", w, delta)
        assert np.allclose(beta, w_delta + mu, atol=1e-12)
        assert np.allclose(gamma, np.sqrt(base.var(axis=(0, 2, 3)) + 1e-8), atol=1e-15)


class TestEquivalenceModelDispatch:
    def test_cnn_site_dispatch(self):
        rng = np.random.default_rng(19)
        model = make_toy_cnn(rng).freeze()
        batch = rng.normal(size=(4, 1, 8, 8))
        delta = rng.normal(size=8)
        _, _, disc = normtune_from_ap(model, "site_1", delta, batch)
        assert disc < 1e-9

    def test_vit_site_needs_valid_batch(self):
        rng = np.random.default_rng(20)
        model = make_toy_vit(rng).freeze()
        batch = make_equal_stat_token_batch(3, 8, 8, rng)
        delta = rng.normal(size=8)
        _, _, disc = normtune_from_ap(model, "site_0", delta, batch)
        assert disc < 1e-9

    def test_pool_site_rejected(self):
        rng = np.random.default_rng(21)
        model = make_toy_cnn(rng).freeze()
        with pytest.raises(EquivalencePreconditionError):
            normtune_from_ap(model, model.hook_sites[-1], np.zeros(8),
                             rng.normal(size=(2, 1, 8, 8)))


class TestLayerSweepMachinery:
    def test_zero_epoch_sweep_equal_baseline_and_all_rows_present(self):
        rng = np.random.default_rng(22)
        model = make_toy_cnn(rng).freeze()
        x = rng.normal(size=(24, 1, 8, 8))
        y = rng.integers(0, 2, size=24)
        cfg = TrainConfig(epochs=0, batch_size=8, seed=0)
        runs, summary = analysis.layer_sweep(model, (x, y), (x, y), cfg,
                                             lr_grid=(0.01,))
        accs = {r["final_test_acc"] for r in runs}
        assert len(accs) == 1  # every method/site equals the frozen baseline
        sites = [r["site"] for r in summary if r["method"] == "AP"]
        assert sites == model.hook_sites
        methods = {r["method"] for r in summary}
        assert methods == {"AP", "VP_additive", "NormTune"}
        assert sum(r.get("is_argmax_site", 0) for r in summary) == 1

    def test_divergent_runs_recorded_not_raised(self):
        rng = np.random.default_rng(23)
        model = make_toy_vit(rng).freeze()
        x = rng.normal(size=(16, 8, 8)) * 100
        y = rng.integers(0, 2, size=16)
        cfg = TrainConfig(epochs=3, batch_size=8, seed=1, optimizer="sgd")
        runs, summary = analysis.layer_sweep(model, (x, y), (x, y), cfg,
                                             lr_grid=(1e9,), methods=("AP",))
        assert any(r["diverged"] for r in runs)
        assert len([r for r in summary if r["method"] == "AP"]) == len(model.hook_sites)
