import json

import numpy as np
import pytest

from promptlab import prompting, tensor as T
from promptlab.layers import make_toy_cnn, make_toy_vit
from promptlab.prompting import (Adam, PromptSpec, SGD, TrainConfig,
                                 bilinear_resize, build_adaptation, count_params,
                                 frame_mask, resize_concat_template, train)
from promptlab.tensor import Tape, Tensor


def tiny_dataset(rng, n=32, shape=(1, 8, 8), classes=2):
    x = rng.normal(size=(n,) + shape)
    y = rng.integers(0, classes, size=n)
    return x, y


@pytest.fixture(scope="module")
def cnn():
    return make_toy_cnn(np.random.default_rng(0)).freeze()


@pytest.fixture(scope="module")
def vit():
    return make_toy_vit(np.random.default_rng(1)).freeze()


class TestSpecValidation:
    def test_vp_requires_site0(self):
        with pytest.raises(ValueError):
            PromptSpec(method="VP_additive", site="site_2")

    def test_normtune_takes_no_site(self):
        with pytest.raises(ValueError):
            PromptSpec(method="NormTune", site="site_1")

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            PromptSpec(method="LoRA")

    def test_shared_spatial_needs_cnn_activations(self, vit):
        spec = PromptSpec(method="AP", site="site_1", shape_mode="shared_spatial")
        with pytest.raises(T.ShapeError):
            build_adaptation(vit, spec, (8, 8))


class TestParamCounts:
    def test_linear_probe_is_head_only(self, cnn):
        n = count_params(cnn, PromptSpec(method="LinearProbe"), (1, 8, 8))
        assert n == 8 * 2 + 2

    def test_ap_full_token_site(self, vit):
        spec = PromptSpec(method="AP", site="site_1", train_head=False)
        assert count_params(vit, spec, (8, 8)) == 8 * 8

    def test_ap_full_plus_head(self, vit):
        spec = PromptSpec(method="AP", site="site_1", train_head=True)
        assert count_params(vit, spec, (8, 8)) == 8 * 8 + 8 * 2 + 2

    def test_vp_on_3x32x32_input_is_3072(self):
        model = make_toy_cnn(np.random.default_rng(2), in_ch=3, image=32).freeze()
        spec = PromptSpec(method="VP_additive", train_head=False)
        assert count_params(model, spec, (3, 32, 32)) == 3072

    def test_normtune_is_twice_the_norm_widths(self, cnn, vit):
        for model in (cnn, vit):
            spec = PromptSpec(method="NormTune", train_head=False)
            x_shape = (1, 8, 8) if model.arch == "cnn" else (8, 8)
            assert (count_params(model, spec, x_shape)
                    == 2 * sum(model.norm_widths()))

    def test_ap_shared_spatial_is_channel_count(self, cnn):
        spec = PromptSpec(method="AP", site="site_2", shape_mode="shared_spatial",
                          train_head=False)
        assert count_params(cnn, spec, (1, 8, 8)) == 8

    def test_ap_shared_token_is_dim_count(self, vit):
        spec = PromptSpec(method="AP", site="site_2", shape_mode="shared_token",
                          train_head=False)
        assert count_params(vit, spec, (8, 8)) == 8

    def test_ordering_at_matched_scale(self, cnn):
        x = (1, 8, 8)
        probe = count_params(cnn, PromptSpec(method="LinearProbe"), x)
        shared = count_params(cnn, PromptSpec(
            method="AP", site="site_2", shape_mode="shared_spatial"), x)
        vp = count_params(cnn, PromptSpec(method="VP_additive"), x)
        ap0 = count_params(cnn, PromptSpec(method="AP", site="site_0"), x)
        full = cnn.n_params()
        assert probe < shared < vp == ap0 < full


class TestResizeConcat:
    def test_zero_border_is_pure_resize(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 1, 4, 4))
        out = resize_concat_template(Tensor(x), Tensor(np.zeros(0)), (4, 4), (4, 4))
        assert np.max(np.abs(out.data - x)) < 1e-12

    def test_frame_element_count(self):
        assert int(frame_mask((6, 6), (4, 4)).sum()) == 20

    def test_wrong_delta_count_rejected(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        with pytest.raises(T.ShapeError):
            resize_concat_template(x, Tensor(np.zeros(7)), (6, 6), (4, 4))

    def test_border_holds_delta_and_center_holds_resize(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 1, 4, 4))
        delta = rng.normal(size=20)
        out = resize_concat_template(Tensor(x), Tensor(delta), (6, 6), (4, 4)).data
        mask = frame_mask((6, 6), (4, 4))
        assert np.array_equal(out[0, 0][mask], delta)
        assert np.max(np.abs(out[0, 0][~mask].reshape(4, 4)
                             - bilinear_resize(x, (4, 4))[0, 0])) < 1e-12

    def test_gradient_reaches_only_delta(self):
        rng = np.random.default_rng(5)
        model = make_toy_cnn(rng).freeze()
        spec = PromptSpec(method="VP_resize_concat", resize_inner=(6, 6))
        adaptation = build_adaptation(model, spec, (1, 8, 8))
        x = rng.normal(size=(2, 1, 8, 8))
        with Tape() as tape:
            out = adaptation.forward(x)
            loss = T.reduce_sum(out * out)
            tape.backward(loss)
        assert adaptation.delta.grad is not None
        assert all(p.grad is None for p in model.all_params().values())


class TestOptimizers:
    def test_sgd_single_step(self):
        p = Tensor(np.array(1.0), requires_grad=True)
        with Tape() as tape:
            loss = p * p
            tape.backward(loss)
        SGD([p], lr=0.1).step()
        assert abs(p.data - 0.8) < 1e-15

    def test_adam_first_step_magnitude_is_lr(self):
        for g0 in (1e-6, 1.0, 1e6):
            p = Tensor(np.array(5.0), requires_grad=True)
            p.grad = np.array(g0)
            Adam([p], lr=0.01).step()
            step = abs(5.0 - p.data)
            assert abs(step - 0.01) / 0.01 < 0.02  # eps shaves tiny-gradient steps

    def test_adam_converges_on_quadratic(self):
        p = Tensor(np.array(3.0), requires_grad=True)
        opt = Adam([p], lr=0.05)
        for _ in range(500):
            with Tape() as tape:
                loss = p * p
                tape.backward(loss)
            opt.step()
            opt.zero_grad()
        assert abs(p.data) < 1e-3


class TestTrainLoop:
    def _adaptation(self, cnn, rng):
        spec = PromptSpec(method="AP", site="site_2")
        return build_adaptation(cnn, spec, (1, 8, 8))

    def test_zero_lr_keeps_params_and_accuracy(self, cnn):
        rng = np.random.default_rng(6)
        x, y = tiny_dataset(rng)
        adaptation = self._adaptation(cnn, rng)
        before = {k: v.data.copy() for k, v in adaptation.trainables.items()}
        base_acc = prompting.accuracy(adaptation, x, y, "ce")
        cfg = TrainConfig(learning_rate=0.0, epochs=2, batch_size=8, seed=0)
        rec = train(adaptation, (x, y), (x, y), cfg)
        for k, v in adaptation.trainables.items():
            assert v.data.tobytes() == before[k].tobytes()
        assert rec.final_train_acc == base_acc

    def test_same_seed_bitwise_identical_trajectories(self, cnn):
        rng = np.random.default_rng(7)
        x, y = tiny_dataset(rng)
        cfg = TrainConfig(learning_rate=0.01, epochs=2, batch_size=8, seed=3)
        rec1 = train(self._adaptation(cnn, rng), (x, y), (x, y), cfg)
        rec2 = train(self._adaptation(cnn, rng), (x, y), (x, y), cfg)
        assert rec1.losses == rec2.losses

    def test_vp_equals_site0_ap_exactly(self, cnn):
        rng = np.random.default_rng(8)
        x, y = tiny_dataset(rng, n=48)
        cfg = TrainConfig(learning_rate=0.02, epochs=3, batch_size=16, seed=5)
        rec_vp = train(build_adaptation(cnn, PromptSpec(method="VP_additive"),
                                        (1, 8, 8)), (x, y), (x, y), cfg)
        rec_ap = train(build_adaptation(cnn, PromptSpec(method="AP", site="site_0"),
                                        (1, 8, 8)), (x, y), (x, y), cfg)
        diffs = np.abs(np.array(rec_vp.losses) - np.array(rec_ap.losses))
        assert diffs.max() <= 1e-12

    def test_frozen_params_bitwise_unchanged_every_method(self, cnn):
        rng = np.random.default_rng(9)
        x, y = tiny_dataset(rng)
        cfg = TrainConfig(learning_rate=0.05, epochs=1, batch_size=8, seed=1)
        for spec in (PromptSpec(method="AP", site="site_3"),
                     PromptSpec(method="VP_additive"),
                     PromptSpec(method="NormTune"),
                     PromptSpec(method="LinearProbe"),
                     PromptSpec(method="VP_resize_concat", resize_inner=(6, 6))):
            frozen_before = {k: v.data.copy() for k, v in cnn.all_params().items()}
            train(build_adaptation(cnn, spec, (1, 8, 8)), (x, y), (x, y), cfg)
            for k, v in cnn.all_params().items():
                assert v.data.tobytes() == frozen_before[k].tobytes(), (spec.method, k)

    def test_divergence_flagged_not_raised(self, vit):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(16, 8, 8)) * 50
        y = rng.integers(0, 2, size=16)
        cfg = TrainConfig(learning_rate=1e6, epochs=4, batch_size=8, seed=2,
                          optimizer="sgd")
        rec = train(build_adaptation(vit, PromptSpec(method="AP", site="site_0"),
                                     (8, 8)), (x, y), (x, y), cfg)
        assert rec.diverged

    def test_record_json_roundtrip(self, cnn):
        rng = np.random.default_rng(11)
        x, y = tiny_dataset(rng)
        cfg = TrainConfig(learning_rate=0.01, epochs=1, batch_size=8, seed=4)
        rec = train(self._adaptation(cnn, rng), (x, y), (x, y), cfg)
        doc = json.loads(rec.to_json())
        assert doc["seed"] == 4 and len(doc["losses"]) == rec.steps

    def test_head_scaling_keeps_predictions(self, cnn):
        rng = np.random.default_rng(12)
        x, _ = tiny_dataset(rng, n=16)
        adaptation = self._adaptation(cnn, rng)
        preds = prompting.predict(adaptation, x, "ce")
        adaptation.trainables["head.w"].data *= 7.0
        adaptation.trainables["head.b"].data *= 7.0
        assert np.array_equal(prompting.predict(adaptation, x, "ce"), preds)

    def test_deep_site_populates_no_early_gradients(self, cnn):
        rng = np.random.default_rng(13)
        x, y = tiny_dataset(rng, n=8)
        spec = PromptSpec(method="AP", site=cnn.hook_sites[-1], train_head=False)
        adaptation = build_adaptation(cnn, spec, (1, 8, 8))
        with Tape() as tape:
            out = adaptation.forward(x)
            loss = prompting.cross_entropy(out, y)
            tape.backward(loss)
        assert adaptation.delta.grad is not None
        assert all(p.grad is None for p in cnn.all_params().values())

    def test_empty_dataset_rejected(self, cnn):
        adaptation = self._adaptation(cnn, np.random.default_rng(14))
        cfg = TrainConfig(epochs=1, batch_size=4, seed=0)
        with pytest.raises(ValueError):
            train(adaptation, (np.zeros((0, 1, 8, 8)), np.zeros(0, dtype=int)),
                  (np.zeros((0, 1, 8, 8)), np.zeros(0, dtype=int)), cfg)


class TestNormTune:
    def test_clones_start_at_pretrained_values(self, cnn):
        adaptation = build_adaptation(cnn, PromptSpec(method="NormTune"), (1, 8, 8))
        for (i, name), clone in adaptation._overrides.items():
            assert np.array_equal(clone.data, cnn.blocks[i].params[name].data)

    def test_zero_epochs_equals_baseline(self, cnn):
        rng = np.random.default_rng(15)
        x, y = tiny_dataset(rng)
        base = cnn.forward(Tensor(x)).data
        adaptation = build_adaptation(cnn, PromptSpec(method="NormTune"), (1, 8, 8))
        assert np.array_equal(adaptation.forward(x).data, base)
