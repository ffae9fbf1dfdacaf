import csv

import numpy as np
import pytest
import torch

from craniosynth import nn_core as nn
from craniosynth.exceptions import BadLabel, EmptyDataset, ShapeMismatch, ValidationError
from craniosynth.gan import ConditionalWGAN, GanConfig, gradient_penalty, sample_gan, train_gan
from oracles import relative_error


def toy_set(n=16):
    maps = np.concatenate([np.full((n, 28, 28), 0.3), np.full((n, 28, 28), 0.7)])
    return maps, np.repeat([0, 1], n)


def small_config(**kw):
    base = dict(batch_size=4, critic_iters=2, max_iterations=3, seed=5)
    base.update(kw)
    return GanConfig(**base)


@pytest.fixture(scope="module")
def trained():
    maps, labels = toy_set(8)
    return train_gan(maps, labels, small_config())


def swap_in_tiny_critic(model, rng):
    """Replace the critic by conv + leaky_relu + conv in float64 so finite differences stay cheap."""
    specs = [nn.conv(2, 2, 4, 2, 1, bias=True), nn.leaky_relu(0.2), nn.conv(2, 1, 14, bias=True)]
    params = nn.NetworkParams.init(specs, dtype=torch.float64)
    params.tensors = [torch.as_tensor(rng.normal(0, 0.3, size=tuple(t.shape))) for t in params.tensors]
    model.critic_specs_ = specs
    model.critic_params_ = params
    model.critic_embed_ = model.critic_embed_.to(torch.float64)
    return model


def test_defaults():
    cfg = GanConfig()
    assert (cfg.gp_weight, cfg.critic_iters, cfg.lr) == (1.0, 10, 3e-5)
    assert (cfg.latent_dim, cfg.n_classes, cfg.beta1, cfg.beta2) == (100, 4, 0.0, 0.9)
    with pytest.raises(ValidationError):
        GanConfig(gp_weight=-1)
    with pytest.raises(ValidationError):
        GanConfig(critic_iters=0)


def test_estimator_params_round_trip():
    model = ConditionalWGAN(lr=1e-4, epochs=3)
    assert model.get_params()["lr"] == 1e-4
    assert ConditionalWGAN.from_config(model.config).get_params() == model.get_params()


def test_embedding_shapes(trained):
    assert tuple(trained.generator_embed_.tensors[0].shape) == (4, 100)
    assert tuple(trained.critic_embed_.tensors[0].shape) == (4, 784)


class TestGenerate:
    def test_shape_range_determinism(self, trained):
        z = torch.randn((5, 100, 1, 1), generator=torch.Generator().manual_seed(0))
        labels = [0, 1, 2, 3, 0]
        a = trained.generate(labels, z)
        assert a.shape == (5, 1, 28, 28)
        assert a.min() >= 0.0 and a.max() <= 1.0
        assert np.array_equal(a, trained.generate(labels, z))

    def test_labels_condition_output(self, trained):
        z = torch.randn((1, 100, 1, 1), generator=torch.Generator().manual_seed(1)).repeat(2, 1, 1, 1)
        out = trained.generate([0, 1], z)
        assert np.abs(out[0] - out[1]).max() > 0

    def test_bad_inputs(self, trained):
        with pytest.raises(BadLabel):
            trained.generate([4], torch.zeros((1, 100, 1, 1)))
        with pytest.raises(ShapeMismatch):
            trained.generate([0, 1], torch.zeros((1, 100, 1, 1)))

    def test_sample(self, trained):
        s = sample_gan(trained, 2, 6, seed=9)
        assert s.shape == (6, 28, 28) and s.min() >= 0 and s.max() <= 1
        assert np.array_equal(s, sample_gan(trained, 2, 6, seed=9))
        with pytest.raises(BadLabel):
            sample_gan(trained, 4, 1, 0)
        with pytest.raises(ValidationError):
            sample_gan(trained, 0, 0, 0)


class TestCritic:
    def test_shape_and_determinism(self, trained):
        maps, labels = toy_set(2)
        a = trained.critic_score(maps, labels)
        assert a.shape == (4, 1, 1, 1)
        assert np.array_equal(a, trained.critic_score(maps, labels))

    def test_identical_batches_give_zero_loss(self, trained):
        maps, labels = toy_set(3)
        assert trained.critic_score(maps, labels).mean() - trained.critic_score(maps, labels).mean() == 0.0

    def test_label_count_mismatch(self, trained):
        maps, _ = toy_set(2)
        with pytest.raises(ShapeMismatch):
            trained.critic_score(maps, [0])

    def test_first_block_instance_norm_identity(self, trained):
        first = trained.critic_specs_[0]
        conv_params = nn.NetworkParams([trained.critic_params_.tensors[0].double()], [(0, "weight")])
        pre = nn.apply([first], conv_params, torch.as_tensor(np.random.default_rng(0).random((2, 2, 28, 28))))
        norm = [nn.instance_norm(first.out_channels, affine=False)]
        empty = nn.NetworkParams([], [])
        shifted = pre + 0.37
        assert torch.allclose(nn.apply(norm, empty, pre), nn.apply(norm, empty, shifted), atol=1e-6)


class TestPenalty:
    def test_zero_weight(self, trained):
        maps, labels = toy_set(2)
        value, grads = gradient_penalty(trained, maps, maps[::-1], labels, 0.0, rng=1)
        assert value == 0.0
        assert all(not g.any() for g in grads)

    def test_unit_gradient_linear_critic(self):
        model = ConditionalWGAN(dtype="float64").initialize()
        rng = np.random.default_rng(2)
        w = rng.normal(size=(1, 2, 28, 28))
        w[0, 0] /= np.linalg.norm(w[0, 0])
        model.critic_specs_ = [nn.conv(2, 1, 28, bias=True)]
        model.critic_params_ = nn.NetworkParams([torch.as_tensor(w), torch.zeros(1, dtype=torch.float64)],
                                                [(0, "weight"), (0, "bias")])
        real, fake = rng.random((3, 28, 28)), rng.random((3, 28, 28))
        value, _ = gradient_penalty(model, real, fake, [0, 1, 2], 1.0, rng=3)
        assert abs(value) < 1e-10

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        model = swap_in_tiny_critic(ConditionalWGAN(dtype="float64").initialize(), rng)
        real, fake = rng.random((3, 28, 28)), rng.random((3, 28, 28))
        labels = [0, 2, 3]
        _, grads = gradient_penalty(model, real, fake, labels, 1.0, rng=7)
        tensors = model.critic_params_.tensors + model.critic_embed_.tensors
        h = 1e-6
        analytic, numeric = [], []
        for k, t in enumerate(tensors):
            flat = t.view(-1)
            picks = rng.choice(flat.numel(), size=min(12, flat.numel()), replace=False)
            if k == len(tensors) - 1:
                # only rows of classes in the batch carry gradient; probe those
                picks = np.concatenate([rng.choice(784, 6, replace=False) + 784 * c for c in labels])
            for i in picks:
                orig = float(flat[i])
                vals = []
                for sign in (1, -1):
                    flat[i] = orig + sign * h
                    vals.append(gradient_penalty(model, real, fake, labels, 1.0, rng=7)[0])
                flat[i] = orig
                numeric.append((vals[0] - vals[1]) / (2 * h))
                analytic.append(float(grads[k].reshape(-1)[i]))
        assert np.linalg.norm(analytic) > 0
        assert relative_error(analytic, numeric) < 1e-4

    def test_only_image_channel_enters_norm(self):
        rng = np.random.default_rng(5)
        model = ConditionalWGAN(dtype="float64").initialize()
        w = np.zeros((1, 2, 28, 28))
        w[0, 1] = rng.normal(size=(28, 28)) * 10.0
        w[0, 0, 0, 0] = 1.0
        model.critic_specs_ = [nn.conv(2, 1, 28)]
        model.critic_params_ = nn.NetworkParams([torch.as_tensor(w)], [(0, "weight")])
        value, _ = gradient_penalty(model, rng.random((2, 28, 28)), rng.random((2, 28, 28)), [0, 1], 1.0)
        assert abs(value) < 1e-10


class TestTraining:
    def test_empty(self):
        with pytest.raises(EmptyDataset):
            train_gan(np.zeros((0, 28, 28)), np.zeros(0, int), small_config())

    def test_bad_labels(self):
        maps, _ = toy_set(2)
        with pytest.raises(BadLabel):
            train_gan(maps, [0, 1, 5, 1], small_config())

    def test_bit_identical_logs(self, trained):
        maps, labels = toy_set(8)
        again = train_gan(maps, labels, small_config())
        assert again.log_ == trained.log_
        assert all(torch.equal(a, b) for a, b in zip(again.generator_params_.tensors, trained.generator_params_.tensors))

    def test_log_contents(self, trained, tmp_path):
        assert [e["iteration"] for e in trained.log_] == [1, 2, 3]
        for e in trained.log_:
            assert all(np.isfinite(v) for v in e.values())
            assert e["critic_loss"] == pytest.approx(-e["wasserstein"] + e["penalty"], rel=1e-5, abs=1e-6)
        trained.write_log(tmp_path / "log.csv")
        rows = list(csv.reader(open(tmp_path / "log.csv")))
        assert rows[0][:5] == ["iteration", "epoch", "critic_loss", "wasserstein", "penalty"]
        assert len(rows) == 4

    def test_epoch_semantics(self):
        maps, labels = toy_set(4)
        model = train_gan(maps, labels, GanConfig(batch_size=3, critic_iters=1, epochs=2, seed=1))
        assert model.n_iterations_ == 6
        assert [e["epoch"] for e in model.log_] == [1, 1, 1, 2, 2, 2]

    def test_callback(self):
        maps, labels = toy_set(4)
        seen = []
        train_gan(maps, labels, small_config(max_iterations=2), callback=lambda m, it: seen.append(it))
        assert seen == [1, 2]

    def test_save_load(self, trained, tmp_path):
        trained.save(tmp_path / "g.bin")
        back = ConditionalWGAN.load(tmp_path / "g.bin")
        assert back.config == trained.config
        assert np.array_equal(back.sample(1, 4, 3), trained.sample(1, 4, 3))
        maps, labels = toy_set(1)
        assert np.array_equal(back.critic_score(maps, labels), trained.critic_score(maps, labels))
        back.save(tmp_path / "g2.bin")
        assert (tmp_path / "g.bin").read_bytes() == (tmp_path / "g2.bin").read_bytes()

    @pytest.mark.slow
    def test_no_nan_over_500_iterations(self):
        maps, labels = toy_set(16)
        model = train_gan(maps, labels, GanConfig(batch_size=8, max_iterations=500, epochs=10**6, seed=3))
        assert model.n_iterations_ == 500
        assert all(np.isfinite(list(e.values())).all() for e in model.log_)


@pytest.mark.slow
def test_class_means_separate_on_surrogate_maps():
    from craniosynth.surrogate import generate_dataset

    samples = generate_dataset((16, 16, 16, 16), seed=1)
    maps = np.stack([s.distance_map for s in samples])
    labels = np.array([s.label for s in samples])
    model = train_gan(maps, labels, GanConfig(batch_size=16, max_iterations=20, seed=0))
    draws = [model.sample(k, 1000, seed=k) for k in range(4)]
    means = [d.mean(axis=0) for d in draws]
    noise = max(np.sqrt(d.var(axis=0).sum() / len(d)) for d in draws)
    gap = max(np.linalg.norm(means[i] - means[j]) for i in range(4) for j in range(i))
    assert gap > 10 * noise
