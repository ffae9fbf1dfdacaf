"""Conditional deep-convolutional Wasserstein GAN with gradient penalty on distance maps."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import nn_core as nn
from . import serialization
from ._validation import MAP_SIZE, N_CLASSES, check_labels, check_maps
from .exceptions import BadLabel, EmptyDataset, NumericalError, ShapeMismatch, ValidationError

LATENT_DIM = 100


def generator_layers(latent_dim: int = LATENT_DIM) -> list:
    """Spatial sizes 1 -> 5 -> 8 -> 8 -> 15 -> 17 -> 30 -> 28."""
    return [
        nn.conv_transpose(2 * latent_dim, 256, 5), nn.batch_norm(256), nn.relu(),
        nn.interpolate((8, 8)), nn.batch_norm(256), nn.relu(),
        nn.conv(256, 128, 3, padding=1), nn.batch_norm(128), nn.relu(),
        nn.interpolate((15, 15)), nn.batch_norm(128), nn.relu(),
        nn.conv_transpose(128, 128, 3), nn.batch_norm(128), nn.relu(),
        nn.interpolate((30, 30)), nn.batch_norm(128), nn.relu(),
        nn.conv(128, 1, 3),
        nn.tanh(),
    ]


def critic_layers() -> list:
    """Spatial sizes 28 -> 14 -> 7 -> 3 -> 1 on the 2-channel (image, label) input."""
    return [
        nn.conv(2, 32, 4, stride=2, padding=1), nn.instance_norm(32), nn.leaky_relu(0.2),
        nn.conv(32, 128, 4, stride=2, padding=1), nn.instance_norm(128), nn.leaky_relu(0.2),
        nn.conv(128, 256, 5, stride=2, padding=1), nn.instance_norm(256), nn.leaky_relu(0.2),
        nn.conv(256, 1, 3, bias=True),
    ]


@dataclass(frozen=True)
class GanConfig:
    latent_dim: int = LATENT_DIM
    n_classes: int = N_CLASSES
    gp_weight: float = 1.0
    critic_iters: int = 10
    lr: float = 3e-5
    beta1: float = 0.0
    beta2: float = 0.9
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    init_std: float = 0.02
    max_iterations: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.gp_weight < 0:
            raise ValidationError("gp_weight must be >= 0")
        if self.critic_iters < 1:
            raise ValidationError("critic_iters must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")


def _penalty_term(critic_specs, critic_params, critic_embed, real, fake, labels, eps):
    """Batch mean of ``(||grad_xhat D(xhat | y)||_2 - 1)^2``; gradient taken on the image channel."""
    xhat = (eps * real + (1 - eps) * fake.detach()).detach().requires_grad_(True)
    label_map = nn.apply([nn.embedding(*critic_embed.tensors[0].shape)], critic_embed, labels)
    inp = torch.cat([xhat, label_map.view(-1, 1, MAP_SIZE, MAP_SIZE)], dim=1)
    nn.check_second_order(critic_specs)
    out = nn.apply(critic_specs, critic_params, inp)
    (grad,) = torch.autograd.grad(out.sum(), xhat, create_graph=True)
    norm = torch.sqrt(grad.flatten(1).pow(2).sum(dim=1) + 1e-12)
    return ((norm - 1) ** 2).mean()


class ConditionalWGAN(BaseEstimator):
    """cDC-WGAN-GP over 28x28 distance maps.

    Images in [0, 1] are mapped to (-1, 1) for the critic; generator output
    (tanh) is mapped back with ``(v + 1) / 2``.  One training epoch visits
    every minibatch once; each minibatch gets ``critic_iters`` critic updates
    (fresh noise each time) followed by one generator update.
    """

    def __init__(self, latent_dim=LATENT_DIM, n_classes=N_CLASSES, gp_weight=1.0, critic_iters=10, lr=3e-5,
                 beta1=0.0, beta2=0.9, batch_size=32, epochs=50, seed=0, init_std=0.02,
                 max_iterations=None, dtype="float32"):
        self.latent_dim = latent_dim
        self.n_classes = n_classes
        self.gp_weight = gp_weight
        self.critic_iters = critic_iters
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.init_std = init_std
        self.max_iterations = max_iterations
        self.dtype = dtype

    @property
    def config(self) -> GanConfig:
        return GanConfig(**{f.name: getattr(self, f.name) for f in fields(GanConfig)})

    @classmethod
    def from_config(cls, cfg: GanConfig) -> "ConditionalWGAN":
        return cls(**asdict(cfg))

    @property
    def _torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def initialize(self):
        """Fresh parameters from ``seed`` (called by ``fit``)."""
        cfg = self.config
        gen = torch.Generator().manual_seed(int(cfg.seed))
        dt = self._torch_dtype
        self.generator_specs_ = generator_layers(cfg.latent_dim)
        self.critic_specs_ = critic_layers()
        self.generator_params_ = nn.NetworkParams.init(self.generator_specs_, gen, cfg.init_std, dt)
        self.critic_params_ = nn.NetworkParams.init(self.critic_specs_, gen, cfg.init_std, dt)
        self.generator_embed_ = nn.NetworkParams.init([nn.embedding(cfg.n_classes, cfg.latent_dim)], gen, 1.0, dt)
        self.critic_embed_ = nn.NetworkParams.init([nn.embedding(cfg.n_classes, MAP_SIZE * MAP_SIZE)], gen, 1.0, dt)
        self.log_ = []
        return self

    # -- tensor-level helpers -------------------------------------------------
    def _labels_t(self, labels):
        lab = np.asarray(labels)
        if lab.ndim != 1 or (lab.size and (lab.min() < 0 or lab.max() >= self.n_classes)):
            raise BadLabel(f"labels must be a 1-D array of ids in 0..{self.n_classes - 1}")
        return torch.as_tensor(lab.astype(np.int64))

    def _generate_t(self, labels_t, z, mode):
        emb = nn.apply([nn.embedding(self.n_classes, self.latent_dim)], self.generator_embed_, labels_t)
        inp = torch.cat([z, emb.view(-1, self.latent_dim, 1, 1)], dim=1)
        return nn.apply(self.generator_specs_, self.generator_params_, inp, mode)

    def _critic_t(self, images_pm1, labels_t):
        emb = nn.apply([nn.embedding(self.n_classes, MAP_SIZE * MAP_SIZE)], self.critic_embed_, labels_t)
        inp = torch.cat([images_pm1, emb.view(-1, 1, MAP_SIZE, MAP_SIZE)], dim=1)
        return nn.apply(self.critic_specs_, self.critic_params_, inp)

    # -- public API -----------------------------------------------------------
    def generate(self, labels, z, mode: str = "eval") -> np.ndarray:
        """Images in [0, 1], shape (n, 1, 28, 28), for the given labels and latents (n, 100, 1, 1)."""
        check_is_fitted(self, "generator_params_")
        lab = self._labels_t(labels)
        z = torch.as_tensor(z, dtype=self._torch_dtype)
        if z.dim() == 2:
            z = z[:, :, None, None]
        if tuple(z.shape[1:]) != (self.latent_dim, 1, 1) or len(z) != len(lab):
            raise ShapeMismatch(f"z must have shape ({len(lab)}, {self.latent_dim}, 1, 1), got {tuple(z.shape)}")
        with torch.no_grad():
            out = self._generate_t(lab, z, mode)
        return ((out + 1) / 2).clamp(0, 1).double().numpy()

    def critic_score(self, images, labels) -> np.ndarray:
        """Critic output (n, 1, 1, 1) for images in [0, 1]."""
        check_is_fitted(self, "critic_params_")
        maps = check_maps(images)
        lab = self._labels_t(labels)
        if len(lab) != len(maps):
            raise ShapeMismatch("one label per image required")
        x = torch.as_tensor(maps[:, None] * 2 - 1, dtype=self._torch_dtype)
        with torch.no_grad():
            return self._critic_t(x, lab).double().numpy()

    def sample(self, class_id: int, n: int, seed) -> np.ndarray:
        """``n`` conditional samples (n, 28, 28) in [0, 1], deterministic per seed."""
        if class_id not in range(self.n_classes):
            raise BadLabel(f"class id must be in 0..{self.n_classes - 1}")
        if n < 1:
            raise ValidationError("n must be >= 1")
        gen = torch.Generator().manual_seed(int(seed))
        z = torch.randn((n, self.latent_dim, 1, 1), generator=gen, dtype=self._torch_dtype)
        return self.generate(np.full(n, class_id), z)[:, 0]

    def fit(self, X, y, callback=None):
        """Alternating critic / generator optimization; ``callback(model, iteration)`` after each generator step."""
        cfg = self.config
        maps = check_maps(X, allow_empty=True)
        if len(maps) == 0:
            raise EmptyDataset("GAN training set is empty")
        labels = check_labels(y, len(maps), cfg.n_classes)
        self.initialize()
        dt = self._torch_dtype
        gen = torch.Generator().manual_seed(int(cfg.seed) + 1)
        rng = np.random.default_rng(cfg.seed)
        real_all = torch.as_tensor(maps[:, None] * 2 - 1, dtype=dt)
        labels_all = torch.as_tensor(labels)
        g_state, c_state = nn.AdamState(), nn.AdamState()
        g_params = self.generator_params_.tensors + self.generator_embed_.tensors
        c_params = self.critic_params_.tensors + self.critic_embed_.tensors
        g_bundle = nn.NetworkParams(g_params, [(0, "")] * len(g_params))
        c_bundle = nn.NetworkParams(c_params, [(0, "")] * len(c_params))
        for p in g_params + c_params:
            p.requires_grad_(True)
        iteration = 0
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(maps))
            for start in range(0, len(order), cfg.batch_size):
                idx = torch.as_tensor(order[start:start + cfg.batch_size])
                real, lab = real_all[idx], labels_all[idx]
                b = len(idx)
                for _ in range(cfg.critic_iters):
                    z = torch.randn((b, cfg.latent_dim, 1, 1), generator=gen, dtype=dt)
                    eps = torch.rand((b, 1, 1, 1), generator=gen, dtype=dt)
                    with torch.no_grad():
                        fake = self._generate_t(lab, z, "train")
                    d_real = self._critic_t(real, lab).mean()
                    d_fake = self._critic_t(fake, lab).mean()
                    gp = _penalty_term(self.critic_specs_, self.critic_params_, self.critic_embed_,
                                       real, fake, lab, eps)
                    loss_c = d_fake - d_real + cfg.gp_weight * gp
                    grads = torch.autograd.grad(loss_c, c_params)
                    nn.adam_step(c_bundle, grads, cfg.lr, cfg.beta1, cfg.beta2, state=c_state)
                z = torch.randn((b, cfg.latent_dim, 1, 1), generator=gen, dtype=dt)
                loss_g = -self._critic_t(self._generate_t(lab, z, "train"), lab).mean()
                grads = torch.autograd.grad(loss_g, g_params)
                nn.adam_step(g_bundle, grads, cfg.lr, cfg.beta1, cfg.beta2, state=g_state)
                iteration += 1
                entry = {
                    "iteration": iteration,
                    "epoch": epoch + 1,
                    "critic_loss": float(loss_c.detach()),
                    "wasserstein": float((d_real - d_fake).detach()),
                    "penalty": float(gp.detach()),
                    "generator_loss": float(loss_g.detach()),
                }
                if not all(np.isfinite(v) for v in entry.values()):
                    raise NumericalError(f"non-finite GAN loss at iteration {iteration}")
                self.log_.append(entry)
                if callback is not None:
                    callback(self, iteration)
                if cfg.max_iterations is not None and iteration >= cfg.max_iterations:
                    break
            if cfg.max_iterations is not None and iteration >= cfg.max_iterations:
                break
        for p in g_params + c_params:
            p.requires_grad_(False)
        self.n_iterations_ = iteration
        return self

    # -- persistence ----------------------------------------------------------
    def save(self, path) -> None:
        check_is_fitted(self, "generator_params_")
        meta = {
            "config": asdict(self.config),
            "generator": nn.network_manifest(self.generator_specs_, self.generator_params_),
            "critic": nn.network_manifest(self.critic_specs_, self.critic_params_),
            "generator_embed": nn.network_manifest([nn.embedding(self.n_classes, self.latent_dim)],
                                                   self.generator_embed_),
            "critic_embed": nn.network_manifest([nn.embedding(self.n_classes, MAP_SIZE * MAP_SIZE)],
                                                self.critic_embed_),
        }
        arrays = {}
        for name in ("generator", "critic", "generator_embed", "critic_embed"):
            params = getattr(self, "generator_params_" if name == "generator" else
                             "critic_params_" if name == "critic" else name + "_")
            arrays.update(nn.network_arrays(name, params))
        serialization.save(path, "gan", meta, arrays)

    @classmethod
    def load(cls, path) -> "ConditionalWGAN":
        _, meta, arrays = serialization.load(path, "gan")
        model = cls.from_config(GanConfig(**meta["config"]))
        model.generator_specs_, model.generator_params_ = nn.network_from_arrays("generator", meta["generator"], arrays)
        model.critic_specs_, model.critic_params_ = nn.network_from_arrays("critic", meta["critic"], arrays)
        _, model.generator_embed_ = nn.network_from_arrays("generator_embed", meta["generator_embed"], arrays)
        _, model.critic_embed_ = nn.network_from_arrays("critic_embed", meta["critic_embed"], arrays)
        model.log_ = []
        return model

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "epoch", "critic_loss", "wasserstein", "penalty", "generator_loss"])
            for e in self.log_:
                w.writerow([e["iteration"], e["epoch"], repr(e["critic_loss"]), repr(e["wasserstein"]),
                            repr(e["penalty"]), repr(e["generator_loss"])])


def gradient_penalty(model: ConditionalWGAN, real, fake, labels, gp_weight: float, rng=None):
    """``gp_weight * mean((||grad D(xhat)|| - 1)^2)`` and its gradients w.r.t. critic + critic-embedding params.

    ``real``/``fake`` are images in [0, 1]; ``rng`` is a seed or torch.Generator for the per-sample epsilon.
    Returns ``(value, gradients)``.
    """
    check_is_fitted(model, "critic_params_")
    if gp_weight < 0:
        raise ValidationError("gp_weight must be >= 0")
    dt = model._torch_dtype
    r = torch.as_tensor(check_maps(real)[:, None] * 2 - 1, dtype=dt)
    f = torch.as_tensor(check_maps(fake)[:, None] * 2 - 1, dtype=dt)
    if r.shape != f.shape:
        raise ShapeMismatch("real and fake batches differ in shape")
    gen = rng if isinstance(rng, torch.Generator) else torch.Generator().manual_seed(int(rng or 0))
    eps = torch.rand((len(r), 1, 1, 1), generator=gen, dtype=dt)
    lab = model._labels_t(labels)
    params = model.critic_params_.tensors + model.critic_embed_.tensors
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(True)
    try:
        value = gp_weight * _penalty_term(model.critic_specs_, model.critic_params_, model.critic_embed_, r, f, lab, eps)
        grads = torch.autograd.grad(value, params, allow_unused=True)
    finally:
        for p, fl in zip(params, flags):
            p.requires_grad_(fl)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    return float(value.detach()), grads


def train_gan(maps, labels, cfg: GanConfig = GanConfig(), callback=None) -> ConditionalWGAN:
    return ConditionalWGAN.from_config(cfg).fit(maps, labels, callback=callback)


def sample_gan(model: ConditionalWGAN, class_id: int, n: int, seed) -> np.ndarray:
    return model.sample(class_id, n, seed)
