"""Distance-map CNN classifier: augmentation, training with validation-F1 selection, metrics."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn_core as nn
from . import serialization
from ._validation import MAP_SIZE, N_CLASSES, check_labels, check_maps
from .exceptions import EmptyDataset, NumericalError, ValidationError

DECAY_MODES = ("lr", "l2")


@dataclass(frozen=True)
class AugmentConfig:
    pixel_noise_sigma: float = 1 / 255
    intensity_sigma: float = 5 / 255
    flip_probability: float = 0.5
    shift_sigma: float = 12.44
    shift_reference_width: int = 224

    def __post_init__(self):
        if min(self.pixel_noise_sigma, self.intensity_sigma, self.shift_sigma) < 0:
            raise ValidationError("augmentation sigmas must be >= 0")
        if not 0 <= self.flip_probability <= 1:
            raise ValidationError("flip_probability must lie in [0, 1]")
        if self.shift_reference_width < 1:
            raise ValidationError("shift_reference_width must be >= 1")

    @property
    def shift_sigma_pixels(self) -> float:
        """Shift std in 28-pixel map columns; ``shift_sigma`` is measured at ``shift_reference_width``."""
        return self.shift_sigma * MAP_SIZE / self.shift_reference_width

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, MAP_SIZE)


def augment_batch(images, cfg: AugmentConfig, rng: np.random.Generator, clip: bool = True) -> np.ndarray:
    """Per image: pixel noise, intensity offset, column flip, cyclic column shift, clamp."""
    x = check_maps(images, allow_empty=True)
    n = len(x)
    noise = rng.standard_normal(x.shape) * cfg.pixel_noise_sigma
    offset = rng.standard_normal(n) * cfg.intensity_sigma
    flip = rng.random(n) < cfg.flip_probability
    shift = np.rint(rng.standard_normal(n) * cfg.shift_sigma_pixels).astype(np.int64)
    x = x + noise + offset[:, None, None]
    x = np.where(flip[:, None, None], x[:, :, ::-1], x)
    cols = (np.arange(MAP_SIZE)[None, :] - shift[:, None]) % MAP_SIZE
    x = np.take_along_axis(x, np.broadcast_to(cols[:, None, :], x.shape), axis=2)
    return np.clip(x, 0.0, 1.0) if clip else x


def augment(image, cfg: AugmentConfig, rng: np.random.Generator, clip: bool = True) -> np.ndarray:
    return augment_batch(np.asarray(image)[None], cfg, rng, clip)[0]


@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    confusion: np.ndarray
    absent_classes: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "confusion": self.confusion.tolist(),
            "absent_classes": list(self.absent_classes),
        }


def compute_metrics(y_true, y_pred, n_classes: int = N_CLASSES) -> Metrics:
    """Confusion rows are true classes; classes absent from ``y_true`` get F1 0 and are flagged."""
    t = check_labels(y_true, None, n_classes)
    p = check_labels(y_pred, len(t), n_classes)
    if len(t) == 0:
        raise EmptyDataset("no samples to evaluate")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    tp = np.diag(cm).astype(float)
    pred_n, true_n = cm.sum(axis=0), cm.sum(axis=1)
    precision = np.divide(tp, pred_n, out=np.zeros(n_classes), where=pred_n > 0)
    recall = np.divide(tp, true_n, out=np.zeros(n_classes), where=true_n > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    absent = tuple(int(k) for k in np.flatnonzero(true_n == 0))
    return Metrics(float(tp.sum() / len(t)), float(f1.mean()), precision, recall, f1, cm, absent)


INPUT_NORMS = ("row", "global", "none")


def _input_stats(maps, how):
    """Training-set standardization; "row" scales each elevation row separately, "global" uses one mean and std."""
    if how == "row":
        mean, std = maps.mean(axis=(0, 2))[:, None], maps.std(axis=(0, 2))[:, None]
    elif how == "global":
        mean, std = np.full((1, 1), maps.mean()), np.full((1, 1), maps.std())
    elif how == "none":
        mean, std = np.zeros((1, 1)), np.ones((1, 1))
    else:
        raise ValidationError(f"input_norm must be one of {INPUT_NORMS}")
    return mean, np.where(std > 1e-12, std, 1.0)


def network_layers(n_classes: int = N_CLASSES) -> list:
    return [
        nn.conv(1, 16, 3, padding=1, bias=True), nn.leaky_relu(0.2),
        nn.conv(16, 32, 3, stride=2, padding=1, bias=True), nn.leaky_relu(0.2),
        nn.conv(32, 64, 3, stride=2, padding=1, bias=True), nn.leaky_relu(0.2),
        nn.global_avg_pool(),
        nn.linear(64, n_classes),
    ]


class DistanceMapClassifier(ClassifierMixin, BaseEstimator):
    """Small CNN over (28, 28) maps, trained with Adam and cross-entropy.

    ``decay_mode="lr"`` multiplies the learning rate by ``decay_factor`` every
    ``decay_every`` epochs; ``decay_mode="l2"`` instead uses ``decay_factor``
    as an L2 coefficient at a constant learning rate.  After each epoch the
    validation macro-F1 is computed and the best checkpoint (first maximum)
    is kept.
    """

    def __init__(self, epochs=50, batch_size=32, lr=1e-4, decay_factor=0.63, decay_every=5, decay_mode="lr",
                 augment=AugmentConfig(), input_norm="global", seed=0, init_std=None, dtype="float32"):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.decay_factor = decay_factor
        self.decay_every = decay_every
        self.decay_mode = decay_mode
        self.augment = augment
        self.input_norm = input_norm
        self.seed = seed
        self.init_std = init_std
        self.dtype = dtype

    def _check_config(self):
        if self.batch_size < 1 or self.epochs < 1 or self.decay_every < 1:
            raise ValidationError("batch_size, epochs and decay_every must be >= 1")
        if not 0 < self.decay_factor <= 1 and self.decay_mode == "lr":
            raise ValidationError("decay_factor must lie in (0, 1]")
        if self.decay_mode not in DECAY_MODES:
            raise ValidationError(f"decay_mode must be one of {DECAY_MODES}")
        if not self.lr > 0:
            raise ValidationError("lr must be positive")

    @property
    def _torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def _init_params(self):
        gen = torch.Generator().manual_seed(int(self.seed))
        self.specs_ = network_layers(N_CLASSES)
        dt = self._torch_dtype
        params = nn.NetworkParams.init(self.specs_, gen, 1.0, dt)
        # He-normal fan-in scaling unless a fixed std is requested
        with torch.no_grad():
            for (i, name), t in zip(params.bindings, params.tensors):
                if name != "weight":
                    continue
                fan_in = int(np.prod(t.shape[1:]))
                t.mul_(self.init_std if self.init_std is not None else np.sqrt(2.0 / fan_in))
        return params

    def _logits(self, params, maps):
        x = torch.as_tensor((maps[:, None] - self.input_mean_) / self.input_scale_, dtype=self._torch_dtype)
        return nn.apply(self.specs_, params, x, "eval")

    def fit(self, X, y, X_val=None, y_val=None):
        self._check_config()
        maps = check_maps(X, allow_empty=True)
        if len(maps) == 0:
            raise EmptyDataset("training set is empty")
        labels = check_labels(y, len(maps))
        if X_val is None:
            raise ValidationError("validation data is required for model selection")
        vmaps = check_maps(X_val, allow_empty=True)
        if len(vmaps) == 0:
            raise EmptyDataset("validation set is empty")
        vlabels = check_labels(y_val, len(vmaps))

        rng = np.random.default_rng(self.seed)
        self.input_mean_, self.input_scale_ = _input_stats(maps, self.input_norm)
        params = self._init_params()
        params.requires_grad_(True)
        state = nn.AdamState()
        target_all = torch.as_tensor(labels)
        self.log_ = []
        best = None
        for epoch in range(self.epochs):
            if self.decay_mode == "lr":
                lr, wd = self.lr * self.decay_factor ** (epoch // self.decay_every), 0.0
            else:
                lr, wd = self.lr, self.decay_factor
            order = rng.permutation(len(maps))
            total, count = 0.0, 0
            for start in range(0, len(order), self.batch_size):
                idx = order[start:start + self.batch_size]
                batch = augment_batch(maps[idx], self.augment, rng)
                logits = self._logits(params, batch)
                loss = F.cross_entropy(logits, target_all[idx])
                grads = torch.autograd.grad(loss, params.tensors)
                nn.adam_step(params, grads, lr, state=state, weight_decay=wd)
                total += float(loss.detach()) * len(idx)
                count += len(idx)
            train_loss = total / count
            if not np.isfinite(train_loss):
                raise NumericalError(f"non-finite training loss in epoch {epoch + 1}")
            with torch.no_grad():
                vpred = self._predict_with(params, vmaps)
            m = compute_metrics(vlabels, vpred)
            self.log_.append({"epoch": epoch + 1, "train_loss": train_loss,
                              "val_accuracy": m.accuracy, "val_f1": m.macro_f1})
            if best is None or m.macro_f1 > best[0]:
                best = (m.macro_f1, epoch + 1, [t.detach().clone() for t in params.tensors])
        self.best_val_f1_, self.best_epoch_, tensors = best
        self.params_ = nn.NetworkParams(tensors, list(params.bindings))
        self.classes_ = np.arange(N_CLASSES)
        return self

    def _predict_with(self, params, maps, chunk: int = 1024):
        out = [self._logits(params, maps[s:s + chunk]).argmax(dim=1).numpy() for s in range(0, len(maps), chunk)]
        return np.concatenate(out).astype(np.int64)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        maps = check_maps(X)
        with torch.no_grad():
            return self._logits(self.params_, maps).double().numpy()

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        with torch.no_grad():
            return self._predict_with(self.params_, check_maps(X))

    def evaluate(self, X, y) -> Metrics:
        maps = check_maps(X, allow_empty=True)
        if len(maps) == 0:
            raise EmptyDataset("test set is empty")
        return compute_metrics(check_labels(y, len(maps)), self.predict(maps))

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_accuracy", "val_f1"])
            for e in self.log_:
                w.writerow([e["epoch"], repr(e["train_loss"]), repr(e["val_accuracy"]), repr(e["val_f1"])])

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        params = self.get_params()
        params["augment"] = asdict(self.augment)
        meta = {
            "config": params,
            "network": nn.network_manifest(self.specs_, self.params_),
            "best_epoch": self.best_epoch_,
            "best_val_f1": self.best_val_f1_,
            "log": getattr(self, "log_", []),
        }
        arrays = nn.network_arrays("net", self.params_)
        arrays["input_mean"] = np.asarray(self.input_mean_, dtype="<f8")
        arrays["input_scale"] = np.asarray(self.input_scale_, dtype="<f8")
        serialization.save(path, "classifier", meta, arrays)

    @classmethod
    def load(cls, path) -> "DistanceMapClassifier":
        _, meta, arrays = serialization.load(path, "classifier")
        cfg = dict(meta["config"])
        cfg["augment"] = AugmentConfig(**cfg["augment"])
        model = cls(**cfg)
        model.specs_, model.params_ = nn.network_from_arrays("net", meta["network"], arrays)
        model.input_mean_ = arrays["input_mean"]
        model.input_scale_ = arrays["input_scale"]
        model.best_epoch_ = meta["best_epoch"]
        model.best_val_f1_ = meta["best_val_f1"]
        model.log_ = meta["log"]
        model.classes_ = np.arange(N_CLASSES)
        return model


def train_classifier(train_maps, train_labels, val_maps, val_labels, **config) -> DistanceMapClassifier:
    return DistanceMapClassifier(**config).fit(train_maps, train_labels, val_maps, val_labels)


def evaluate(model: DistanceMapClassifier, maps, labels) -> Metrics:
    return model.evaluate(maps, labels)
