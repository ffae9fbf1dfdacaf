"""Functional network substrate: layer specs, explicit parameters, gradients, Adam.

Networks are plain lists of :class:`LayerSpec`; their parameters live in a
separate :class:`NetworkParams`.  Reverse-mode differentiation (including
the double backward needed by the gradient penalty) is delegated to torch
autograd; layer semantics follow the torch functional ops.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import serialization
from .exceptions import ShapeMismatch, UnsupportedLayer, ValidationError

KINDS = (
    "conv", "conv_transpose", "bilinear_interpolate", "batch_norm", "instance_norm",
    "relu", "leaky_relu", "tanh", "embedding", "linear", "global_avg_pool",
)
# batch_norm in train mode mutates running statistics on every evaluation,
# so re-running it inside a penalty term is not supported.
SECOND_ORDER_KINDS = frozenset(KINDS) - {"batch_norm"}
CONV_FAMILY = ("conv", "conv_transpose", "linear", "embedding")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel_size: int | None = None
    stride: int = 1
    padding: int = 0
    bias: bool = False
    size: tuple | None = None
    affine: bool = True
    track_running_stats: bool = False
    eps: float = 1e-5
    momentum: float = 0.1
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "conv_transpose") and (self.kernel_size is None or self.in_channels is None
                                                        or self.out_channels is None):
            raise ValidationError(f"{self.kind} needs channels and kernel_size")
        if self.kind == "bilinear_interpolate":
            if self.size is None or self.kernel_size is not None:
                raise ValidationError("bilinear_interpolate needs a target size and no kernel")
            object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        if self.kind in ("batch_norm", "instance_norm") and self.in_channels is None:
            raise ValidationError(f"{self.kind} needs in_channels")

    def param_shapes(self) -> list:
        k, cin, cout = self.kernel_size, self.in_channels, self.out_channels
        if self.kind == "conv":
            shapes = [("weight", (cout, cin, k, k))]
        elif self.kind == "conv_transpose":
            shapes = [("weight", (cin, cout, k, k))]
        elif self.kind == "linear":
            shapes = [("weight", (cout, cin))]
        elif self.kind == "embedding":
            return [("weight", (cin, cout))]
        elif self.kind in ("batch_norm", "instance_norm"):
            return [("weight", (cin,)), ("bias", (cin,))] if self.affine else []
        else:
            return []
        if self.bias:
            shapes.append(("bias", (cout,)))
        return shapes

    def buffer_shapes(self) -> list:
        if self.kind == "batch_norm" and self.track_running_stats:
            return [("running_mean", (self.in_channels,)), ("running_var", (self.in_channels,))]
        return []

    def __repr__(self):
        fields = {k: v for k, v in asdict(self).items() if v != LayerSpec.__dataclass_fields__[k].default}
        return f"LayerSpec({', '.join(f'{k}={v!r}' for k, v in fields.items())})"


def conv(cin, cout, k, stride=1, padding=0, bias=False) -> LayerSpec:
    return LayerSpec("conv", cin, cout, k, stride, padding, bias)


def conv_transpose(cin, cout, k, stride=1, padding=0, bias=False) -> LayerSpec:
    return LayerSpec("conv_transpose", cin, cout, k, stride, padding, bias)


def interpolate(size) -> LayerSpec:
    return LayerSpec("bilinear_interpolate", size=tuple(size))


def batch_norm(c, eps=1e-5, momentum=0.1, affine=True, track_running_stats=True) -> LayerSpec:
    return LayerSpec("batch_norm", c, c, eps=eps, momentum=momentum, affine=affine,
                     track_running_stats=track_running_stats)


def instance_norm(c, eps=1e-5, affine=True) -> LayerSpec:
    return LayerSpec("instance_norm", c, c, eps=eps, affine=affine, track_running_stats=False)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def leaky_relu(negative_slope=0.2) -> LayerSpec:
    return LayerSpec("leaky_relu", negative_slope=negative_slope)


def tanh() -> LayerSpec:
    return LayerSpec("tanh")


def embedding(num, dim) -> LayerSpec:
    return LayerSpec("embedding", num, dim)


def linear(cin, cout, bias=True) -> LayerSpec:
    return LayerSpec("linear", cin, cout, bias=bias)


def global_avg_pool() -> LayerSpec:
    return LayerSpec("global_avg_pool")


@dataclass
class NetworkParams:
    """Ordered parameter tensors bound to ``(layer index, name)`` plus norm buffers."""

    tensors: list
    bindings: list
    buffers: dict = field(default_factory=dict)

    @classmethod
    def init(cls, specs: Sequence[LayerSpec], generator: torch.Generator | None = None,
             std: float = 0.02, dtype=torch.float64) -> "NetworkParams":
        """Conv-family weights ~ N(0, std); norm affine weight 1 / bias 0; other biases 0."""
        tensors, bindings, buffers = [], [], {}
        for i, spec in enumerate(specs):
            for name, shape in spec.param_shapes():
                if name == "weight" and spec.kind in CONV_FAMILY:
                    t = torch.randn(shape, generator=generator, dtype=dtype) * std
                elif name == "weight":
                    t = torch.ones(shape, dtype=dtype)
                else:
                    t = torch.zeros(shape, dtype=dtype)
                tensors.append(t)
                bindings.append((i, name))
            for name, shape in spec.buffer_shapes():
                buffers[f"{i}.{name}"] = torch.zeros(shape, dtype=dtype) if name == "running_mean" \
                    else torch.ones(shape, dtype=dtype)
        return cls(tensors, bindings, buffers)

    def layer(self, i: int) -> dict:
        return {name: t for (j, name), t in zip(self.bindings, self.tensors) if j == i}

    def clone(self) -> "NetworkParams":
        return NetworkParams([t.detach().clone() for t in self.tensors], list(self.bindings),
                             {k: v.clone() for k, v in self.buffers.items()})

    def requires_grad_(self, flag: bool = True) -> "NetworkParams":
        for t in self.tensors:
            t.requires_grad_(flag)
        return self

    def to(self, dtype) -> "NetworkParams":
        return NetworkParams([t.detach().to(dtype) for t in self.tensors], list(self.bindings),
                             {k: v.to(dtype) for k, v in self.buffers.items()})


def _expect_channels(x, spec, i):
    if x.dim() < 2 or x.shape[1] != spec.in_channels:
        raise ShapeMismatch(f"{spec.kind} expects {spec.in_channels} input channels, got shape {tuple(x.shape)}", i)


def _apply_layer(i, spec, p, x, train, buffers):
    k = spec.kind
    if k in ("conv", "conv_transpose", "bilinear_interpolate", "batch_norm", "instance_norm",
             "global_avg_pool") and x.dim() != 4:
        raise ShapeMismatch(f"{k} expects a 4D tensor, got shape {tuple(x.shape)}", i)
    if k == "conv":
        _expect_channels(x, spec, i)
        if x.shape[2] + 2 * spec.padding < spec.kernel_size or x.shape[3] + 2 * spec.padding < spec.kernel_size:
            raise ShapeMismatch(f"input {tuple(x.shape)} smaller than kernel", i)
        return F.conv2d(x, p["weight"], p.get("bias"), spec.stride, spec.padding)
    if k == "conv_transpose":
        _expect_channels(x, spec, i)
        return F.conv_transpose2d(x, p["weight"], p.get("bias"), spec.stride, spec.padding)
    if k == "bilinear_interpolate":
        return F.interpolate(x, size=spec.size, mode="bilinear", align_corners=True)
    if k == "batch_norm":
        _expect_channels(x, spec, i)
        rm, rv = buffers.get(f"{i}.running_mean"), buffers.get(f"{i}.running_var")
        use_batch = train or rm is None
        return F.batch_norm(x, rm, rv, p.get("weight"), p.get("bias"), use_batch, spec.momentum, spec.eps)
    if k == "instance_norm":
        _expect_channels(x, spec, i)
        return F.instance_norm(x, None, None, p.get("weight"), p.get("bias"), True, spec.momentum, spec.eps)
    if k == "relu":
        return F.relu(x)
    if k == "leaky_relu":
        return F.leaky_relu(x, spec.negative_slope)
    if k == "tanh":
        return torch.tanh(x)
    if k == "embedding":
        if x.dtype not in (torch.int64, torch.int32):
            raise ShapeMismatch("embedding expects integer indices", i)
        if x.numel() and (int(x.min()) < 0 or int(x.max()) >= spec.in_channels):
            raise ShapeMismatch("embedding index out of range", i)
        return F.embedding(x, p["weight"])
    if k == "linear":
        if x.shape[-1] != spec.in_channels:
            raise ShapeMismatch(f"linear expects {spec.in_channels} features, got {x.shape[-1]}", i)
        return F.linear(x, p["weight"], p.get("bias"))
    if k == "global_avg_pool":
        return x.mean(dim=(2, 3))
    raise UnsupportedLayer(k)


def apply(specs: Sequence[LayerSpec], params: NetworkParams, x: torch.Tensor, mode: str = "train") -> torch.Tensor:
    """Forward pass building an autograd graph over whatever requires grad."""
    if mode not in ("train", "eval"):
        raise ValidationError("mode must be 'train' or 'eval'")
    train = mode == "train"
    for i, spec in enumerate(specs):
        try:
            x = _apply_layer(i, spec, params.layer(i), x, train, params.buffers)
        except RuntimeError as exc:
            raise ShapeMismatch(str(exc).splitlines()[0], i) from exc
    return x


@dataclass
class ForwardRecord:
    input: torch.Tensor
    output: torch.Tensor
    params: list


def forward(specs, params: NetworkParams, x, mode: str = "train"):
    """Returns ``(output, record)``; ``record`` feeds :func:`backward`."""
    leaf = torch.as_tensor(x)
    if leaf.is_floating_point():
        leaf = leaf.detach().clone().requires_grad_(True)
    tensors = [t.detach().requires_grad_(True) for t in params.tensors]
    bound = NetworkParams(tensors, params.bindings, params.buffers)
    out = apply(specs, bound, leaf, mode)
    return out.detach(), ForwardRecord(leaf, out, tensors)


def backward(record: ForwardRecord, output_gradient):
    """Exact reverse-mode gradients: ``(input gradient or None, [parameter gradients])``."""
    g = torch.as_tensor(output_gradient, dtype=record.output.dtype)
    targets = ([record.input] if record.input.requires_grad else []) + record.params
    grads = torch.autograd.grad(record.output, targets, g, allow_unused=True, retain_graph=True)
    grads = [torch.zeros_like(t) if gr is None else gr for t, gr in zip(targets, grads)]
    if record.input.requires_grad:
        return grads[0], grads[1:]
    return None, grads


def check_second_order(specs) -> None:
    for i, spec in enumerate(specs):
        if spec.kind not in SECOND_ORDER_KINDS:
            raise UnsupportedLayer(f"layer {i} ({spec.kind}) has no second-order rule")


def input_gradient_graph(specs, params: NetworkParams, x: torch.Tensor, mode: str = "train"):
    """``(grad of sum(output) w.r.t. x, output)``, both differentiable w.r.t. params.

    ``x`` may be a leaf or an intermediate tensor; if it does not require grad a
    differentiable copy is made.  Per-sample outputs are independent (no
    batch statistics), so the summed gradient equals the per-sample gradients.
    """
    check_second_order(specs)
    if not x.requires_grad:
        x = x.detach().clone().requires_grad_(True)
    out = apply(specs, params, x, mode)
    (grad,) = torch.autograd.grad(out.sum(), x, create_graph=True)
    return grad, out


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: NetworkParams, gradients, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, state: AdamState | None = None, weight_decay: float = 0.0) -> AdamState:
    """In-place bias-corrected Adam update of ``params.tensors``; returns the state.

    ``weight_decay`` adds an L2 term ``weight_decay * p`` to the gradient.
    """
    if len(gradients) != len(params.tensors):
        raise ShapeMismatch(f"{len(gradients)} gradients for {len(params.tensors)} parameters")
    for p, g in zip(params.tensors, gradients):
        if tuple(p.shape) != tuple(g.shape):
            raise ShapeMismatch(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
    state = state if state is not None else AdamState()
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params.tensors]
        state.v = [torch.zeros_like(p) for p in params.tensors]
    state.step += 1
    bc1 = 1 - beta1**state.step
    bc2 = 1 - beta2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params.tensors, gradients, state.m, state.v):
            g = g.detach()
            if weight_decay:
                g = g + weight_decay * p
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return state


def output_size(specs: Sequence[LayerSpec], input_shape) -> list:
    """Spatial shape after each layer, from shape arithmetic alone."""
    shape = list(input_shape)
    sizes = []
    for spec in specs:
        n, c, h, w = shape
        if spec.kind == "conv":
            h = (h + 2 * spec.padding - spec.kernel_size) // spec.stride + 1
            w = (w + 2 * spec.padding - spec.kernel_size) // spec.stride + 1
            c = spec.out_channels
        elif spec.kind == "conv_transpose":
            h = (h - 1) * spec.stride - 2 * spec.padding + spec.kernel_size
            w = (w - 1) * spec.stride - 2 * spec.padding + spec.kernel_size
            c = spec.out_channels
        elif spec.kind == "bilinear_interpolate":
            h, w = spec.size
        shape = [n, c, h, w]
        sizes.append(tuple(shape))
    return sizes


def _dtype_code(t: torch.Tensor) -> str:
    return "<f4" if t.dtype == torch.float32 else "<f8"


def network_arrays(prefix: str, params: NetworkParams) -> dict:
    arrays = {}
    for k, t in enumerate(params.tensors):
        arrays[f"{prefix}.p{k}"] = t.detach().cpu().numpy().astype(_dtype_code(t))
    for name, t in sorted(params.buffers.items()):
        arrays[f"{prefix}.b.{name}"] = t.detach().cpu().numpy().astype(_dtype_code(t))
    return arrays


def network_manifest(specs, params: NetworkParams) -> dict:
    return {
        "layers": [asdict(s) for s in specs],
        "params": [{"layer": i, "name": n, "shape": list(t.shape)} for (i, n), t in zip(params.bindings, params.tensors)],
        "buffers": sorted(params.buffers),
    }


def network_from_arrays(prefix: str, manifest: dict, arrays: dict):
    specs = [LayerSpec(**{k: (tuple(v) if k == "size" and v is not None else v) for k, v in d.items()})
             for d in manifest["layers"]]
    tensors = [torch.from_numpy(np.ascontiguousarray(arrays[f"{prefix}.p{k}"]))
               for k in range(len(manifest["params"]))]
    bindings = [(p["layer"], p["name"]) for p in manifest["params"]]
    buffers = {name: torch.from_numpy(np.ascontiguousarray(arrays[f"{prefix}.b.{name}"])) for name in manifest["buffers"]}
    return specs, NetworkParams(tensors, bindings, buffers)


def save_network(path, specs, params: NetworkParams, meta: dict | None = None) -> None:
    """JSON manifest (layer specs, parameter shapes) + little-endian float blobs per parameter."""
    header = {"network": network_manifest(specs, params), **(meta or {})}
    serialization.save(path, "network", header, network_arrays("net", params))


def load_network(path):
    """Returns ``(specs, params, meta)``."""
    _, meta, arrays = serialization.load(path, "network")
    specs, params = network_from_arrays("net", meta["network"], arrays)
    return specs, params, meta
