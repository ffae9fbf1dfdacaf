"""Independent numerical oracles shared by the unit and acceptance tests."""
import numpy as np
import torch

from craniosynth import nn_core as nn

KINKED = {"relu", "leaky_relu"}


def random_layer_case(kind, rng):
    """A random ``(specs, params, input, mode)`` configuration for one layer kind, in float64."""
    n = int(rng.integers(1, 4))
    mode = "train"
    if kind == "conv":
        cin, cout, k = rng.integers(1, 4), rng.integers(1, 4), int(rng.integers(1, 4))
        spec = nn.conv(int(cin), int(cout), k, int(rng.integers(1, 3)), int(rng.integers(0, 2)), bool(rng.random() < .5))
        x = rng.normal(size=(n, int(cin), int(rng.integers(k, 7)), int(rng.integers(k, 7))))
    elif kind == "conv_transpose":
        cin, cout, k = rng.integers(1, 4), rng.integers(1, 4), int(rng.integers(1, 4))
        spec = nn.conv_transpose(int(cin), int(cout), k, int(rng.integers(1, 3)), 0, bool(rng.random() < .5))
        x = rng.normal(size=(n, int(cin), int(rng.integers(2, 5)), int(rng.integers(2, 5))))
    elif kind == "bilinear_interpolate":
        spec = nn.interpolate((int(rng.integers(2, 9)), int(rng.integers(2, 9))))
        x = rng.normal(size=(n, int(rng.integers(1, 3)), int(rng.integers(2, 6)), int(rng.integers(2, 6))))
    elif kind == "batch_norm":
        c = int(rng.integers(1, 4))
        spec = nn.batch_norm(c)
        mode = "train" if rng.random() < 0.5 else "eval"
        x = rng.normal(size=(max(n, 2), c, int(rng.integers(2, 5)), int(rng.integers(2, 5))))
    elif kind == "instance_norm":
        c = int(rng.integers(1, 4))
        spec = nn.instance_norm(c, affine=bool(rng.random() < .7))
        x = rng.normal(size=(n, c, int(rng.integers(2, 5)), int(rng.integers(2, 5))))
    elif kind == "embedding":
        num, dim = int(rng.integers(2, 6)), int(rng.integers(1, 7))
        spec = nn.embedding(num, dim)
        x = rng.integers(0, num, size=int(rng.integers(1, 6)))
    elif kind == "linear":
        cin = int(rng.integers(1, 6))
        spec = nn.linear(cin, int(rng.integers(1, 6)), bool(rng.random() < .5))
        x = rng.normal(size=(n, cin))
    else:
        spec = {"relu": nn.relu, "leaky_relu": nn.leaky_relu, "tanh": nn.tanh,
                "global_avg_pool": nn.global_avg_pool}[kind]()
        x = rng.normal(size=(n, int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5))))
    if kind in KINKED:
        x = np.where(np.abs(x) < 1e-3, np.sign(x + 1e-12) * 1e-3, x) + np.sign(x) * 1e-3
    params = nn.NetworkParams.init([spec], dtype=torch.float64)
    params.tensors = [torch.as_tensor(rng.normal(size=tuple(t.shape))) for t in params.tensors]
    for key in params.buffers:
        shape = tuple(params.buffers[key].shape)
        params.buffers[key] = torch.as_tensor(rng.normal(size=shape) if key.endswith("mean")
                                              else rng.uniform(0.5, 2.0, size=shape))
    x = torch.as_tensor(x)
    return [spec], params, x, mode


def _objective(specs, params, x, g, mode):
    with torch.no_grad():
        return float((nn.apply(specs, params, x, mode) * g).sum())


def finite_difference_gradients(specs, params, x, g, mode="train", h=1e-6):
    """Central differences of ``sum(g * output)`` w.r.t. the input (if floating) and every parameter."""
    buffers = {k: v.clone() for k, v in params.buffers.items()}

    def run(xx, tensors):
        p = nn.NetworkParams(tensors, params.bindings, {k: v.clone() for k, v in buffers.items()})
        return _objective(specs, p, xx, g, mode)

    def grad_of(arr, build):
        out = np.zeros(arr.shape)
        flat = arr.reshape(-1)
        for i in range(flat.numel()):
            plus, minus = flat.clone(), flat.clone()
            plus[i] += h
            minus[i] -= h
            out.reshape(-1)[i] = (build(plus.view(arr.shape)) - build(minus.view(arr.shape))) / (2 * h)
        return out

    gx = None
    if x.is_floating_point():
        gx = grad_of(x.detach().clone(), lambda v: run(v, params.tensors))
    gp = []
    for k, t in enumerate(params.tensors):
        def build(v, k=k):
            ts = list(params.tensors)
            ts[k] = v
            return run(x, ts)
        gp.append(grad_of(t.detach().clone(), build))
    return gx, gp


def relative_error(a, b):
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def layer_gradient_error(kind, rng):
    """Largest relative error between backward() and central differences for one random configuration."""
    specs, params, x, mode = random_layer_case(kind, rng)
    out, record = nn.forward(specs, params, x, mode)
    g = torch.as_tensor(rng.normal(size=tuple(out.shape)))
    gx, gps = nn.backward(record, g)
    fx, fps = finite_difference_gradients(specs, params, x, g, mode)
    errors = [relative_error(a.numpy(), b) for a, b in zip(gps, fps)]
    if fx is not None:
        errors.append(relative_error(gx.numpy(), fx))
    return max(errors) if errors else 0.0


def tiny_critic(rng, cin=1, size=5):
    specs = [nn.conv(cin, 3, 3, bias=True), nn.leaky_relu(0.2), nn.conv(3, 1, size - 2, bias=True)]
    params = nn.NetworkParams.init(specs, dtype=torch.float64)
    params.tensors = [torch.as_tensor(rng.normal(size=tuple(t.shape))) for t in params.tensors]
    return specs, params


def penalty_value(specs, params, x):
    grad, _ = nn.input_gradient_graph(specs, params, x)
    norm = torch.sqrt(grad.flatten(1).pow(2).sum(dim=1) + 1e-12)
    return ((norm - 1) ** 2).mean()


def penalty_gradient_error(rng, h=1e-6):
    """Relative error of the double-backward penalty gradient against central differences over parameters."""
    specs, params = tiny_critic(rng)
    x = torch.as_tensor(rng.normal(size=(3, 1, 5, 5)))
    tensors = [t.clone().requires_grad_(True) for t in params.tensors]
    bound = nn.NetworkParams(tensors, params.bindings)
    analytic = torch.autograd.grad(penalty_value(specs, bound, x), tensors, allow_unused=True)
    # the output bias does not reach the input gradient
    analytic = [torch.zeros_like(t) if a is None else a for t, a in zip(tensors, analytic)]
    worst = 0.0
    for k, t in enumerate(params.tensors):
        num = np.zeros(tuple(t.shape))
        for i in range(t.numel()):
            vals = []
            for sign in (1, -1):
                ts = [u.clone() for u in params.tensors]
                ts[k].view(-1)[i] += sign * h
                vals.append(float(penalty_value(specs, nn.NetworkParams(ts, params.bindings), x).detach()))
            num.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * h)
        worst = max(worst, relative_error(analytic[k].numpy(), num))
    return worst
