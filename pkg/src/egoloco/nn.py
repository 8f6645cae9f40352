"""Dense and gated-recurrent networks with hand-written gradients.

Every network keeps its parameters in a flat ``dict[str, ndarray]`` so that
optimizers, checkpoints and finite-difference checks can treat all network
classes alike.  Forward passes return a cache that the matching backward
pass consumes; gradients are *accumulated* into a caller-owned dict.

All arrays are float64.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1
TRUNCATION = 24


class ShapeError(ValueError):
    """Raised when an input does not match a network's declared dimensions."""


def _uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def sigmoid(x):
    # split evaluation keeps exp() from overflowing for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def zeros_like_params(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


class Mlp:
    """Fully connected network, ReLU on hidden layers and identity output.

    ``sizes`` lists every layer width including input and output, so
    ``Mlp([8, 64, 64, 4])`` has two hidden layers.
    """

    def __init__(self, sizes, rng=None, out_scale=1.0):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        rng = np.random.default_rng(0) if rng is None else rng
        self.sizes = [int(s) for s in sizes]
        self.params = {}
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            scale = out_scale if i == len(self.sizes) - 2 else 1.0
            self.params[f"W{i}"] = scale * _uniform_init(rng, n_in, (n_out, n_in))
            self.params[f"b{i}"] = np.zeros(n_out)

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    @property
    def in_size(self):
        return self.sizes[0]

    @property
    def out_size(self):
        return self.sizes[-1]

    def forward(self, x):
        """Map a batch ``x`` of shape (B, in) (or a single vector) forward."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_size:
            raise ShapeError(f"expected input width {self.in_size}, got {x.shape[-1]}")
        acts = [x]
        h = x
        for i in range(self.n_layers):
            h = h @ self.params[f"W{i}"].T + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, dy, grads):
        """Accumulate parameter gradients into ``grads``; return d(input)."""
        acts = cache
        d = dy
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                d = d * (acts[i + 1] > 0)
            a_in = acts[i]
            if d.ndim == 1:
                grads[f"W{i}"] += np.outer(d, a_in)
                grads[f"b{i}"] += d
            else:
                grads[f"W{i}"] += d.T @ a_in
                grads[f"b{i}"] += d.sum(axis=0)
            d = d @ self.params[f"W{i}"]
        return d


class Gru:
    """Single-layer GRU cell (reset, update, candidate gate order).

    h' = (1 - z) * n + z * h, so the state stays inside (-1, 1) whenever the
    incoming state does.  The output of a step is the new hidden state.
    """

    def __init__(self, in_size, hidden, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_size = int(in_size)
        self.hidden = int(hidden)
        H = self.hidden
        self.params = {
            "Wx": _uniform_init(rng, H, (3 * H, self.in_size)),
            "Wh": _uniform_init(rng, H, (3 * H, H)),
            "bx": _uniform_init(rng, H, (3 * H,)),
            "bh": _uniform_init(rng, H, (3 * H,)),
        }

    def initial_state(self, batch=None):
        return np.zeros(self.hidden) if batch is None else np.zeros((batch, self.hidden))

    def step(self, h, x):
        """One recurrent step.  Returns ``(h_new, y, cache)`` with ``y = h_new``."""
        x = np.asarray(x, dtype=float)
        h = np.asarray(h, dtype=float)
        if x.shape[-1] != self.in_size:
            raise ShapeError(f"expected input width {self.in_size}, got {x.shape[-1]}")
        if h.shape[-1] != self.hidden:
            raise ShapeError(f"expected hidden width {self.hidden}, got {h.shape[-1]}")
        H = self.hidden
        p = self.params
        gx = x @ p["Wx"].T + p["bx"]
        gh = h @ p["Wh"].T + p["bh"]
        r = sigmoid(gx[..., :H] + gh[..., :H])
        z = sigmoid(gx[..., H:2 * H] + gh[..., H:2 * H])
        n = np.tanh(gx[..., 2 * H:] + r * gh[..., 2 * H:])
        h_new = (1.0 - z) * n + z * h
        return h_new, h_new, (x, h, r, z, n, gh[..., 2 * H:])

    def backward_step(self, cache, dh_new, grads):
        """Backprop one step.  Returns ``(dx, dh_prev)``."""
        x, h, r, z, n, ghn = cache
        dn = dh_new * (1.0 - z)
        dz = dh_new * (h - n)
        dh = dh_new * z
        dan = dn * (1.0 - n * n)
        dar = dan * ghn * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dgx = np.concatenate([dar, daz, dan], axis=-1)
        dgh = np.concatenate([dar, daz, dan * r], axis=-1)
        if dgx.ndim == 1:
            grads["Wx"] += np.outer(dgx, x)
            grads["Wh"] += np.outer(dgh, h)
            grads["bx"] += dgx
            grads["bh"] += dgh
        else:
            grads["Wx"] += dgx.T @ x
            grads["Wh"] += dgh.T @ h
            grads["bx"] += dgx.sum(axis=0)
            grads["bh"] += dgh.sum(axis=0)
        dx = dgx @ self.params["Wx"]
        dh = dh + dgh @ self.params["Wh"]
        return dx, dh


@dataclass
class TapeSegment:
    """Recorded forward pass of a recurrent net over at most ``TRUNCATION`` steps.

    ``h0`` is a detached copy of the starting hidden state; ``keep[t]`` is 0
    where the hidden state was reset (episode start) before step ``t``.
    """

    h0: np.ndarray
    caches: list = field(default_factory=list)
    keep: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    def __len__(self):
        return len(self.caches)


def gru_unroll(net, h0, xs, keep=None, truncation=TRUNCATION):
    """Run ``net`` over ``xs`` (T, ..., in) from a detached ``h0``."""
    xs = np.asarray(xs, dtype=float)
    if len(xs) > truncation:
        raise ValueError(f"segment of {len(xs)} steps exceeds truncation window {truncation}")
    seg = TapeSegment(h0=np.array(h0, dtype=float, copy=True))
    h = seg.h0
    for t in range(len(xs)):
        k = np.ones(h.shape[:-1]) if keep is None else np.asarray(keep[t], dtype=float)
        h_in = h * k[..., None] if h.ndim > 1 else h * k
        h, y, cache = net.step(h_in, xs[t])
        seg.caches.append(cache)
        seg.keep.append(k)
        seg.outputs.append(y)
    return seg


def bptt_gradients(net, segment, loss_grads, grads=None, truncation=TRUNCATION):
    """Truncated backpropagation through a recorded segment.

    ``loss_grads[t]`` is dLoss/dy_t.  Nothing flows into the segment's
    initial state: it is treated as a constant.  Returns ``(grads, dxs)``.
    """
    if len(segment) > truncation:
        raise ValueError(f"segment of {len(segment)} steps exceeds truncation window {truncation}")
    if grads is None:
        grads = zeros_like_params(net.params)
    dxs = [None] * len(segment)
    dh = np.zeros_like(segment.h0)
    for t in reversed(range(len(segment))):
        dh = dh + loss_grads[t]
        dx, dh_in = net.backward_step(segment.caches[t], dh, grads)
        dxs[t] = dx
        k = segment.keep[t]
        dh = dh_in * k[..., None] if dh_in.ndim > 1 else dh_in * k
    return grads, dxs


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params, grads, state):
    """Bias-corrected Adam.  Returns new parameter arrays; ``state`` is updated."""
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    new = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            new[k] = p
            continue
        m = state.m.get(k)
        if m is None:
            m = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        new[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new, state


def clip_grad_norm(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor), reduced by max."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_gradients(loss_fn, params, eps=1e-5):
    """Central finite differences of ``loss_fn()`` w.r.t. every entry of ``params``."""
    out = {}
    for k, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss_fn()
            flat[i] = old - eps
            down = loss_fn()
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * eps)
        out[k] = g
    return out


def finite_diff_check(net, inputs, eps=1e-5, seed=0):
    """Max relative error between analytic and central-difference gradients.

    The scalar probed is a fixed random projection of the outputs.  For a
    :class:`Gru`, ``inputs`` is a sequence (T, B, in) unrolled from a zero
    state; every step's output enters the loss.
    """
    if eps <= 0:
        raise ValueError("finite-difference step must be positive")
    rng = np.random.default_rng(seed)
    inputs = np.asarray(inputs, dtype=float)
    if isinstance(net, Gru):
        h0 = np.zeros(inputs.shape[1:-1] + (net.hidden,))
        proj = rng.normal(size=(len(inputs),) + h0.shape)

        def loss():
            seg = gru_unroll(net, h0, inputs, truncation=max(len(inputs), 1))
            return float(sum(np.sum(c * y) for c, y in zip(proj, seg.outputs)))

        seg = gru_unroll(net, h0, inputs, truncation=max(len(inputs), 1))
        grads, _ = bptt_gradients(net, seg, list(proj), truncation=max(len(inputs), 1))
    else:
        y, cache = net.forward(inputs)
        proj = rng.normal(size=y.shape)

        def loss():
            return float(np.sum(proj * net(inputs)))

        grads = zeros_like_params(net.params)
        net.backward(cache, proj, grads)
    numeric = numeric_gradients(loss, net.params, eps)
    return max(relative_error(grads[k], numeric[k]) for k in grads)


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, params, meta=None):
    """Write parameter arrays to an ``.npz`` with a JSON header (shapes, version)."""
    path = Path(path)
    header = {
        "version": CHECKPOINT_VERSION,
        "dtype": "float64",
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "meta": meta or {},
    }
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        params = {k: data[k].copy() for k in header["shapes"]}
    for k, shape in header["shapes"].items():
        if list(params[k].shape) != shape:
            raise ValueError(f"checkpoint array {k} does not match its header shape")
    return params, header["meta"]


def mlp_forward(net, x):
    return net(x)


def gru_step(net, h, x):
    h_new, y, _ = net.step(h, x)
    return h_new, y
