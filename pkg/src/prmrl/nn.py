"""A small fully connected network with manual backpropagation."""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PRMW"


class Mlp:
    """ReLU hidden layers; output is identity or ``tanh`` scaled to a box.

    Weights are stored as ``W[i]`` of shape ``(fan_in, fan_out)`` so a batch
    ``x`` of shape ``(n, fan_in)`` maps to ``x @ W + b``.
    """

    def __init__(self, sizes, rng=None, output="identity", box=None, final_scale=3e-3):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        if output not in ("identity", "tanh"):
            raise ValueError(f"unknown output activation {output!r}")
        self.sizes = sizes
        self.output = output
        if output == "tanh":
            lo, hi = (np.asarray(v, dtype=float) for v in (box if box is not None else (-1.0, 1.0)))
            self.center = np.broadcast_to((hi + lo) / 2.0, (sizes[-1],)).copy()
            self.half = np.broadcast_to((hi - lo) / 2.0, (sizes[-1],)).copy()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W, self.b = [], []
        n_layers = len(sizes) - 1
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            lim = final_scale if i == n_layers - 1 else 1.0 / np.sqrt(fi)
            self.W.append(rng.uniform(-lim, lim, size=(fi, fo)))
            self.b.append(rng.uniform(-lim, lim, size=fo) if i < n_layers - 1 else np.zeros(fo))

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.W, self.b) for p in pair]

    def copy(self) -> "Mlp":
        other = object.__new__(Mlp)
        other.__dict__.update(self.__dict__)
        other.W = [w.copy() for w in self.W]
        other.b = [b.copy() for b in self.b]
        return other

    def forward(self, x, cache: bool = False):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input has {x.shape[-1]} features, network expects {self.sizes[0]}")
        acts = [x]
        h = x
        last = len(self.W) - 1
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            z = h @ W + b
            h = np.maximum(z, 0.0) if i < last else z
            acts.append(h)
        out = h
        if self.output == "tanh":
            t = np.tanh(h)
            acts.append(t)
            out = self.center + self.half * t
        return (out, acts) if cache else out

    def backward(self, acts, grad_out):
        """Gradients of ``sum(grad_out * output)`` w.r.t. weights, biases and input."""
        g = np.asarray(grad_out, dtype=float)
        if self.output == "tanh":
            t = acts[-1]
            g = g * self.half * (1.0 - t * t)
            acts = acts[:-1]
        gW = [None] * len(self.W)
        gb = [None] * len(self.W)
        for i in range(len(self.W) - 1, -1, -1):
            if i < len(self.W) - 1:
                g = g * (acts[i + 1] > 0.0)
            h = acts[i]
            gW[i] = h.T @ g if h.ndim > 1 else np.outer(h, g)
            gb[i] = g.sum(axis=0) if g.ndim > 1 else g
            g = g @ self.W[i].T
        return gW, gb, g


def mlp_forward(net: Mlp, x):
    return net.forward(x)


def mlp_gradients(net: Mlp, x, target):
    """Gradients of the mean squared error ``mean((net(x) - target)^2)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out, acts = net.forward(x, cache=True)
    target = np.asarray(target, dtype=float).reshape(out.shape)
    grad = 2.0 * (out - target) / out.size
    gW, gb, _ = net.backward(acts, grad)
    return gW, gb


def actor_gradients(actor: Mlp, critic: Mlp, features):
    """Gradients of ``-mean(critic([s, actor(s)]))`` w.r.t. the actor (critic frozen)."""
    s = np.atleast_2d(np.asarray(features, dtype=float))
    a, a_acts = actor.forward(s, cache=True)
    _, c_acts = critic.forward(np.concatenate([s, a], axis=1), cache=True)
    ones = np.full((len(s), 1), -1.0 / len(s))
    _, _, g_in = critic.backward(c_acts, ones)
    gW, gb, _ = actor.backward(a_acts, g_in[:, s.shape[1] :])
    return gW, gb


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def interleave(gW, gb):
    return [g for pair in zip(gW, gb) for g in pair]


def soft_update(target: Mlp, online: Mlp, rate: float) -> None:
    """``target <- target + rate * (online - target)``."""
    for t, o in zip(target.params, online.params):
        t += rate * (o - t)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
# Layout: b"PRMW", uint32 layer count L, then L pairs of uint32 (fan_in,
# fan_out), then for each layer its weights (row-major fan_in x fan_out) and
# biases, all little-endian float64.


def save_weights(net: Mlp, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(net.W)))
        for W in net.W:
            fh.write(struct.pack("<II", *W.shape))
        for W, b in zip(net.W, net.b):
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_weights(net: Mlp, path) -> Mlp:
    """Fill ``net`` from a checkpoint; shapes must match."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError("not a weight checkpoint")
    (n,) = struct.unpack_from("<I", data, 4)
    off = 8
    shapes = []
    for _ in range(n):
        shapes.append(struct.unpack_from("<II", data, off))
        off += 8
    if shapes != [W.shape for W in net.W]:
        raise ValueError(f"checkpoint shapes {shapes} do not match network {[W.shape for W in net.W]}")
    for i, (fi, fo) in enumerate(shapes):
        k = fi * fo
        net.W[i] = np.frombuffer(data, "<f8", k, off).reshape(fi, fo).astype(float)
        off += 8 * k
        net.b[i] = np.frombuffer(data, "<f8", fo, off).astype(float)
        off += 8 * fo
    if off != len(data):
        raise ValueError("trailing bytes in weight checkpoint")
    return net
