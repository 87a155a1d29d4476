"""Layers and parameter plumbing on top of the autodiff core.

Every layer exposes params() as an ordered list of (name, Tensor) so models
can be checkpointed by concatenating raw float64 buffers in header order.
"""

from __future__ import annotations

import json

import numpy as np

from . import tensor as T
from .tensor import Tensor


class FormatError(ValueError):
    """Checkpoint or dataset file does not match its declared layout."""


def xavier_normal(rng, n_in, n_out, shape=None):
    std = np.sqrt(2.0 / (n_in + n_out))
    return rng.normal(0.0, std, size=shape if shape is not None else (n_in, n_out))


class Linear:
    def __init__(self, rng, n_in, n_out, bias_init=0.1):
        self.w = Tensor(xavier_normal(rng, n_in, n_out), requires_grad=True)
        self.b = Tensor(np.full(n_out, bias_init), requires_grad=True)

    def __call__(self, x):
        # matmul broadcasts over leading dims, bias over the last.
        return T.matmul(x, self.w) + self.b

    def params(self, prefix):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


class LayerNorm:
    """Per-sample normalization over the last axis, with learned gain/bias.

    Stands in for the batch normalization of the usual relational MLP blocks:
    no running statistics, no train/eval divergence.
    """

    def __init__(self, dim, eps=1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        mu = T.mean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = T.mean(centered * centered, axis=-1, keepdims=True)
        return centered / T.sqrt(var + self.eps) * self.gain + self.bias

    def params(self, prefix):
        return [(f"{prefix}.gain", self.gain), (f"{prefix}.bias", self.bias)]


class MLPBlock:
    """Two-layer ELU MLP with a trailing layer norm."""

    def __init__(self, rng, n_in, n_hid, n_out):
        self.fc1 = Linear(rng, n_in, n_hid)
        self.fc2 = Linear(rng, n_hid, n_out)
        self.norm = LayerNorm(n_out)

    def __call__(self, x):
        h = T.elu(self.fc1(x))
        h = T.elu(self.fc2(h))
        return self.norm(h)

    def params(self, prefix):
        return (self.fc1.params(f"{prefix}.fc1") + self.fc2.params(f"{prefix}.fc2")
                + self.norm.params(f"{prefix}.norm"))


class Conv1d:
    def __init__(self, rng, n_in, n_out, kernel):
        fan = n_in * kernel + n_out * kernel
        std = np.sqrt(2.0 / fan)
        self.w = Tensor(rng.normal(0.0, std, size=(n_out, n_in, kernel)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x):
        return T.conv1d(x, self.w, self.b)

    def params(self, prefix):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


class ChannelNorm:
    """Layer norm over the channel axis of [B, C, L] activations."""

    def __init__(self, channels, eps=1e-5):
        self.gain = Tensor(np.ones((channels, 1)), requires_grad=True)
        self.bias = Tensor(np.zeros((channels, 1)), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        mu = T.mean(x, axis=1, keepdims=True)
        centered = x - mu
        var = T.mean(centered * centered, axis=1, keepdims=True)
        return centered / T.sqrt(var + self.eps) * self.gain + self.bias

    def params(self, prefix):
        return [(f"{prefix}.gain", self.gain), (f"{prefix}.bias", self.bias)]


class LSTMCell:
    """Standard LSTM cell (input/forget/cell/output gating), forget bias 1."""

    def __init__(self, rng, n_in, n_hid):
        self.n_hid = n_hid
        self.wx = Tensor(xavier_normal(rng, n_in, 4 * n_hid), requires_grad=True)
        self.wh = Tensor(xavier_normal(rng, n_hid, 4 * n_hid), requires_grad=True)
        b = np.zeros(4 * n_hid)
        b[n_hid:2 * n_hid] = 1.0
        self.b = Tensor(b, requires_grad=True)

    def __call__(self, x, h, c):
        gates = T.matmul(x, self.wx) + T.matmul(h, self.wh) + self.b
        H = self.n_hid
        i = T.sigmoid(gates[:, 0:H])
        f = T.sigmoid(gates[:, H:2 * H])
        g = T.tanh(gates[:, 2 * H:3 * H])
        o = T.sigmoid(gates[:, 3 * H:4 * H])
        c_next = f * c + i * g
        h_next = o * T.tanh(c_next)
        return h_next, c_next

    def params(self, prefix):
        return [(f"{prefix}.wx", self.wx), (f"{prefix}.wh", self.wh), (f"{prefix}.b", self.b)]


class BiLSTM:
    """Stacked bidirectional LSTM over [S, T, F] sequences -> [S, T, 2*n_hid]."""

    def __init__(self, rng, n_in, n_hid, n_layers=2):
        self.n_hid = n_hid
        self.layers = []
        dim = n_in
        for _ in range(n_layers):
            fwd = LSTMCell(rng, dim, n_hid)
            bwd = LSTMCell(rng, dim, n_hid)
            self.layers.append((fwd, bwd))
            dim = 2 * n_hid

    def _run(self, cell, steps):
        S = steps[0].shape[0]
        h = Tensor(np.zeros((S, self.n_hid)))
        c = Tensor(np.zeros((S, self.n_hid)))
        outs = []
        for x in steps:
            h, c = cell(x, h, c)
            outs.append(h)
        return outs

    def __call__(self, x):
        steps = [x[:, t, :] for t in range(x.shape[1])]
        for fwd, bwd in self.layers:
            f_out = self._run(fwd, steps)
            b_out = self._run(bwd, steps[::-1])[::-1]
            steps = [T.concat([f, b], axis=1) for f, b in zip(f_out, b_out)]
        stacked = T.concat([T.reshape(s, (s.shape[0], 1, s.shape[1])) for s in steps], axis=1)
        return stacked

    def params(self, prefix):
        out = []
        for i, (fwd, bwd) in enumerate(self.layers):
            out += fwd.params(f"{prefix}.l{i}.fwd")
            out += bwd.params(f"{prefix}.l{i}.bwd")
        return out


# ---------------------------------------------------------------------------
# Checkpoints: one JSON header line, then raw little-endian float64 buffers
# concatenated in header order.
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "cdlab-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, named_params, hyper=None, rng_state=None):
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in named_params],
        "hyper": hyper or {},
        "rng_state": rng_state,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for _, p in named_params:
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (header dict, {name: float64 array})."""
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"bad checkpoint header: {e}") from None
        if header.get("format") != CHECKPOINT_FORMAT:
            raise FormatError("not a cdlab checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {header.get('version')}")
        blob = f.read()
    arrays = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        chunk = blob[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise FormatError("checkpoint truncated")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += 8 * n
    if offset != len(blob):
        raise FormatError("checkpoint has trailing bytes")
    return header, arrays


def assign_params(named_params, arrays):
    for name, p in named_params:
        if name not in arrays:
            raise FormatError(f"checkpoint missing parameter {name!r}")
        if arrays[name].shape != p.shape:
            raise FormatError(f"shape mismatch for {name!r}")
        p.data = arrays[name].copy()
        if p.requires_grad:
            p.grad = np.zeros_like(p.data)


def params_fingerprint(named_params):
    """Order-sensitive hash of all parameter values (frozen-weights checks)."""
    import hashlib
    h = hashlib.sha256()
    for name, p in named_params:
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()
