"""Small layers, optimizers and checkpoint I/O on top of :mod:`autodiff`."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidInputError

CHECKPOINT_VERSION = 1

ACTIVATIONS = {
    None: lambda x: x,
    "identity": lambda x: x,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
}


def _uniform(rng, fan_in, shape):
    lim = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=shape)


class Module:
    """Parameter container; parameters are discovered from attributes."""

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {n: p.value.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise InvalidInputError(f"missing parameters: {sorted(missing)}")
        for n, p in params.items():
            v = np.asarray(state[n], dtype=np.float64)
            if v.shape != p.value.shape:
                raise InvalidInputError(f"{n}: shape {v.shape} != {p.value.shape}")
            p.value[...] = v


class Linear(Module):
    def __init__(self, n_in, n_out, rng, zero=False):
        self.n_in, self.n_out = n_in, n_out
        w = np.zeros((n_in, n_out)) if zero else _uniform(rng, n_in, (n_in, n_out))
        b = np.zeros(n_out) if zero else _uniform(rng, n_in, (n_out,))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x):
        if ad._val(x).shape[-1] != self.n_in:
            raise InvalidInputError(f"Linear expects last dim {self.n_in}, got {ad._val(x).shape}")
        return ad.matmul(x, self.weight) + self.bias


class MLP(Module):
    """One tanh hidden layer followed by a linear output and optional squash."""

    def __init__(self, n_in, hidden, n_out, rng, out_activation=None, zero_output=False):
        self.hidden = Linear(n_in, hidden, rng)
        self.out = Linear(hidden, n_out, rng, zero=zero_output)
        self.out_activation = out_activation

    def __call__(self, x):
        return ACTIVATIONS[self.out_activation](self.out(ad.tanh(self.hidden(x))))


class MinimalGatedCell(Module):
    """Single-gate recurrent cell.

    f  = sigmoid(x Wfx + h Wfh + bf)
    c  = tanh(x Wcx + (f * h) Wch + bc)
    h' = (1 - f) * h + f * c
    """

    def __init__(self, n_in, hidden, rng, zero=False):
        self.n_in, self.hidden_size = n_in, hidden
        fan = n_in + hidden
        init = (lambda s: np.zeros(s)) if zero else (lambda s: _uniform(rng, fan, s))
        self.w_fx = Tensor(init((n_in, hidden)), requires_grad=True)
        self.w_fh = Tensor(init((hidden, hidden)), requires_grad=True)
        self.b_f = Tensor(init((hidden,)), requires_grad=True)
        self.w_cx = Tensor(init((n_in, hidden)), requires_grad=True)
        self.w_ch = Tensor(init((hidden, hidden)), requires_grad=True)
        self.b_c = Tensor(init((hidden,)), requires_grad=True)

    def initial_state(self, batch):
        return Tensor(np.zeros((batch, self.hidden_size)))

    def __call__(self, x, h):
        xv, hv = ad._val(x), ad._val(h)
        if xv.shape[-1] != self.n_in or hv.shape[-1] != self.hidden_size or xv.shape[0] != hv.shape[0]:
            raise InvalidInputError(
                f"cell expects ({'B'}, {self.n_in}) and (B, {self.hidden_size}); got {xv.shape}, {hv.shape}"
            )
        f = ad.sigmoid(ad.matmul(x, self.w_fx) + ad.matmul(h, self.w_fh) + self.b_f)
        c = ad.tanh(ad.matmul(x, self.w_cx) + ad.matmul(f * h, self.w_ch) + self.b_c)
        return h + f * (c - h)


class SGD:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.value -= self.lr * p.grad
                p.grad[...] = 0.0


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.lr:
                p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad[...] = 0.0


def sgd_step(params, learning_rate):
    SGD(params, learning_rate).step()


def adam_step(params, learning_rate, moment_decays=(0.9, 0.999), epsilon=1e-8, state=None):
    """One Adam update; pass the returned optimizer back as ``state`` to continue."""
    opt = state if state is not None else Adam(params, learning_rate, moment_decays, epsilon)
    opt.lr = learning_rate
    opt.step()
    return opt


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def save_checkpoint(path, modules: dict, seed=None, extra=None):
    """Write ``<path>.bin`` (little-endian float64) and ``<path>.json`` manifest.

    ``modules`` maps a prefix to a Module; every parameter name in the
    manifest is ``prefix.param``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for prefix, mod in modules.items():
        for name, p in mod.named_parameters():
            arr = np.ascontiguousarray(p.value, dtype="<f8")
            entries.append({"name": f"{prefix}.{name}", "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.size
    data = b"".join(blobs)
    bin_path = path.with_suffix(".bin")
    bin_path.write_bytes(data)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "seed": seed,
        "dtype": "float64-le",
        "binary": bin_path.name,
        "sha1": git_blob_hash(data),
        "parameters": entries,
        "extra": extra or {},
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_checkpoint(path, modules: dict):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {manifest.get('version')!r}")
    data = path.with_suffix(".bin").read_bytes()
    if manifest.get("sha1") and git_blob_hash(data) != manifest["sha1"]:
        raise InvalidInputError(f"{path.with_suffix('.bin')}: content hash does not match manifest")
    flat = np.frombuffer(data, dtype="<f8")
    values = {}
    for e in manifest["parameters"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        values[e["name"]] = flat[e["offset"] : e["offset"] + n].reshape(e["shape"])
    for prefix, mod in modules.items():
        plen = len(prefix) + 1
        mod.load_state_dict({k[plen:]: v for k, v in values.items() if k.startswith(prefix + ".")})
    return manifest
