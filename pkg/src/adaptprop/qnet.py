"""Small fully-connected network trained by hand-written backprop and plain SGD.

The same class backs the Q-network (7 outputs, squared TD loss on the taken
action) and the boundary regressor (2 outputs, L1 loss).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    output_dim: int
    hidden_dims: tuple[int, ...] = (256, 128)
    dropout_rate: float = 0.2
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("all layer sizes must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]


@dataclass
class OptimizerState:
    base_lr: float
    decay: float = 0.0
    step_count: int = 0

    @property
    def lr(self) -> float:
        """Inverse-time decay: ``base_lr / (1 + decay * step_count)``."""
        return self.base_lr / (1.0 + self.decay * self.step_count)


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    output: np.ndarray | None = None
    batched: bool = True


class Network:
    def __init__(self, cfg: NetworkConfig, weights=None, biases=None):
        self.cfg = cfg
        dt = np.dtype(cfg.dtype)
        sizes = cfg.layer_sizes
        if weights is None:
            rng = np.random.default_rng(cfg.seed)
            weights, biases = [], []
            for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
                biases.append(np.zeros(fan_out))
        self.weights = [np.array(w, dtype=dt) for w in weights]
        self.biases = [np.array(b, dtype=dt) for b in biases]
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if self.weights[i].shape != (fan_in, fan_out) or self.biases[i].shape != (fan_out,):
                raise ValueError(f"layer {i} has shape {self.weights[i].shape}, "
                                 f"expected {(fan_in, fan_out)}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "Network":
        return Network(self.cfg, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def load_from(self, other: "Network") -> None:
        for dst, src in zip(self.weights + self.biases, other.weights + other.biases):
            dst[...] = src

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, x, train: bool = False, rng=None) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=self.weights[0].dtype)
        batched = x.ndim == 2
        a = x if batched else x[None, :]
        if a.shape[1] != self.cfg.input_dim:
            raise ValueError(f"expected {self.cfg.input_dim} inputs, got {a.shape[1]}")
        p = self.cfg.dropout_rate
        if train and p > 0 and rng is None:
            raise ValueError("train-mode dropout needs a random source")
        cache = ForwardCache(batched=batched)
        last = self.n_layers - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            cache.inputs.append(a)
            z = a @ W + b
            if i == last:
                a = z
                break
            h = np.maximum(z, 0)
            mask = None
            if train and p > 0:
                # inverted dropout: expectation matches eval mode
                mask = (rng.random(h.shape) >= p).astype(h.dtype) / (1.0 - p)
                h = h * mask
            cache.pre.append(z)
            cache.masks.append(mask)
            a = h
        cache.output = a
        return (a if batched else a[0]), cache

    def predict(self, x) -> np.ndarray:
        return self.forward(x, train=False)[0]

    def _backprop(self, cache: ForwardCache, dout: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        grads = [None] * self.n_layers
        delta = dout
        for i in range(self.n_layers - 1, -1, -1):
            grads[i] = (cache.inputs[i].T @ delta, delta.sum(axis=0))
            if i > 0:
                delta = delta @ self.weights[i].T
                if cache.masks[i - 1] is not None:
                    delta = delta * cache.masks[i - 1]
                delta = delta * (cache.pre[i - 1] > 0)
        return grads

    def backward_td(self, cache: ForwardCache, actions, targets):
        """Gradients of ``mean((Q(s, a) - target)**2) / 2`` over the batch.

        Only the output unit of the taken action receives error.
        Returns ``(grads, loss)``.
        """
        q = cache.output
        n = q.shape[0]
        actions = np.atleast_1d(np.asarray(actions))
        targets = np.atleast_1d(np.asarray(targets, dtype=q.dtype))
        if actions.shape != (n,) or targets.shape != (n,):
            raise ValueError("need one action and one target per batch row")
        if np.any(actions < 0) or np.any(actions >= self.cfg.output_dim):
            raise ValueError(f"action index out of range [0, {self.cfg.output_dim})")
        rows = np.arange(n)
        resid = q[rows, actions.astype(int)] - targets
        dout = np.zeros_like(q)
        dout[rows, actions.astype(int)] = resid / n
        loss = float(0.5 * np.mean(resid.astype(np.float64) ** 2))
        return self._backprop(cache, dout), loss

    def backward_l1(self, cache: ForwardCache, targets):
        """Gradients of ``mean(sum(|out - target|))``; the subgradient at a tie is 0."""
        out = cache.output
        targets = np.asarray(targets, dtype=out.dtype).reshape(out.shape)
        if out.shape[1] != 2:
            raise ValueError("L1 boundary loss needs a 2-output network")
        n = out.shape[0]
        diff = out - targets
        loss = float(np.mean(np.abs(diff.astype(np.float64)).sum(axis=1)))
        return self._backprop(cache, np.sign(diff) / n), loss


def sgd_step(net: Network, grads, opt: OptimizerState) -> Network:
    """Apply one plain SGD update in place and advance the decay counter."""
    if len(grads) != net.n_layers:
        raise ValueError("gradient set does not match network depth")
    for dW, db in grads:
        if not (np.all(np.isfinite(dW)) and np.all(np.isfinite(db))):
            raise FloatingPointError("non-finite gradient")
    lr = opt.lr
    for i, (dW, db) in enumerate(grads):
        if dW.shape != net.weights[i].shape or db.shape != net.biases[i].shape:
            raise ValueError(f"gradient shape mismatch in layer {i}")
        net.weights[i] -= lr * dW
        net.biases[i] -= lr * db
    opt.step_count += 1
    return net


_CKPT_MAGIC = b"TAPNET\x00\x01"
_BLOCK_DTYPE = np.dtype("<f4")


def encode_checkpoint(net: Network, opt: OptimizerState | None = None, meta: dict | None = None) -> bytes:
    cfg = asdict(net.cfg)
    cfg["hidden_dims"] = list(net.cfg.hidden_dims)
    header = {
        "config": cfg,
        "optimizer": asdict(opt) if opt is not None else None,
        "meta": meta or {},
        "blocks": [list(p.shape) for p in net.parameters()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(p, dtype=_BLOCK_DTYPE).tobytes() for p in net.parameters())
    return _CKPT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + body


def decode_checkpoint(data: bytes):
    """Inverse of :func:`encode_checkpoint`; returns ``(net, opt, meta)``."""
    if data[:8] != _CKPT_MAGIC:
        raise ValueError("not an adaptprop network checkpoint")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12:12 + hlen])
    offset = 12 + hlen
    arrays = []
    for shape in header["blocks"]:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype=_BLOCK_DTYPE, count=count, offset=offset).reshape(shape))
        offset += 4 * count
    if offset != len(data):
        raise ValueError("checkpoint size does not match its header")
    cfg = NetworkConfig(**header["config"])
    net = Network(cfg, arrays[0::2], arrays[1::2])
    opt = OptimizerState(**header["optimizer"]) if header["optimizer"] else None
    return net, opt, header["meta"]


def save_checkpoint(path, net: Network, opt: OptimizerState | None = None, meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(net, opt, meta))
    os.replace(tmp, path)


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
