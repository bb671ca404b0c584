"""Parameter containers, seeded initialization and the attention primitive."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter container; parameters are discovered by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        T.zero_grads(self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=T.DTYPE)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def uniform_param(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = uniform_param(rng, (d_in, d_out), d_in)
        self.bias = uniform_param(rng, (d_out,), d_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class FeedForward(Module):
    """Two-layer GELU network applied to the last axis."""

    def __init__(self, rng, d_in: int, d_hidden: int, d_out: int | None = None):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out if d_out is not None else d_in)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


class ResidualMLPNorm(Module):
    """``LayerNorm(x + MLP(x))``, the update that closes every attention stage."""

    def __init__(self, rng, d: int, hidden_ratio: int = 2):
        self.mlp = FeedForward(rng, d, hidden_ratio * d)
        self.norm = LayerNorm(d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(x + self.mlp(x))


# -- attention instrumentation -----------------------------------------------

@dataclass
class TraceEntry:
    layer: int
    stage: str
    weights: np.ndarray
    axis: int = -1


@dataclass
class AttentionTrace:
    """Softmax weights recorded per layer and stage.

    ``score_counts`` is always filled (it is cheap); weight arrays are kept
    only while ``enabled``.
    """

    enabled: bool = False
    entries: list[TraceEntry] = field(default_factory=list)
    score_counts: list[tuple[int, str, int]] = field(default_factory=list)

    def clear(self) -> None:
        self.entries.clear()
        self.score_counts.clear()

    def count(self, layer: int, stage: str, elements_per_instance: int) -> None:
        self.score_counts.append((layer, stage, int(elements_per_instance)))

    def record(self, layer: int, stage: str, weights: np.ndarray, axis: int = -1) -> None:
        if self.enabled:
            self.entries.append(TraceEntry(layer, stage, np.array(weights), axis))

    def elements_per_layer(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for layer, _, n in self.score_counts:
            out[layer] = out.get(layer, 0) + n
        return out

    def rows(self):
        """Yield ``(entry, rows)`` where rows is 2-D: one softmax row per line."""
        for e in self.entries:
            w = np.moveaxis(e.weights, e.axis, -1)
            yield e, w.reshape(-1, w.shape[-1])

    def to_records(self) -> list[dict]:
        """JSON-ready records ``{layer, stage, position, weights}``.

        ``position`` indexes the second axis of the stored weights (patch
        position for DELTA stages, query token otherwise); the batch axis is
        averaged out.
        """
        records = []
        for e in self.entries:
            w = np.moveaxis(e.weights, e.axis, -1).mean(axis=0)
            if w.ndim == 1:
                w = w[None]
            for pos in range(w.shape[0]):
                records.append({
                    "layer": e.layer,
                    "stage": e.stage,
                    "position": pos,
                    "weights": w[pos].tolist(),
                })
        return records


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., S, d) -> (..., heads, S, d/heads)."""
    if heads == 1:
        return x
    *lead, s, d = x.shape
    x = x.reshape(*lead, s, heads, d // heads)
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return x.transpose(axes)


def merge_heads(x: Tensor, heads: int) -> Tensor:
    if heads == 1:
        return x
    nd = x.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    x = x.transpose(axes)
    *lead, s, h, dh = x.shape
    return x.reshape(*lead, s, h * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, *, heads: int = 1, trace: AttentionTrace | None = None,
              layer: int = 0, stage: str = "attn") -> Tensor:
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d)) v`` over the last two axes.

    The leading axis is the batch; the score count recorded is per instance.
    """
    d = q.shape[-1] // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = (qh @ kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    w = T.softmax(scores, axis=-1)
    del scores
    if trace is not None:
        trace.count(layer, stage, w.size // w.shape[0])
        trace.record(layer, stage, w.data)
    return merge_heads(w @ vh, heads)


def param_table(module: Module) -> list[tuple[str, tuple[int, ...]]]:
    return [(name, p.shape) for name, p in module.named_parameters()]
