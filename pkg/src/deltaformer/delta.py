"""DELTAformer: funnel-in attention, delegate token attention, funnel-out attention.

Shapes used throughout (single head):

* ``M``  patches, ``(B, C, N, d)`` with ``N = L / P``
* ``Mt`` projected patches grouped by position, ``(B, N, C, d')``
* ``D``  learnable delegate tokens, ``(N, d')``

Funnel-in at position ``i`` is attention with ``D_i`` as the only query and
the ``C`` patch rows as keys/values. Delegate attention is full self-attention
over the ``N`` conditioned delegates. Funnel-out sends ``D^delta_i`` back to
each variable's patch; see :data:`FUNNEL_OUT_MODES` for the three readings of
the normalization axis.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigurationError
from .forecaster import Forecaster
from .nn import AttentionTrace, FeedForward, Linear, Module, ResidualMLPNorm, attention, merge_heads, split_heads
from .preprocess import make_patches
from .tensor import Tensor

FUNNEL_OPS = ("attention", "mlp", "linear")


class _Projections(Module):
    def __init__(self, rng, d: int):
        self.q = Linear(rng, d, d, bias=False)
        self.k = Linear(rng, d, d, bias=False)
        self.v = Linear(rng, d, d, bias=False)


class DeltaLayer(Module):
    """One funnel-in / delegate / funnel-out layer with univariate pre-conditioning."""

    def __init__(self, rng: np.random.Generator, config: ModelConfig, index: int = 0,
                 funnel_in: str = "attention", funnel_out: str = "attention"):
        if funnel_in not in FUNNEL_OPS or funnel_out not in FUNNEL_OPS:
            raise ConfigurationError(f"unknown funnel operation: in={funnel_in!r} out={funnel_out!r}")
        d, dd, r = config.d_patch, config.d_delegate, config.mlp_ratio
        self._index = index
        self._mode = config.funnel_out_mode
        self._heads = config.heads
        self._outer_residual = config.outer_residual
        self._funnel_in_op = funnel_in
        self._funnel_out_op = funnel_out

        self.precondition = FeedForward(rng, d, r * d)
        self.in_projection = Linear(rng, d, dd)
        self.delegates = Tensor(rng.normal(0.0, 0.02, size=(config.n_patches, dd)), requires_grad=True)
        self.funnel_in_update = ResidualMLPNorm(rng, dd, r)
        self.delegate_update = ResidualMLPNorm(rng, dd, r)
        self.funnel_out_update = ResidualMLPNorm(rng, dd, r)
        self.out_projection = Linear(rng, dd, d)

        self.funnel_in_net = None
        self.funnel_out_net = None
        if funnel_in == "mlp":
            self.funnel_in_net = FeedForward(rng, dd, r * dd)
        elif funnel_in == "linear":
            self.funnel_in_net = Linear(rng, dd, dd)
        if funnel_out == "mlp":
            self.funnel_out_net = FeedForward(rng, 2 * dd, r * dd, dd)
        elif funnel_out == "linear":
            self.funnel_out_net = Linear(rng, 2 * dd, dd)

        self.proj_in = self.proj_delegate = self.proj_out = None
        if config.learned_projections:
            self.proj_in = _Projections(rng, dd)
            self.proj_delegate = _Projections(rng, dd)
            self.proj_out = _Projections(rng, dd)

    # -- stages ---------------------------------------------------------------
    def funnel_in(self, mt: Tensor, trace: AttentionTrace | None = None) -> Tensor:
        """``(B, N, C, d')`` -> pre-MLP delegate update ``(B, N, d')``."""
        b, n, c, dd = mt.shape
        if self.funnel_in_net is not None:
            return self.funnel_in_net(mt.mean(axis=2))
        q = self.delegates.reshape(n, 1, dd)
        k = v = mt
        if self.proj_in is not None:
            q, k, v = self.proj_in.q(q), self.proj_in.k(mt), self.proj_in.v(mt)
        out = attention(q, k, v, heads=self._heads, trace=trace, layer=self._index, stage="funnel_in")
        return out.reshape(b, n, dd)

    def delegate_attention(self, dprime: Tensor, trace: AttentionTrace | None = None) -> Tensor:
        """``(B, N, d')`` -> pre-MLP temporal update ``(B, N, d')``."""
        q = k = v = dprime
        if self.proj_delegate is not None:
            p = self.proj_delegate
            q, k, v = p.q(dprime), p.k(dprime), p.v(dprime)
        return attention(q, k, v, heads=self._heads, trace=trace, layer=self._index, stage="delegate")

    def funnel_out(self, mt: Tensor, ddelta: Tensor, trace: AttentionTrace | None = None) -> Tensor:
        """Redistribute delegates to patches: ``(B, N, C, d')``, pre-MLP."""
        b, n, c, dd = mt.shape
        if self.funnel_out_net is not None:
            spread = T.broadcast_to(ddelta.reshape(b, n, 1, dd), (b, n, c, dd))
            return self.funnel_out_net(T.concat([mt, spread], axis=-1))
        q, k, v = mt, ddelta, ddelta
        if self.proj_out is not None:
            q, k, v = self.proj_out.q(mt), self.proj_out.k(ddelta), self.proj_out.v(ddelta)
        if self._mode == "all-delegates":
            k = k.reshape(b, 1, n, dd)
            v = v.reshape(b, 1, n, dd)
            return attention(q, k, v, heads=self._heads, trace=trace, layer=self._index, stage="funnel_out")
        h = self._heads
        qh = split_heads(q, h)                          # (B, N, [h,] C, dh)
        kh = split_heads(k.reshape(b, n, 1, dd), h)     # (B, N, [h,] 1, dh)
        vh = split_heads(v.reshape(b, n, 1, dd), h)
        logits = (qh @ kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(dd // h))  # (..., C, 1)
        # variable-gate normalizes across the C patches; singleton is the literal
        # per-patch softmax over a single key and is identically 1.
        axis = -2 if self._mode == "variable-gate" else -1
        w = T.softmax(logits, axis=axis)
        if trace is not None:
            trace.count(self._index, "funnel_out", w.size // w.shape[0])
            trace.record(self._index, "funnel_out", w.data, axis=axis)
        return merge_heads(w * vh, h)

    def stages(self, m: Tensor, trace: AttentionTrace | None = None) -> dict[str, Tensor]:
        """Run the layer on ``(B, C, N, d)`` patches and return every intermediate."""
        x = self.precondition(m)
        mt = self.in_projection(x).transpose(0, 2, 1, 3)
        s: dict[str, Tensor] = {"preconditioned": x, "projected": mt}
        s["funnel_in_pre"] = self.funnel_in(mt, trace)
        s["delegates_in"] = self.funnel_in_update(s["funnel_in_pre"])
        s["delegate_pre"] = self.delegate_attention(s["delegates_in"], trace)
        s["delegates_out"] = self.delegate_update(s["delegate_pre"])
        s["funnel_out_pre"] = self.funnel_out(mt, s["delegates_out"], trace)
        s["final"] = self.funnel_out_update(s["funnel_out_pre"])
        out = self.out_projection(s["final"]).transpose(0, 2, 1, 3)
        if self._outer_residual:
            out = out + m
        s["out"] = out
        return s

    def __call__(self, m: Tensor, trace: AttentionTrace | None = None) -> Tensor:
        x = self.precondition(m)
        mt = self.in_projection(x).transpose(0, 2, 1, 3)
        del x
        d_in = self.funnel_in_update(self.funnel_in(mt, trace))
        d_delta = self.delegate_update(self.delegate_attention(d_in, trace))
        del d_in
        final = self.funnel_out_update(self.funnel_out(mt, d_delta, trace))
        out = self.out_projection(final).transpose(0, 2, 1, 3)
        return out + m if self._outer_residual else out


class DeltaFormer(Forecaster):
    """Patch embedding, stacked :class:`DeltaLayer`, per-variable linear head."""

    def __init__(self, config: ModelConfig, funnel_in: str = "attention", funnel_out: str = "attention"):
        super().__init__(config)
        cfg = self.config
        rng = self._rng
        self.embedding = Linear(rng, cfg.patch_len, cfg.d_patch)
        self.layers = [DeltaLayer(rng, cfg, i, funnel_in, funnel_out) for i in range(cfg.layers)]
        self.head = Linear(rng, cfg.n_patches * cfg.d_patch, cfg.horizon)

    def embed(self, xn: Tensor) -> Tensor:
        return self.embedding(make_patches(xn, self.config.patch_len).tokens)

    def core(self, tokens: Tensor) -> Tensor:
        for layer in self.layers:
            tokens = layer(tokens, self._trace)
        return tokens

    def core_input_shape(self, batch: int, n_vars: int) -> tuple[int, ...]:
        return (batch, n_vars, self.config.n_patches, self.config.d_patch)

    def encode(self, xn: Tensor) -> Tensor:
        b, c, _ = xn.shape
        tokens = self.core(self.embed(xn))
        return self.head(tokens.reshape(b, c, -1))


def delegate_width(d_patch: int, expansion_factor: float) -> int:
    return max(1, round(expansion_factor * d_patch))
