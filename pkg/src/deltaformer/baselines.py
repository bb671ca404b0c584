"""Archetype comparators: variate-only, full and time-only transformers, and funnel ablations.

All share RevIN, the loss and the optimizer with :class:`~deltaformer.delta.DeltaFormer`;
they differ only in how tokens are formed and which tokens attend to which.
"""
from __future__ import annotations

from . import tensor as T
from .config import ModelConfig, canonical_arch
from .delta import DeltaFormer
from .errors import ConfigurationError
from .forecaster import Forecaster
from .nn import AttentionTrace, FeedForward, LayerNorm, Linear, Module, attention
from .preprocess import make_patches
from .tensor import Tensor


class TransformerBlock(Module):
    """Post-norm encoder block with learned Q/K/V/O projections."""

    def __init__(self, rng, d: int, mlp_ratio: int = 2, heads: int = 1, index: int = 0):
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.o = Linear(rng, d, d)
        self.norm1 = LayerNorm(d)
        self.ff = FeedForward(rng, d, mlp_ratio * d)
        self.norm2 = LayerNorm(d)
        self._heads = heads
        self._index = index

    def __call__(self, x: Tensor, trace: AttentionTrace | None = None, stage: str = "self") -> Tensor:
        a = attention(self.q(x), self.k(x), self.v(x), heads=self._heads, trace=trace,
                      layer=self._index, stage=stage)
        x = self.norm1(x + self.o(a))
        return self.norm2(x + self.ff(x))


class _BlockStack(Forecaster):
    stage = "self"

    def _build_blocks(self):
        cfg = self.config
        self.blocks = [TransformerBlock(self._rng, cfg.d_patch, cfg.mlp_ratio, cfg.heads, i)
                       for i in range(cfg.layers)]

    def core(self, tokens: Tensor) -> Tensor:
        for block in self.blocks:
            tokens = block(tokens, self._trace, self.stage)
        return tokens


class VariateOnlyTransformer(_BlockStack):
    """One token per variable (``P = L``); attention is ``C x C``."""

    stage = "variates"

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        cfg = self.config
        self.embedding = Linear(self._rng, cfg.lookback, cfg.d_patch)
        self._build_blocks()
        self.head = Linear(self._rng, cfg.d_patch, cfg.horizon)

    def core_input_shape(self, batch, n_vars):
        return (batch, n_vars, self.config.d_patch)

    def encode(self, xn: Tensor) -> Tensor:
        return self.head(self.core(self.embedding(xn)))


class FullTransformer(_BlockStack):
    """All ``C * L/P`` patch tokens attend to each other."""

    stage = "tokens"

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        cfg = self.config
        self.embedding = Linear(self._rng, cfg.patch_len, cfg.d_patch)
        self._build_blocks()
        self.head = Linear(self._rng, cfg.n_patches * cfg.d_patch, cfg.horizon)

    def core_input_shape(self, batch, n_vars):
        return (batch, n_vars * self.config.n_patches, self.config.d_patch)

    def encode(self, xn: Tensor) -> Tensor:
        b, c, _ = xn.shape
        n, d = self.config.n_patches, self.config.d_patch
        tokens = self.embedding(make_patches(xn, self.config.patch_len).tokens)
        tokens = self.core(tokens.reshape(b, c * n, d))
        return self.head(tokens.reshape(b, c, n * d))


class TimeOnlyTransformer(_BlockStack):
    """One token per time-step holding all variables; attention is ``L x L``."""

    stage = "time"

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        cfg = self.config
        self.embedding = Linear(self._rng, cfg.n_vars, cfg.d_patch)
        self._build_blocks()
        self.readout = Linear(self._rng, cfg.d_patch, cfg.n_vars)
        self.head = Linear(self._rng, cfg.lookback, cfg.horizon)

    def core_input_shape(self, batch, n_vars):
        return (batch, self.config.lookback, self.config.d_patch)

    def encode(self, xn: Tensor) -> Tensor:
        if xn.shape[1] != self.config.n_vars:
            raise ConfigurationError(
                f"time-only model built for {self.config.n_vars} variables, got {xn.shape[1]}"
            )
        tokens = self.core(self.embedding(xn.swapaxes(1, 2)))     # (B, L, d)
        per_step = self.readout(tokens).swapaxes(1, 2)            # (B, C, L)
        return self.head(per_step)


FUNNEL_VARIANTS = {
    ("attention", "attention"): "delta",
    ("mlp", "mlp"): "delta_mlp_funnel",
    ("linear", "linear"): "delta_linear_funnel",
    ("attention", "mlp"): "delta_mixed_funnel_in_attn",
    ("mlp", "attention"): "delta_mixed_funnel_out_attn",
}
VARIANT_OPS = {arch: ops for ops, arch in FUNNEL_VARIANTS.items()}


def variant_arch(funnel_in: str, funnel_out: str) -> str:
    try:
        return FUNNEL_VARIANTS[(funnel_in, funnel_out)]
    except KeyError:
        raise ConfigurationError(
            f"unknown funnel variant in={funnel_in!r} out={funnel_out!r}; "
            f"known: {sorted(FUNNEL_VARIANTS)}"
        ) from None


def build_model(config: ModelConfig) -> Forecaster:
    """Instantiate the architecture named by ``config.arch`` (seeded by ``config.seed``)."""
    arch = canonical_arch(config.arch)
    config.arch = arch
    if arch in VARIANT_OPS:
        return DeltaFormer(config, *VARIANT_OPS[arch])
    if arch == "variate_only":
        return VariateOnlyTransformer(config)
    if arch == "full":
        return FullTransformer(config)
    if arch == "time_only":
        return TimeOnlyTransformer(config)
    raise ConfigurationError(f"no forward definition for {arch!r}")


def funnel_variant_forward(window, variant: tuple[str, str], config: ModelConfig) -> Tensor:
    """Forecast with the funnel ablation ``(funnel_in_op, funnel_out_op)``."""
    arch = variant_arch(*variant)
    cfg = ModelConfig(**{**vars(config), "arch": arch})
    return build_model(cfg)(T.as_tensor(window))
