"""Shared forecaster shell: RevIN around an architecture-specific encoder."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ShapeError
from .nn import AttentionTrace, Module
from .preprocess import revin_denormalize, revin_normalize
from .tensor import Tensor


class Forecaster(Module):
    """Maps a batch of windows ``(B, C, L)`` to forecasts ``(B, C, tau)``.

    Subclasses implement :meth:`encode` (normalized window -> normalized
    forecast) and :meth:`core` (the attention block(s) alone, used by the
    memory profiler).
    """

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        self._trace = AttentionTrace()
        self._rng = np.random.default_rng(config.seed)
        if config.revin_affine:
            self.revin_gamma = Tensor(np.ones(config.n_vars), requires_grad=True)
            self.revin_beta = Tensor(np.zeros(config.n_vars), requires_grad=True)
        else:
            self.revin_gamma = self.revin_beta = None

    @property
    def trace(self) -> AttentionTrace:
        return self._trace

    def encode(self, xn: Tensor) -> Tensor:
        raise NotImplementedError

    def core(self, tokens: Tensor) -> Tensor:
        raise NotImplementedError

    def core_input_shape(self, batch: int, n_vars: int) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, window) -> Tensor:
        x = T.as_tensor(window)
        cfg = self.config
        if x.ndim != 3 or x.shape[-1] != cfg.lookback:
            raise ShapeError(f"expected windows of shape (B, C, {cfg.lookback}), got {x.shape}")
        if cfg.revin:
            xn, stats = revin_normalize(x, self.revin_gamma, self.revin_beta, cfg.revin_eps)
            return revin_denormalize(self.encode(xn), stats)
        return self.encode(x)

    __call__ = forward

    def predict(self, window) -> np.ndarray:
        with T.no_grad():
            return self.forward(window).data
