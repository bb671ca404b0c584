"""Central finite-difference check of taped gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import Tensor


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(f: Callable[[], Tensor], params: Tensor | Sequence[Tensor],
                            h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max coordinate-wise relative error between ``backward`` and central differences.

    ``f`` takes no arguments and closes over ``params``; it is re-evaluated
    after each in-place perturbation ``p +/- h``. ``floor`` keeps coordinates
    with near-zero gradient from dividing by float noise.
    """
    if isinstance(params, Tensor):
        params = [params]
    if h <= 0:
        raise ValueError("h must be positive")
    T.zero_grads(params)
    grads = T.backward(f())
    analytic = [np.array(grads.get(p, np.zeros(p.shape))) for p in params]
    worst = 0.0
    with T.no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            if not np.shares_memory(flat, p.data):
                raise RuntimeError("finite_difference_check needs contiguous parameter buffers")
            a = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                worst = max(worst, relative_error(a[i], (fp - fm) / (2.0 * h), floor))
    return worst


@dataclass
class GradcheckResult:
    arch: str
    mode: str
    n_params: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def gradcheck_model(arch: str, seed: int = 0, funnel_out_mode: str = "variable-gate", *,
                    n_vars: int = 3, lookback: int = 8, patch_len: int = 4, d_patch: int = 4,
                    horizon: int = 4, layers: int = 2, batch: int = 2, h: float = 1e-5,
                    **overrides) -> GradcheckResult:
    """End-to-end MSE gradient check of every parameter of a small model."""
    from .baselines import build_model

    cfg = ModelConfig(arch=arch, n_vars=n_vars, lookback=lookback, patch_len=patch_len,
                      d_patch=d_patch, horizon=horizon, layers=layers, seed=seed,
                      funnel_out_mode=funnel_out_mode, **overrides)
    model = build_model(cfg)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(size=(batch, n_vars, lookback))
    y = rng.normal(size=(batch, n_vars, horizon))
    params = model.parameters()
    err = finite_difference_check(lambda: T.mse_loss(model(x), y), params, h=h)
    return GradcheckResult(cfg.arch, funnel_out_mode, model.parameter_count(), err)
