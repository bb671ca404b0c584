"""Variate-wise patching, reversible instance normalization and chronological splits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, ShapeError
from .tensor import Tensor


@dataclass
class PatchGrid:
    """Non-overlapping patches of shape ``(..., C, L/P, width)``.

    ``width`` is ``P`` before embedding and ``d_patch`` after.
    """

    tokens: Tensor
    patch_len: int
    lookback: int
    n_vars: int

    @property
    def n_patches(self) -> int:
        return self.lookback // self.patch_len


def make_patches(window, patch_len: int) -> PatchGrid:
    """Split each variable's look-back window into ``L/P`` consecutive patches.

    Token ``(c, i)`` holds time-steps ``[i*P, (i+1)*P)`` of variable ``c``.
    """
    x = T.as_tensor(window)
    if x.ndim < 2:
        raise ShapeError(f"make_patches expects (..., C, L), got {x.shape}")
    *lead, c, length = x.shape
    if patch_len < 1 or length % patch_len:
        raise ConfigurationError(f"look-back {length} is not divisible by patch length {patch_len}")
    tokens = x.reshape(*lead, c, length // patch_len, patch_len)
    return PatchGrid(tokens, patch_len, length, c)


def unpatch(grid: PatchGrid) -> Tensor:
    *lead, c, n, p = grid.tokens.shape
    return grid.tokens.reshape(*lead, c, n * p)


def embed_patches(grid: PatchGrid, weight: Tensor, bias: Tensor | None = None) -> PatchGrid:
    """Apply one shared linear map ``P -> d_patch`` to every patch."""
    if weight.shape[0] != grid.tokens.shape[-1]:
        raise ShapeError(
            f"embedding weight {weight.shape} does not accept patches of width {grid.tokens.shape[-1]}"
        )
    out = grid.tokens @ weight
    if bias is not None:
        out = out + bias
    return PatchGrid(out, grid.patch_len, grid.lookback, grid.n_vars)


# -- RevIN -----------------------------------------------------------------

@dataclass
class RevinStats:
    mu: np.ndarray
    sigma: np.ndarray
    eps: float = 1e-5
    gamma: Tensor | None = None
    beta: Tensor | None = None


def revin_normalize(window, gamma: Tensor | None = None, beta: Tensor | None = None,
                    eps: float = 1e-5) -> tuple[Tensor, RevinStats]:
    """Standardize each (instance, variable) row over time, then apply the affine map.

    Statistics are treated as constants for differentiation.
    """
    x = T.as_tensor(window)
    mu = x.data.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    out = (x - mu) * (1.0 / sigma)
    if gamma is not None:
        out = out * gamma.reshape(-1, 1)
    if beta is not None:
        out = out + beta.reshape(-1, 1)
    return out, RevinStats(mu, sigma, eps, gamma, beta)


def revin_denormalize(pred, stats: RevinStats | None) -> Tensor:
    """Restore scale: ``sigma * pred + mu`` per instance and variable."""
    if stats is None:
        raise ContractError("revin_denormalize called without statistics from revin_normalize")
    y = T.as_tensor(pred)
    if y.shape[:-1] != stats.mu.shape[:-1]:
        raise ContractError(
            f"prediction leading shape {y.shape[:-1]} does not match statistics {stats.mu.shape[:-1]}"
        )
    return y * stats.sigma + stats.mu


# -- splits and windows -------------------------------------------------------

@dataclass
class SplitRanges:
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]
    empty: list[str] = field(default_factory=list)

    def __getitem__(self, name: str) -> tuple[int, int]:
        return getattr(self, name)

    @property
    def boundaries(self) -> tuple[int, int]:
        return self.train[1], self.val[1]


def split_ranges(n_steps: int, ratios=(0.7, 0.1, 0.2)) -> SplitRanges:
    """Contiguous chronological ranges; train and test sizes are floored, val takes the rest."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigurationError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(math.floor(n_steps * ratios[0] + 1e-9))
    n_test = int(math.floor(n_steps * ratios[2] + 1e-9))
    n_val = n_steps - n_train - n_test
    b1, b2 = n_train, n_train + n_val
    ranges = SplitRanges((0, b1), (b1, b2), (b2, n_steps))
    ranges.empty = [name for name in ("train", "val", "test") if ranges[name][1] <= ranges[name][0]]
    return ranges


def window_starts(ranges: SplitRanges, split: str, lookback: int, horizon: int,
                  overlap_lookback: bool = True) -> np.ndarray:
    """Start indices of every (look-back, horizon) window whose targets lie in ``split``.

    With ``overlap_lookback`` the look-back of the first val/test windows may
    reach into the preceding split (targets never do); without it windows
    stay entirely inside the split.
    """
    a, b = ranges[split]
    if b <= a:
        return np.zeros(0, dtype=np.int64)
    first = max(0, a - lookback) if overlap_lookback else a
    last = b - lookback - horizon
    if last < first:
        raise ConfigurationError(
            f"{split} split [{a}, {b}) is too short for look-back {lookback} + horizon {horizon}"
        )
    return np.arange(first, last + 1, dtype=np.int64)


def train_val_test_split(n_steps: int, ratios, lookback: int, horizon: int,
                         overlap_lookback: bool = True) -> SplitRanges:
    """Split and check that every non-empty split yields at least one window."""
    ranges = split_ranges(n_steps, ratios)
    for name in ("train", "val", "test"):
        if name not in ranges.empty:
            window_starts(ranges, name, lookback, horizon, overlap_lookback)
    return ranges


def gather_windows(values: np.ndarray, starts: np.ndarray, lookback: int,
                   horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``x`` (B, C, L) and ``y`` (B, C, tau) for the given start indices."""
    span = np.lib.stride_tricks.sliding_window_view(values, lookback + horizon, axis=1)
    block = span[:, starts, :].transpose(1, 0, 2)
    return np.ascontiguousarray(block[..., :lookback]), np.ascontiguousarray(block[..., lookback:])


def zscore_stats(values: np.ndarray, train: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    seg = values[:, train[0]:train[1]]
    mu = seg.mean(axis=1, keepdims=True)
    sd = seg.std(axis=1, keepdims=True)
    return mu, np.where(sd > 0, sd, 1.0)
