"""Attention complexity accounting and peak-memory scaling measurements."""
from __future__ import annotations

import gc
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig, canonical_arch
from .errors import ConfigurationError, ContractError, ResourceError
from .tensor import Tensor

PROFILE_D_PATCH = 64
PROFILE_PATCHES = 6


def analytic_attention_elements(arch: str, C: int, L: int, P: int,
                                mode: str = "variable-gate") -> int:
    """Attention score elements per layer and sample (one head)."""
    arch = canonical_arch(arch)
    if P <= 0 or L % P:
        raise ConfigurationError(f"look-back {L} is not a multiple of patch length {P}")
    n = L // P
    if arch == "delta":
        if mode == "all-delegates":
            return C * n + n * n + C * n * n
        if mode in ("variable-gate", "singleton"):
            return 2 * C * n + n * n
        raise ConfigurationError(f"unknown funnel-out mode {mode!r}")
    if arch == "variate_only":
        return C * C
    if arch == "full":
        return (C * n) ** 2
    if arch == "time_only":
        return L * L
    if arch in ("delta_mlp_funnel", "delta_linear_funnel"):
        return n * n
    # one attention funnel plus delegate attention
    return C * n + n * n


def runtime_attention_elements(arch: str, C: int, L: int, P: int, mode: str = "variable-gate",
                               d_patch: int = 4, seed: int = 0) -> dict[int, int]:
    """Score elements counted by the instrumented attention, per layer, for one sample."""
    from .baselines import build_model

    cfg = ModelConfig(arch=arch, n_vars=C, lookback=L, patch_len=P, d_patch=d_patch, horizon=1,
                      layers=2, funnel_out_mode=mode, seed=seed)
    model = build_model(cfg)
    model.trace.clear()
    x = np.random.default_rng(seed).normal(size=(1, C, L))
    model.predict(x)
    return model.trace.elements_per_layer()


def _profile_config(arch: str, C: int, L: int, P: int, mode: str, d_patch: int) -> ModelConfig:
    return ModelConfig(arch=arch, n_vars=C, lookback=L, patch_len=P, d_patch=d_patch, horizon=1,
                       layers=1, funnel_out_mode=mode, revin=False, seed=0)


def measure_peak_memory(arch: str, C: int, L: int, P: int, batch: int = 1,
                        mode: str = "variable-gate", d_patch: int = PROFILE_D_PATCH) -> tuple[int, int]:
    """Peak tensor bytes of forward+backward through one core block.

    Parameters are allocated before counting starts, so the figure covers
    activations, attention scores and gradients. Returns ``(peak_bytes, params)``.
    """
    from .baselines import build_model

    cfg = _profile_config(arch, C, L, P, mode, d_patch)
    try:
        model = build_model(cfg)
        shape = model.core_input_shape(batch, C)
        tokens = np.random.default_rng(0).normal(size=shape)
        gc.collect()
        with T.profiling() as counter:
            x = Tensor(tokens, requires_grad=True)
            out = model.core(x)
            loss = T.tsum(out * out)
            T.backward(loss)
            peak = counter.peak_bytes
            del x, out, loss
        model.zero_grad()
    except MemoryError as exc:
        raise ResourceError(f"out of memory profiling arch={cfg.arch} C={C} L={L} P={P} "
                            f"batch={batch} mode={mode}") from exc
    return int(peak), model.parameter_count()


@dataclass
class ScalingFit:
    slope: float
    intercept: float
    residual: float
    n_points: int


def fit_scaling_exponent(points) -> ScalingFit:
    """Least-squares slope of ``ln(bytes)`` against ``ln(C)``; residual is the RMS misfit."""
    pts = [(float(c), float(b)) for c, b in points]
    if len(pts) < 3:
        raise ContractError(f"need at least 3 points for a scaling fit, got {len(pts)}")
    if any(c <= 0 or b <= 0 or not math.isfinite(c) or not math.isfinite(b) for c, b in pts):
        raise ContractError("scaling fit needs positive, finite C and byte values")
    x = np.log([c for c, _ in pts])
    y = np.log([b for _, b in pts])
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return ScalingFit(float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(resid ** 2))), len(pts))


@dataclass
class ComplexityReport:
    arch: str
    C: int
    L: int
    P: int
    analytic_elements: int
    peak_bytes: int
    params: int

    def row(self) -> dict:
        return {"arch": self.arch, "C": self.C, "L": self.L, "P": self.P,
                "analytic_elements": self.analytic_elements, "peak_bytes": self.peak_bytes,
                "params": self.params}


def estimated_score_bytes(arch: str, C: int, L: int, P: int, mode: str = "variable-gate") -> int:
    return 8 * analytic_attention_elements(arch, C, L, P, mode)


def profile_scaling(archs, c_grid, L: int | None = None, P: int = 16, batch: int = 1,
                    mode: str = "variable-gate", d_patch: int = PROFILE_D_PATCH,
                    score_budget_bytes: int = 400 * 2 ** 20):
    """Measure every (arch, C) point and fit per-architecture exponents.

    A point whose single attention-score buffer would exceed
    ``score_budget_bytes`` is skipped (this caps the quadratic full archetype).
    Returns ``(reports, summary)``.
    """
    L = P * PROFILE_PATCHES if L is None else L
    reports: list[ComplexityReport] = []
    summary: dict = {"L": L, "P": P, "batch": batch, "d_patch": d_patch, "mode": mode,
                     "score_budget_bytes": score_budget_bytes, "archs": {}}
    for arch in archs:
        arch = canonical_arch(arch)
        skipped = []
        for C in sorted(c_grid):
            if estimated_score_bytes(arch, C, L, P, mode) > score_budget_bytes:
                skipped.append(C)
                continue
            peak, params = measure_peak_memory(arch, C, L, P, batch, mode, d_patch)
            reports.append(ComplexityReport(arch, C, L, P, analytic_attention_elements(arch, C, L, P, mode),
                                            peak, params))
        pts = [(r.C, r.peak_bytes) for r in reports if r.arch == arch]
        entry: dict = {"measured_C": [c for c, _ in pts], "skipped_C": skipped}
        if len(pts) >= 3:
            fit = fit_scaling_exponent(pts)
            entry.update(exponent=fit.slope, residual=fit.residual)
        else:
            entry.update(exponent=None, residual=None)
        summary["archs"][arch] = entry
    return reports, summary


def check_counters(archs, c_grid=(1, 2, 4, 8, 16), patch_counts=(1, 2, 4, 8), P: int = 2,
                   modes=("variable-gate",)) -> list[dict]:
    """Compare runtime counters with the closed forms; one row per grid point."""
    rows = []
    for arch in archs:
        arch = canonical_arch(arch)
        for mode in (modes if arch == "delta" else ("variable-gate",)):
            for C in c_grid:
                for n in patch_counts:
                    L = n * P
                    expected = analytic_attention_elements(arch, C, L, P, mode)
                    counted = runtime_attention_elements(arch, C, L, P, mode)
                    rows.append({"arch": arch, "mode": mode, "C": C, "n_patches": n,
                                 "analytic": expected, "runtime": counted,
                                 "match": all(v == expected for v in counted.values()) and len(counted) == 2})
    return rows


__all__ = [
    "ComplexityReport", "ScalingFit", "analytic_attention_elements", "check_counters",
    "fit_scaling_exponent", "measure_peak_memory", "profile_scaling", "runtime_attention_elements",
]
