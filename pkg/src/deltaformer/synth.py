"""Controlled studies: key-retrieval attention allocation and structured noise robustness."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ModelConfig, TrainConfig, canonical_arch
from .data import TimeSeriesDataset
from .errors import ConfigurationError, ContractError
from .nn import AttentionTrace
from .preprocess import gather_windows, zscore_stats

# stages whose softmax ranges over variables (or over tokens of all variables)
VARIABLE_STAGES = ("funnel_in", "variates", "tokens")


# -- key retrieval -----------------------------------------------------------

@dataclass
class KeyRetrievalSpec:
    n_vars: int = 64
    n_keys: int = 8
    n_steps: int = 2000
    lookback: int = 100
    horizon: int = 100
    seed: int = 0
    cycles_range: tuple[float, float] = (2.0, 20.0)
    key_indices: tuple[int, ...] | None = None

    def keys(self) -> np.ndarray:
        if self.key_indices is not None:
            return np.asarray(self.key_indices, dtype=np.int64)
        return np.arange(self.n_keys, dtype=np.int64)


def key_signal(t: np.ndarray, frequency: float, phase: float) -> np.ndarray:
    """``sin(2*pi*f*t + phase)``, ``f`` in cycles per time-step."""
    return np.sin(2.0 * np.pi * frequency * t + phase)


def gen_keyretrieval_dataset(spec: KeyRetrievalSpec) -> TimeSeriesDataset:
    """White-noise variables with ``n_keys`` sinusoidal key variables.

    Key frequencies are log-uniform in ``cycles_range`` cycles per look-back
    window, phases uniform; both are stored in ``dataset.meta``.
    """
    if spec.n_keys > spec.n_vars:
        raise ConfigurationError(f"n_keys={spec.n_keys} exceeds n_vars={spec.n_vars}")
    keys = spec.keys()
    if len(keys) != spec.n_keys or len(set(keys.tolist())) != len(keys) or (len(keys) and keys.max() >= spec.n_vars):
        raise ConfigurationError(f"invalid key indices {keys.tolist()} for {spec.n_vars} variables")
    rng = np.random.default_rng(spec.seed)
    values = rng.standard_normal((spec.n_vars, spec.n_steps))
    lo, hi = spec.cycles_range
    cycles = np.exp(rng.uniform(math.log(lo), math.log(hi), size=spec.n_keys))
    freqs = cycles / spec.lookback
    phases = rng.uniform(0.0, 2.0 * np.pi, size=spec.n_keys)
    t = np.arange(spec.n_steps, dtype=np.float64)
    for k, idx in enumerate(keys):
        values[idx] = key_signal(t, freqs[k], phases[k])
    mask = np.zeros(spec.n_vars, dtype=bool)
    mask[keys] = True
    return TimeSeriesDataset(
        f"keyretrieval-C{spec.n_vars}-k{spec.n_keys}-s{spec.seed}", values,
        [f"v{i}" for i in range(spec.n_vars)], "synthetic", (0.7, 0.1, 0.2), mask,
        meta={"key_indices": keys.tolist(), "frequencies": freqs.tolist(), "phases": phases.tolist()},
    )


def attention_mass_from_trace(trace: AttentionTrace, key_mask, first_layer_only: bool = False) -> float:
    """Mean share of softmax weight landing on key variables.

    Averages with equal weight over the recorded variable-attending entries
    (one per layer and forward call). A weight row over ``C * k`` tokens
    treats all ``k`` tokens of a key variable as keys; tokens are ordered
    variable-major.
    """
    key_mask = np.asarray(key_mask, dtype=bool)
    c = key_mask.size
    per_entry = []
    for entry, rows in trace.rows():
        if entry.stage not in VARIABLE_STAGES:
            continue
        if first_layer_only and entry.layer != 0:
            continue
        width = rows.shape[-1]
        if width % c:
            raise ContractError(f"weight rows of width {width} do not cover {c} variables")
        token_mask = np.repeat(key_mask, width // c)
        per_entry.append(float(rows[:, token_mask].sum(axis=1).mean()))
    if not per_entry:
        raise ContractError("trace holds no attention over variables")
    return float(np.mean(per_entry))


def measure_key_attention_mass(model, batch, key_mask, first_layer_only: bool = False) -> float:
    """Run ``batch`` through ``model`` and return the key attention mass in [0, 1].

    The model's trace must be enabled by the caller.
    """
    trace = model.trace
    if not trace.enabled:
        raise ContractError("attention trace is disabled; set model.trace.enabled = True")
    trace.clear()
    model.predict(batch)
    mass = attention_mass_from_trace(trace, key_mask, first_layer_only)
    trace.clear()
    return mass


# -- noise -------------------------------------------------------------------------

@dataclass
class NoiseSpec:
    proportion: float
    sigma: float = 1.0
    seed: int = 0


@dataclass
class NoiseSelection:
    variables: np.ndarray
    time_positions: np.ndarray

    @property
    def n_cells(self) -> int:
        return len(self.variables) * len(self.time_positions)


def _ceil_share(p: float, n: int) -> int:
    # round first so 0.6 * 10 -> 6, not 7
    return int(math.ceil(round(p * n, 9)))


def inject_noise(dataset: TimeSeriesDataset, spec: NoiseSpec, time_range: tuple[int, int] | None = None,
                 scale: np.ndarray | None = None) -> tuple[TimeSeriesDataset, NoiseSelection]:
    """Add ``Normal(0, (sigma * std_c)^2)`` to a seeded (variables x time-positions) grid.

    ``ceil(p*C)`` variables and ``ceil(p*T')`` positions are chosen, where
    ``T'`` is the length of ``time_range`` (whole series by default).
    ``std_c`` defaults to the per-variable training-split std.
    """
    p = float(spec.proportion)
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"noise proportion must be in [0, 1], got {p}")
    a, b = time_range if time_range is not None else (0, dataset.n_steps)
    rng = np.random.default_rng(spec.seed)
    nv = _ceil_share(p, dataset.n_vars)
    nt = _ceil_share(p, b - a)
    variables = np.sort(rng.choice(dataset.n_vars, size=nv, replace=False))
    times = np.sort(rng.choice(np.arange(a, b), size=nt, replace=False))
    selection = NoiseSelection(variables, times)
    values = dataset.values.copy()
    if nv and nt:
        if scale is None:
            _, scale = zscore_stats(dataset.values, dataset.ranges().train)
        std = np.asarray(scale).reshape(-1)[variables]
        noise = rng.standard_normal((nv, nt)) * (spec.sigma * std)[:, None]
        values[np.ix_(variables, times)] += noise
    out = dataset.with_values(values, suffix=f"+noise{p:g}")
    out.meta["noise"] = {"proportion": p, "sigma": spec.sigma, "seed": spec.seed,
                         "variables": variables.tolist(), "n_time_positions": int(nt)}
    return out, selection


# -- sweeps -------------------------------------------------------------------------

@dataclass
class SweepResult:
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, arch, point, seed, metric, value):
        self.rows.append({"arch": arch, "C_or_p": point, "seed": seed, "metric": metric,
                          "value": float(value)})


def _train_and_test(arch, model_cfg, train_cfg, dataset, seed, stats=None):
    from .baselines import build_model
    from .train import evaluate, prepare, train

    mc = replace(model_cfg, arch=canonical_arch(arch), n_vars=dataset.n_vars, seed=seed)
    tc = replace(train_cfg, seed=seed)
    model = build_model(mc)
    data = prepare(dataset, mc.lookback, mc.horizon, tc.global_zscore, stats)
    result = train(model, data, tc)
    row = evaluate(model, data, limit=tc.max_eval_windows)[0]
    return model, data, result, row


def key_retrieval_sweep(archs, n_vars_grid, spec: KeyRetrievalSpec, model_cfg: ModelConfig,
                        train_cfg: TrainConfig, seeds=(0, 1, 2), n_probe: int = 64) -> SweepResult:
    """Train each architecture per (C, seed) and record key attention mass and test MSE."""
    out = SweepResult()
    for c in n_vars_grid:
        for seed in seeds:
            ds = gen_keyretrieval_dataset(replace(spec, n_vars=c, seed=seed))
            for arch in archs:
                model, data, _, row = _train_and_test(arch, model_cfg, train_cfg, ds, seed)
                starts = data.starts("test")
                probe = starts[np.linspace(0, len(starts) - 1, min(n_probe, len(starts))).round().astype(int)]
                x, _ = gather_windows(data.values, probe, model.config.lookback, model.config.horizon)
                model.trace.enabled = True
                mass = measure_key_attention_mass(model, x, ds.key_mask)
                first = measure_key_attention_mass(model, x, ds.key_mask, first_layer_only=True)
                model.trace.enabled = False
                name = model.config.arch
                out.add(name, c, seed, "key_mass", mass)
                out.add(name, c, seed, "key_mass_first_layer", first)
                out.add(name, c, seed, "test_mse", row["mse"])
    for arch in {r["arch"] for r in out.rows}:
        for c in n_vars_grid:
            vals = [r["value"] for r in out.rows
                    if r["arch"] == arch and r["C_or_p"] == c and r["metric"] == "key_mass"]
            out.summary.setdefault(arch, {})[str(c)] = {"mean_key_mass": float(np.mean(vals)),
                                                        "per_seed": vals}
    out.summary["uniform_floor"] = {str(c): spec.n_keys / c for c in n_vars_grid}
    return out


def noise_sweep(archs, dataset: TimeSeriesDataset, proportions, model_cfg: ModelConfig,
                train_cfg: TrainConfig, sigma: float = 1.0, seeds=(0, 1, 2)) -> SweepResult:
    """Relative test-MSE growth from the clean baseline per architecture and noise level.

    Noise is injected (pre-normalization) into the train and validation span;
    the test span stays clean, and every level is normalized with the clean
    training statistics so MSE values share one scale.
    """
    out = SweepResult()
    ranges = dataset.ranges()
    stats = zscore_stats(dataset.values, ranges.train)
    span = (0, ranges.val[1])
    mse: dict[tuple, float] = {}
    for seed in seeds:
        for p in proportions:
            noisy, _ = inject_noise(dataset, NoiseSpec(p, sigma, seed), span, stats[1])
            for arch in archs:
                _, _, _, row = _train_and_test(arch, model_cfg, train_cfg, noisy, seed, stats)
                name = canonical_arch(arch)
                mse[(name, p, seed)] = row["mse"]
                out.add(name, p, seed, "test_mse", row["mse"])
    for (name, p, seed), value in sorted(mse.items(), key=lambda kv: (kv[0][0], kv[0][2], kv[0][1])):
        base = mse[(name, proportions[0], seed)] if proportions[0] == 0 else mse.get((name, 0.0, seed))
        if base is None:
            raise ConfigurationError("noise sweep needs p = 0 as its baseline level")
        out.add(name, p, seed, "growth", value / base - 1.0)
    for name in sorted({k[0] for k in mse}):
        out.summary[name] = {
            f"{p:g}": float(np.mean([r["value"] for r in out.rows if r["arch"] == name
                                    and r["C_or_p"] == p and r["metric"] == "growth"]))
            for p in proportions
        }
    return out
