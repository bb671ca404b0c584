"""Model / training configuration and the flat ``key = value`` config grammar."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigurationError

ARCHS = (
    "delta",
    "variate_only",
    "full",
    "time_only",
    "delta_mlp_funnel",
    "delta_linear_funnel",
    "delta_mixed_funnel_in_attn",
    "delta_mixed_funnel_out_attn",
)
ARCH_ALIASES = {"variate": "variate_only", "variate-only": "variate_only", "time": "time_only",
                "time-only": "time_only"}
FUNNEL_OUT_MODES = ("variable-gate", "all-delegates", "singleton")


def canonical_arch(name: str) -> str:
    arch = ARCH_ALIASES.get(name, name).replace("-", "_")
    if arch not in ARCHS:
        raise ConfigurationError(f"unknown architecture {name!r}; expected one of {', '.join(ARCHS)}")
    return arch


@dataclass
class ModelConfig:
    arch: str = "delta"
    n_vars: int = 7
    lookback: int = 96
    horizon: int = 96
    patch_len: int = 16
    d_patch: int = 64
    layers: int = 2
    expansion_factor: float = 1.5
    funnel_out_mode: str = "variable-gate"
    learned_projections: bool = False
    outer_residual: bool = False
    heads: int = 1
    mlp_ratio: int = 2
    revin: bool = True
    revin_affine: bool = False
    revin_eps: float = 1e-5
    seed: int = 0

    @property
    def n_patches(self) -> int:
        return self.lookback // self.patch_len

    @property
    def d_delegate(self) -> int:
        return max(1, round(self.expansion_factor * self.d_patch))

    def validate(self) -> "ModelConfig":
        bad = []
        try:
            self.arch = canonical_arch(self.arch)
        except ConfigurationError:
            bad.append(f"arch={self.arch!r}")
        for name in ("n_vars", "lookback", "horizon", "patch_len", "d_patch", "layers", "heads",
                     "mlp_ratio"):
            if int(getattr(self, name)) < 1:
                bad.append(f"{name}={getattr(self, name)} (must be >= 1)")
        if self.patch_len >= 1 and self.lookback % self.patch_len:
            bad.append(f"lookback={self.lookback} not divisible by patch_len={self.patch_len}")
        if self.expansion_factor < 0.25:
            bad.append(f"expansion_factor={self.expansion_factor} (must be >= 0.25)")
        if self.funnel_out_mode not in FUNNEL_OUT_MODES:
            bad.append(f"funnel_out_mode={self.funnel_out_mode!r}")
        if self.heads >= 1:
            if self.d_patch % self.heads:
                bad.append(f"d_patch={self.d_patch} not divisible by heads={self.heads}")
            if self.arch.startswith("delta") and self.d_delegate % self.heads:
                bad.append(f"delegate width {self.d_delegate} not divisible by heads={self.heads}")
        if self.revin_eps <= 0:
            bad.append(f"revin_eps={self.revin_eps}")
        if bad:
            raise ConfigurationError("invalid model config: " + "; ".join(bad))
        return self


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 10
    loss: str = "MSE"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_train_windows: int = 0
    max_eval_windows: int = 0
    global_zscore: bool = True

    def validate(self) -> "TrainConfig":
        bad = []
        if self.epochs < 1:
            bad.append(f"epochs={self.epochs}")
        if self.batch_size < 1:
            bad.append(f"batch_size={self.batch_size}")
        if not self.learning_rate >= 0:
            bad.append(f"learning_rate={self.learning_rate}")
        if self.loss.upper() != "MSE":
            bad.append(f"loss={self.loss!r} (only MSE)")
        if bad:
            raise ConfigurationError("invalid train config: " + "; ".join(bad))
        return self


def _coerce(value: str, kind, key: str):
    if kind is bool or kind == "bool":
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
    try:
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {value!r}") from exc
    return value.strip()


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"config line {lineno}: empty key")
        out[key] = value
    return out


def build_configs(values: dict[str, str] | None = None, env: dict | None = None,
                  **overrides) -> tuple[ModelConfig, TrainConfig]:
    """Build both configs from parsed key/values; unknown keys are an error.

    ``seed`` feeds both configs. ``DELTA_SEED`` in ``env`` wins over the file
    and over ``overrides``.
    """
    values = dict(values or {})
    values.update({k: str(v) for k, v in overrides.items() if v is not None})
    env = os.environ if env is None else env
    if env.get("DELTA_SEED"):
        values["seed"] = env["DELTA_SEED"]
    model_fields = {f.name: f.type for f in fields(ModelConfig)}
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    unknown = sorted(set(values) - set(model_fields) - set(train_fields))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    m_kwargs, t_kwargs = {}, {}
    for key, value in values.items():
        if key in model_fields:
            m_kwargs[key] = _coerce(value, model_fields[key], key)
        if key in train_fields:
            t_kwargs[key] = _coerce(value, train_fields[key], key)
    return ModelConfig(**m_kwargs).validate(), TrainConfig(**t_kwargs).validate()


def config_hash(*configs) -> str:
    payload = [dataclasses.asdict(c) for c in configs]
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
