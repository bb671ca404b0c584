"""Command-line entry point: ``deltaformer <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from .config import ARCHS, FUNNEL_OUT_MODES, build_configs, canonical_arch, config_hash, parse_config_text
from .errors import ConfigurationError, DeltaError, ReportIOError

log = logging.getLogger("deltaformer")

# look-back = horizon = 100, split into 5 patches; 300 epochs lets delta approach its loss floor
KEYRETRIEVAL_DEFAULTS = {"lookback": 100, "horizon": 100, "patch_len": 20, "d_patch": 16, "epochs": 300,
                         "learning_rate": 3e-3, "batch_size": 32}

ALL_GRADCHECK = [("delta", m) for m in FUNNEL_OUT_MODES] + [
    (a, "variable-gate") for a in ARCHS if a != "delta"
]


def parse_grid(text: str, kind=int) -> list:
    """``a,b,c`` or ``start:stop:xK`` (geometric) or ``start:stop:step`` (arithmetic, inclusive)."""
    text = text.strip()
    try:
        if ":" not in text:
            return [kind(v) for v in text.split(",") if v.strip()]
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError
        start, stop = kind(parts[0]), kind(parts[1])
        step = parts[2].strip()
        out = []
        if step.startswith("x"):
            factor = kind(step[1:])
            if factor <= 1:
                raise ValueError
            v = start
            while v <= stop:
                out.append(v)
                v = v * factor
        else:
            inc = kind(step)
            if inc <= 0:
                raise ValueError
            n = int(round((stop - start) / inc))
            out = [kind(round(start + i * inc, 12)) for i in range(n + 1) if start + i * inc <= stop + 1e-12]
        if not out:
            raise ValueError
        return out
    except ValueError:
        raise ConfigurationError(f"cannot parse grid {text!r} (use a,b,c or start:stop:xK or start:stop:step)") \
            from None


def _archs(text: str) -> list[str]:
    return [canonical_arch(a.strip()) for a in text.split(",") if a.strip()]


def _configs(args, defaults=None, **overrides):
    """Defaults < config file < command-line flags (< ``DELTA_SEED``)."""
    values = {k: str(v) for k, v in (defaults or {}).items()}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                values.update(parse_config_text(fh.read()))
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc.strerror}") from exc
    for key in ("seed", "epochs", "lookback", "horizon", "patch_len", "d_patch", "layers",
                "expansion_factor", "funnel_out_mode", "learning_rate", "batch_size",
                "max_train_windows", "max_eval_windows"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = v
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    return build_configs(values, **overrides)


def _manifest(command, args, mc=None, tc=None, data_checksum="", **extra):
    from .report import RunManifest

    configs = [c for c in (mc, tc) if c is not None]
    seed = (tc or mc).seed if configs else getattr(args, "seed", None)
    return RunManifest(command, config_hash(*configs) if configs else "", seed, data_checksum,
                       extra={"config": {type(c).__name__: dataclasses.asdict(c) for c in configs}, **extra})


def _out(args, name: str) -> str:
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        raise ReportIOError(f"cannot create output directory {args.out}: {exc.strerror}") from exc
    return os.path.join(args.out, name)


def _load(args):
    from .data import load_csv_dataset

    columns = [c.strip() for c in args.columns.split(",")] if getattr(args, "columns", None) else None
    return load_csv_dataset(args.data, columns=columns)


# -- subcommands ---------------------------------------------------------------

def cmd_train(args) -> int:
    from .baselines import build_model
    from .report import emit_report
    from .train import evaluate, prepare, save_checkpoint, train

    ds = _load(args)
    mc, tc = _configs(args, n_vars=ds.n_vars, arch=args.arch)
    model = build_model(mc)
    data = prepare(ds, mc.lookback, mc.horizon, tc.global_zscore)
    result = train(model, data, tc)
    rows = evaluate(model, data, limit=tc.max_eval_windows)
    man = _manifest("train", args, mc, tc, ds.checksum, dataset=ds.name, notes=ds.notes)
    man.outputs = ["checkpoint.npz", "metrics.json"]
    save_checkpoint(_out(args, "checkpoint.npz"), model, {"data_checksum": ds.checksum})
    results = {"dataset": ds.name, "arch": mc.arch, "parameters": model.parameter_count(),
               "best_epoch": result.best_epoch, "history": result.history, "test": rows}
    emit_report(results, _out(args, "metrics.json"), man.finish())
    print(json.dumps({"arch": mc.arch, "horizon": mc.horizon, "test_mse": rows[0]["mse"],
                      "test_mae": rows[0]["mae"]}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .report import emit_report
    from .train import evaluate, load_checkpoint

    model, ckpt = load_checkpoint(args.checkpoint)
    ds = _load(args)
    if ds.n_vars != model.config.n_vars and model.config.arch == "time_only":
        raise ConfigurationError(f"checkpoint expects {model.config.n_vars} variables, data has {ds.n_vars}")
    rows = evaluate(model, ds, limit=args.max_eval_windows or 0)
    man = _manifest("eval", args, model.config, None, ds.checksum, checkpoint_checksum=ckpt["checksum"])
    man.outputs = ["eval.json"]
    emit_report({"dataset": ds.name, "arch": model.config.arch, "test": rows}, _out(args, "eval.json"),
                man.finish())
    print(json.dumps({"test_mse": rows[0]["mse"], "test_mae": rows[0]["mae"]}, sort_keys=True))
    return 0


def cmd_keyretrieval(args) -> int:
    from .report import emit_report
    from .synth import KeyRetrievalSpec, key_retrieval_sweep

    mc, tc = _configs(args, KEYRETRIEVAL_DEFAULTS)
    spec = KeyRetrievalSpec(n_keys=args.n_keys, n_steps=args.steps, lookback=mc.lookback,
                            horizon=mc.horizon)
    seeds = parse_grid(args.seeds)
    result = key_retrieval_sweep(_archs(args.archs), parse_grid(args.c_grid), spec, mc, tc, seeds)
    man = _manifest("synth-keyretrieval", args, mc, tc, spec=dataclasses.asdict(spec), seeds=seeds)
    man.outputs = ["keyretrieval.csv", "keyretrieval.json"]
    cols = ["arch", "C_or_p", "seed", "metric", "value"]
    emit_report(result.rows, _out(args, "keyretrieval.csv"), man, cols)
    emit_report(result.summary, _out(args, "keyretrieval.json"), man.finish())
    print(json.dumps(result.summary, sort_keys=True))
    return 0


def cmd_noise_sweep(args) -> int:
    from .report import emit_report
    from .synth import noise_sweep

    ds = _load(args)
    mc, tc = _configs(args)
    seeds = parse_grid(args.seeds)
    props = parse_grid(args.p_grid, float)
    result = noise_sweep(_archs(args.archs), ds, props, mc, tc, args.sigma, seeds)
    man = _manifest("noise-sweep", args, mc, tc, ds.checksum, sigma=args.sigma, seeds=seeds,
                    proportions=props)
    man.outputs = ["noise.csv", "noise.json"]
    emit_report(result.rows, _out(args, "noise.csv"), man, ["arch", "C_or_p", "seed", "metric", "value"])
    emit_report(result.summary, _out(args, "noise.json"), man.finish())
    print(json.dumps(result.summary, sort_keys=True))
    return 0


def cmd_profile(args) -> int:
    from .profiler import check_counters, profile_scaling
    from .report import RunManifest, emit_report

    archs = _archs(args.archs)
    reports, summary = profile_scaling(archs, parse_grid(args.c_grid), args.patch_len * args.patches,
                                       args.patch_len, args.batch, args.mode, args.d_patch,
                                       int(args.budget_mb * 2 ** 20))
    if args.check_counters:
        rows = check_counters(archs, modes=FUNNEL_OUT_MODES)
        summary["counter_check"] = {"points": len(rows), "mismatches": [r for r in rows if not r["match"]]}
    man = RunManifest("profile", seed=0, extra={"args": {k: v for k, v in vars(args).items()
                                                         if k not in ("func", "out")}})
    man.outputs = ["scaling.csv", "scaling.json"]
    emit_report([r.row() for r in reports], _out(args, "scaling.csv"), man,
                ["arch", "C", "L", "P", "analytic_elements", "peak_bytes", "params"])
    emit_report(summary, _out(args, "scaling.json"), man.finish())
    print(json.dumps({a: e["exponent"] for a, e in summary["archs"].items()}, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck_model
    from .report import RunManifest, emit_report

    if args.arch == "all":
        cases = ALL_GRADCHECK
    else:
        arch = canonical_arch(args.arch)
        modes = FUNNEL_OUT_MODES if (arch == "delta" and args.mode == "all") else \
            [args.mode if args.mode != "all" else "variable-gate"]
        cases = [(arch, m) for m in modes]
    seed = int(os.environ.get("DELTA_SEED") or args.seed)
    results = []
    for arch, mode in cases:
        r = gradcheck_model(arch, seed, mode)
        results.append({"arch": r.arch, "mode": r.mode, "params": r.n_params,
                        "max_rel_error": r.max_rel_error, "passed": r.passed})
        print(f"{r.arch:<28} {r.mode:<14} max_rel_error={r.max_rel_error:.3e} "
              f"{'ok' if r.passed else 'FAIL'}")
    if args.out:
        man = RunManifest("gradcheck", seed=seed)
        man.outputs = ["gradcheck.json"]
        emit_report({"threshold": 1e-4, "cases": results}, _out(args, "gradcheck.json"), man.finish())
    return 0 if all(r["passed"] for r in results) else 1


# -- parser ---------------------------------------------------------------------

def _common(p, data=False, model=True):
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="extra config override")
    if data:
        p.add_argument("--data", required=True, help="CSV with a timestamp first column")
        p.add_argument("--columns", help="comma-separated variable columns to keep")
    if model:
        p.add_argument("--epochs", type=int)
        p.add_argument("--lookback", type=int)
        p.add_argument("--horizon", type=int)
        p.add_argument("--patch-len", dest="patch_len", type=int)
        p.add_argument("--d-patch", dest="d_patch", type=int)
        p.add_argument("--layers", type=int)
        p.add_argument("--expansion-factor", dest="expansion_factor", type=float)
        p.add_argument("--funnel-out-mode", dest="funnel_out_mode", choices=FUNNEL_OUT_MODES)
        p.add_argument("--lr", dest="learning_rate", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--max-train-windows", dest="max_train_windows", type=int)
        p.add_argument("--max-eval-windows", dest="max_eval_windows", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deltaformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and report test metrics")
    _common(p, data=True)
    p.add_argument("--arch", help="architecture (default: delta, or the config file's arch)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--columns")
    p.add_argument("--out", default="runs")
    p.add_argument("--max-eval-windows", dest="max_eval_windows", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth-keyretrieval", help="key-retrieval attention-allocation sweep")
    _common(p)
    p.add_argument("--archs", default="delta,variate_only,full")
    p.add_argument("--c-grid", default="32,64,128,256")
    p.add_argument("--n-keys", type=int, default=8)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_keyretrieval)

    p = sub.add_parser("noise-sweep", help="structured-noise robustness sweep")
    _common(p, data=True)
    p.add_argument("--archs", default="delta,variate_only,full")
    p.add_argument("--p-grid", default="0,0.2,0.4,0.6,0.8")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("profile", help="attention-element and peak-memory scaling")
    p.add_argument("--archs", default="delta,full,variate_only")
    p.add_argument("--c-grid", default="256:4096:x2")
    p.add_argument("--patch-len", type=int, default=16)
    p.add_argument("--patches", type=int, default=6, help="L/P, held fixed")
    p.add_argument("--d-patch", type=int, default=64)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--mode", choices=FUNNEL_OUT_MODES, default="variable-gate")
    p.add_argument("--budget-mb", type=float, default=400.0,
                   help="skip points whose attention-score buffer exceeds this")
    p.add_argument("--check-counters", action="store_true")
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--arch", default="all")
    p.add_argument("--mode", choices=(*FUNNEL_OUT_MODES, "all"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional directory for gradcheck.json")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except DeltaError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return 7


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
