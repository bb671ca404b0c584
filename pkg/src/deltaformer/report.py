"""Report emission: JSON summaries and CSV tables, each carrying its run manifest."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import re
import subprocess
from dataclasses import dataclass, field
from datetime import datetime, timezone

from . import __version__
from .errors import ContractError, ReportIOError

SCHEMA_VERSION = 1
# manifest fields that legitimately differ between otherwise identical runs
VOLATILE_KEYS = ("started_at", "finished_at")
CSV_PREFIX = "# "


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def artifact_version() -> str:
    """Package version, suffixed with the source commit when run from a checkout."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=here, capture_output=True,
                             text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return __version__
    sha = out.stdout.strip()
    return f"{__version__}+g{sha}" if out.returncode == 0 and sha else __version__


@dataclass
class RunManifest:
    command: str
    config_hash: str = ""
    seed: int | None = None
    data_checksum: str = ""
    version: str = field(default_factory=artifact_version)
    started_at: str = field(default_factory=_now)
    finished_at: str = ""
    outputs: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def finish(self) -> "RunManifest":
        self.finished_at = _now()
        return self

    def to_dict(self) -> dict:
        d = {"command": self.command, "config_hash": self.config_hash, "seed": self.seed,
             "data_checksum": self.data_checksum, "version": self.version,
             "started_at": self.started_at, "finished_at": self.finished_at or _now(),
             "outputs": list(self.outputs)}
        d.update(self.extra)
        return d


def _plain(obj):
    """Convert numpy scalars/arrays and tuples to JSON-native values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "tolist"):
        return _plain(obj.tolist())
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _open_for_write(path):
    try:
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
        return open(path, "w", newline="")
    except OSError as exc:
        raise ReportIOError(f"cannot write report {path}: {exc.strerror or exc}") from exc


def emit_json(results: dict, path, manifest: RunManifest | dict | None = None) -> str:
    man = manifest.to_dict() if isinstance(manifest, RunManifest) else dict(manifest or {})
    payload = {"schema_version": SCHEMA_VERSION, "manifest": man, "results": _plain(results)}
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    with _open_for_write(path) as fh:
        fh.write(text)
    return str(path)


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item"):
        return _cell(v.item())
    return v


def emit_csv(rows: list[dict], path, manifest: RunManifest | dict | None = None,
             columns: list[str] | None = None) -> str:
    """Write ``rows`` as CSV below ``# ``-prefixed schema and manifest lines.

    Floats are written with ``repr`` so a parse round-trips exactly.
    """
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns)
    man = manifest.to_dict() if isinstance(manifest, RunManifest) else dict(manifest or {})
    buf = io.StringIO()
    buf.write(f"{CSV_PREFIX}schema_version={SCHEMA_VERSION}\n")
    buf.write(f"{CSV_PREFIX}manifest={json.dumps(_plain(man), sort_keys=True)}\n")
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="raise")
    w.writeheader()
    for r in rows:
        w.writerow({k: _cell(v) for k, v in r.items()})
    with _open_for_write(path) as fh:
        fh.write(buf.getvalue())
    return str(path)


def emit_report(results, path, manifest: RunManifest | dict | None = None,
                columns: list[str] | None = None) -> str:
    """JSON for a summary mapping, CSV for a table (list of row dicts); chosen by extension."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".json":
        return emit_json(results, path, manifest)
    if ext == ".csv":
        if not isinstance(results, list):
            raise ContractError("CSV reports take a list of row mappings")
        return emit_csv(results, path, manifest, columns)
    raise ContractError(f"unsupported report extension {ext!r} (use .json or .csv)")


def _number(s: str):
    for kind in (int, float):
        try:
            return kind(s)
        except ValueError:
            pass
    return s


def read_report(path) -> dict:
    """Parse a report back into ``{"schema_version", "manifest", "results"}``."""
    with open(path, newline="") as fh:
        text = fh.read()
    if str(path).lower().endswith(".json"):
        return json.loads(text)
    meta, body = {}, []
    for line in text.splitlines(keepends=True):
        if line.startswith(CSV_PREFIX) and not body:
            key, _, value = line[len(CSV_PREFIX):].rstrip("\n").partition("=")
            meta[key] = json.loads(value)
        else:
            body.append(line)
    rows = [{k: _number(v) for k, v in r.items()} for r in csv.DictReader(io.StringIO("".join(body)))]
    return {"schema_version": meta.get("schema_version"), "manifest": meta.get("manifest", {}),
            "results": rows}


def strip_volatile(report: dict) -> dict:
    """Copy of a parsed report without timestamp fields, for equality checks."""
    out = dict(report)
    out["manifest"] = {k: v for k, v in report.get("manifest", {}).items() if k not in VOLATILE_KEYS}
    return out


_VOLATILE_RE = re.compile(r'("(?:%s)": ?)"[^"]*"' % "|".join(VOLATILE_KEYS))


def comparable_bytes(path) -> bytes:
    """File contents with timestamp values blanked, for byte-level determinism checks."""
    with open(path, "rb") as fh:
        text = fh.read().decode()
    return _VOLATILE_RE.sub(r'\1""', text).encode()
