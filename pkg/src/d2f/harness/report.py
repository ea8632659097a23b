"""CSV / JSON reports with speedups recomputed from the raw per-arm numbers."""

from __future__ import annotations

import csv
import json
from pathlib import Path

COLUMNS = (
    "arm",
    "decoder",
    "checkpoint",
    "block_size",
    "max_len",
    "vanilla_steps",
    "tau_add",
    "tau_act",
    "tau_conf",
    "examples",
    "exact_match",
    "forward_passes",
    "tokens_per_forward",
    "tokens_per_second",
    "mean_latency_ms",
    "mean_gen_length",
    "tps_speedup",
    "pass_speedup",
)
DERIVED = ("tps_speedup", "pass_speedup")


def _ratio(num, den) -> str:
    if not num or not den:
        return ""
    return f"{round(num / den, 2)}x"


def with_speedups(rows: list[dict], baseline: str | None = None) -> list[dict]:
    """Rows in column order plus speedups against the ``baseline`` arm.

    ``tps_speedup`` is arm TPS over baseline TPS and ``pass_speedup`` is
    baseline forward passes over arm forward passes. Without a baseline name
    the first row is the reference. Any stored speedup values are ignored.
    """
    if not rows:
        return []
    ref = rows[0]
    if baseline is not None:
        named = [r for r in rows if r.get("arm") == baseline]
        if not named:
            raise ValueError(f"baseline arm {baseline!r} not among {[r.get('arm') for r in rows]}")
        ref = named[0]
    out = []
    for r in rows:
        row = {c: r.get(c) for c in COLUMNS if c not in DERIVED}
        row["tps_speedup"] = _ratio(r.get("tokens_per_second"), ref.get("tokens_per_second"))
        row["pass_speedup"] = _ratio(ref.get("forward_passes"), r.get("forward_passes"))
        out.append(row)
    return out


def emit_report(rows: list[dict], fmt: str, path: str | Path, baseline: str | None = None) -> Path:
    """Write ``rows`` as CSV or JSON; an empty set gives a header-only file."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"format must be csv or json, got {fmt!r}")
    path = Path(path)
    if not path.parent.exists():
        raise OSError(f"output directory {path.parent} does not exist")
    table = with_speedups(rows, baseline)
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=COLUMNS)
                writer.writeheader()
                for row in table:
                    writer.writerow({k: "" if v is None else v for k, v in row.items()})
        else:
            doc = {"columns": list(COLUMNS), "baseline": baseline or (rows[0]["arm"] if rows else None), "rows": table}
            path.write_text(json.dumps(doc, indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc
    return path


def read_report(path: str | Path) -> list[dict]:
    """Rows from a report or an ``arms.json`` file, numbers restored for CSV."""
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        return doc["rows"] if isinstance(doc, dict) else doc
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: _number(v) for k, v in r.items()} for r in rows]


def _number(v: str):
    if v == "":
        return None
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v
