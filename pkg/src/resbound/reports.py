"""Report bundles: CSV tables, a declarative JSON summary and a digest manifest.

Every summary value is an aggregate over one CSV column, so a bundle can be
re-checked from its own files.  Floats are written with ``repr`` (shortest
round-trip form), which is locale independent.
"""

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field

from . import __version__, rng
from .errors import DataError

TOOL = "resbound"
OPS = ("mean", "std", "min", "max", "sum", "count", "true_rate", "positive_rate")
TIMING_FILE = "timing.json"  # wall-clock only; excluded from digests


def format_cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item"):  # numpy scalar
        return format_cell(v.item())
    return str(v)


def parse_number(s):
    if s == "true":
        return 1.0
    if s == "false":
        return 0.0
    return float(s)


@dataclass
class Table:
    columns: tuple
    rows: list

    def to_csv(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.columns)
        for row in self.rows:
            if len(row) != len(self.columns):
                raise DataError(f"row has {len(row)} cells, expected {len(self.columns)}")
            wr.writerow([format_cell(v) for v in row])
        return buf.getvalue()


@dataclass(frozen=True)
class Aggregate:
    table: str
    column: str
    op: str
    where: tuple = ()  # ((column, value-as-written), ...)

    def to_dict(self):
        return {"table": self.table, "column": self.column, "op": self.op,
                "where": {k: v for k, v in self.where}}

    @classmethod
    def from_dict(cls, d):
        return cls(d["table"], d["column"], d["op"], tuple(sorted(d.get("where", {}).items())))


def compute_aggregate(header, rows, agg):
    """Evaluate ``agg`` over CSV text rows (lists of strings)."""
    if agg.op not in OPS:
        raise DataError(f"unknown aggregate op {agg.op!r}")
    pos = {c: i for i, c in enumerate(header)}
    for c in [agg.column] + [k for k, _ in agg.where]:
        if c not in pos:
            raise DataError(f"table {agg.table!r} has no column {c!r}")
    sel = [r for r in rows if all(r[pos[k]] == v for k, v in agg.where)]
    if agg.op == "count":
        return len(sel)
    if not sel:
        raise DataError(f"aggregate over {agg.table}.{agg.column} selects no rows")
    xs = [parse_number(r[pos[agg.column]]) for r in sel]
    n = len(xs)
    if agg.op == "mean":
        return math.fsum(xs) / n
    if agg.op == "std":  # population
        mu = math.fsum(xs) / n
        return math.sqrt(math.fsum((x - mu) ** 2 for x in xs) / n)
    if agg.op == "min":
        return min(xs)
    if agg.op == "max":
        return max(xs)
    if agg.op == "sum":
        return math.fsum(xs)
    if agg.op == "true_rate":
        return sum(x != 0 for x in xs) / n
    return sum(x > 0 for x in xs) / n


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: object
    inputs: dict = field(default_factory=dict)   # logical path -> sha256
    outputs: dict = field(default_factory=dict)  # file in bundle -> sha256
    wall_clock_s: float = 0.0
    tool_version: str = __version__
    rng_algorithm: str = rng.RNG_ALGORITHM

    def to_dict(self):
        return {"tool": TOOL, "tool_version": self.tool_version, "subcommand": self.subcommand,
                "config": self.config, "seed": self.seed, "rng_algorithm": self.rng_algorithm,
                "inputs": dict(sorted(self.inputs.items())), "outputs": dict(sorted(self.outputs.items()))}


@dataclass
class ReportBundle:
    manifest: RunManifest
    tables: dict       # name -> Table
    aggregates: dict   # summary field -> Aggregate
    extra_outputs: tuple = ()  # files already written into the bundle dir


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_inputs(role, path):
    """{role/relative-path: sha256} for a file, a volume base path or a directory tree."""
    out = {}
    if os.path.isdir(path):
        for root, dirs, files in os.walk(path):
            dirs.sort()
            for name in sorted(files):
                full = os.path.join(root, name)
                rel = os.path.relpath(full, path).replace(os.sep, "/")
                out[f"{role}/{rel}"] = sha256_file(full)
    elif os.path.isfile(path):
        out[f"{role}/{os.path.basename(path)}"] = sha256_file(path)
    else:
        found = False
        for ext in (".json", ".raw"):
            if os.path.isfile(path + ext):
                out[f"{role}/{os.path.basename(path)}{ext}"] = sha256_file(path + ext)
                found = True
        if not found:
            raise DataError(f"input not found: {path!r}")
    return out


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, sort_keys=True, indent=1, allow_nan=False)
        f.write("\n")


def emit_report(bundle, out_dir):
    if not bundle.tables:
        raise DataError("a report bundle needs at least one table")
    for name, t in bundle.tables.items():
        if not t.rows:
            raise DataError(f"table {name!r} is empty")
    os.makedirs(out_dir, exist_ok=True)
    texts = {f"{name}.csv": t.to_csv() for name, t in bundle.tables.items()}
    parsed = {name: list(csv.reader(io.StringIO(texts[f"{name}.csv"]))) for name in bundle.tables}
    summary = {"tables": {}, "aggregates": {}}
    for name, t in bundle.tables.items():
        summary["tables"][name] = {"file": f"{name}.csv", "columns": list(t.columns), "rows": len(t.rows)}
    for key, agg in bundle.aggregates.items():
        if agg.table not in parsed:
            raise DataError(f"aggregate {key!r} refers to unknown table {agg.table!r}")
        header, *rows = parsed[agg.table]
        summary["aggregates"][key] = {**agg.to_dict(), "value": compute_aggregate(header, rows, agg)}
    for fname, text in texts.items():
        with open(os.path.join(out_dir, fname), "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    _dump_json(summary, os.path.join(out_dir, "summary.json"))
    files = sorted(list(texts) + ["summary.json"] + list(bundle.extra_outputs))
    bundle.manifest.outputs = {f: sha256_file(os.path.join(out_dir, f)) for f in files}
    _dump_json(bundle.manifest.to_dict(), os.path.join(out_dir, "manifest.json"))
    _dump_json({"wall_clock_s": bundle.manifest.wall_clock_s}, os.path.join(out_dir, TIMING_FILE))
    return summary


@dataclass
class Verdict:
    mismatches: list

    @property
    def ok(self):
        return not self.mismatches


def verify_report(bundle_dir):
    """Recheck every output digest and every summary aggregate of a bundle."""
    paths = {n: os.path.join(bundle_dir, n) for n in ("manifest.json", "summary.json")}
    for n, p in paths.items():
        if not os.path.isfile(p):
            raise DataError(f"bundle is missing {n}")
    with open(paths["manifest.json"], encoding="utf-8") as f:
        manifest = json.load(f)
    with open(paths["summary.json"], encoding="utf-8") as f:
        summary = json.load(f)
    bad = []
    for fname, digest in sorted(manifest.get("outputs", {}).items()):
        p = os.path.join(bundle_dir, fname)
        if not os.path.isfile(p):
            bad.append(f"missing output {fname}")
        elif sha256_file(p) != digest:
            bad.append(f"digest mismatch: {fname}")
    if "summary.json" not in manifest.get("outputs", {}):
        bad.append("manifest does not cover summary.json")
    tables = {}
    for name, info in summary.get("tables", {}).items():
        p = os.path.join(bundle_dir, info["file"])
        if not os.path.isfile(p):
            bad.append(f"missing table {info['file']}")
            continue
        with open(p, encoding="utf-8", newline="") as f:
            tables[name] = list(csv.reader(f))
        if tables[name] and tables[name][0] != info["columns"]:
            bad.append(f"column order changed: {info['file']}")
        if len(tables[name]) - 1 != info["rows"]:
            bad.append(f"row count mismatch: {info['file']}")
    for key, spec in sorted(summary.get("aggregates", {}).items()):
        agg = Aggregate.from_dict(spec)
        if agg.table not in tables:
            bad.append(f"aggregate {key}: table {agg.table} unavailable")
            continue
        header, *rows = tables[agg.table]
        try:
            val = compute_aggregate(header, rows, agg)
        except (DataError, ValueError) as exc:
            bad.append(f"aggregate {key}: {exc}")
            continue
        claimed = spec.get("value")
        if not isinstance(claimed, (int, float)) or not math.isclose(val, claimed, rel_tol=1e-12, abs_tol=1e-15):
            bad.append(f"aggregate {key}: summary says {claimed!r}, tables give {val!r}")
    return Verdict(bad)
