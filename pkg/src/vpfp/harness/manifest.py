"""Run manifests: check records, atomic JSON writes and the cross-run report."""

import csv
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

SCHEMA = "vpfp-manifest/1"
MANIFEST_NAME = "manifest.json"
# fields that legitimately differ between otherwise identical runs
VOLATILE = ("timing", "jobs", "out_dir")


class ManifestError(ValueError):
    """A manifest is missing, unreadable or of a different schema."""


def _clean(x):
    """JSON-safe copy: numpy scalars become Python numbers, non-finite floats become strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if hasattr(x, "item") and callable(x.item) and getattr(x, "ndim", 0) == 0:
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


@dataclass(frozen=True)
class Check:
    """One acceptance check: ``value relation tolerance`` must hold."""

    name: str
    criterion: int
    passed: bool
    value: object
    tolerance: object = None
    relation: str = ""
    note: str = ""

    @classmethod
    def compare(cls, name, criterion, value, relation, tolerance, note=""):
        ops = {
            "<=": lambda a, b: a <= b,
            "<": lambda a, b: a < b,
            ">=": lambda a, b: a >= b,
            ">": lambda a, b: a > b,
            "==": lambda a, b: a == b,
        }
        ok = value is not None and bool(ops[relation](value, tolerance))
        if isinstance(value, float) and math.isnan(value):
            ok = False
        return cls(name, criterion, ok, value, tolerance, relation, note)

    @classmethod
    def flag(cls, name, criterion, passed, note=""):
        return cls(name, criterion, bool(passed), bool(passed), True, "==", note)


@dataclass
class Manifest:
    experiment: str
    version: str
    config: dict
    seed: int
    seed_source: str
    jobs: int
    status: str = "running"
    error: str | None = None
    checks: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    out_dir: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "complete" and all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = SCHEMA
        return _clean(d)

    def reproducible_part(self) -> dict:
        """Everything that must match bit for bit between runs with the same config and seed."""
        d = self.to_dict()
        for key in VOLATILE:
            d.pop(key, None)
        return d

    def write(self, out_dir) -> Path:
        """Write ``manifest.json`` via a temporary file and an atomic rename."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        fd, tmp = tempfile.mkstemp(prefix=".manifest-", suffix=".tmp", dir=out)
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(text)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, out / MANIFEST_NAME)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        return out / MANIFEST_NAME

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        if not isinstance(d, dict) or d.get("schema") != SCHEMA:
            found = d.get("schema") if isinstance(d, dict) else type(d).__name__
            raise ManifestError(f"expected schema {SCHEMA!r}, found {found!r}")
        try:
            checks = [Check(**c) for c in d["checks"]]
            return cls(
                d["experiment"], d["version"], d["config"], d["seed"], d["seed_source"], d["jobs"],
                d["status"], d.get("error"), checks, d.get("fits", {}), d.get("artifacts", []),
                d.get("timing", {}), d.get("out_dir", ""),
            )
        except (KeyError, TypeError) as err:
            raise ManifestError(f"malformed manifest: {err}") from None

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ManifestError(f"no manifest at {path}") from None
        except json.JSONDecodeError as err:
            raise ManifestError(f"{path}: not JSON ({err})") from None
        m = cls.from_dict(data)
        m.out_dir = str(path.parent)
        return m


# report ---------------------------------------------------------------------

DECAY_TARGET = 6 / 5
REPORT_FITS = ("c1", "c2", "domination_C", "contraction_factor", "decay_alpha", "gronwall_C", "moment_C")
REPORT_COLUMNS = ("experiment", "seed", "status", "checks_passed", "checks_total", "failed") + REPORT_FITS + ("decay_target",)


def _fmt(x):
    if x is None or x == "":
        return ""
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def report_rows(manifests) -> list[dict]:
    rows = []
    for m in manifests:
        failed = [c.name for c in m.checks if not c.passed]
        row = {
            "experiment": m.experiment,
            "seed": m.seed,
            "status": m.status,
            "checks_passed": sum(c.passed for c in m.checks),
            "checks_total": len(m.checks),
            "failed": ";".join(failed),
        }
        for key in REPORT_FITS:
            val = m.fits.get(key)
            row[key] = val if not isinstance(val, list) else max(val)
        row["decay_target"] = DECAY_TARGET if "decay_alpha" in m.fits else None
        rows.append(row)
    return rows


def emit_report(manifests, csv_path=None) -> tuple[str, bool]:
    """Summary table over manifests; returns ``(text, all_passed)`` and writes a CSV when asked."""
    manifests = list(manifests)
    if not manifests:
        raise ManifestError("report needs at least one manifest")
    rows = report_rows(manifests)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if r[k] is None else r[k]) for k in REPORT_COLUMNS})
    shown = ["experiment", "status", "checks"] + [k for k in REPORT_FITS if any(r[k] is not None for r in rows)]
    table = []
    for r in rows:
        cells = {"experiment": r["experiment"], "status": r["status"], "checks": f"{r['checks_passed']}/{r['checks_total']}"}
        for k in REPORT_FITS:
            cells[k] = _fmt(r[k])
        if r["decay_target"] is not None:
            cells["decay_alpha"] += " (target 6/5)"
        table.append([cells[k] for k in shown])
    widths = [max(len(h), *(len(row[i]) for row in table)) for i, h in enumerate(shown)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(shown, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in table]
    failed = [(r["experiment"], r["failed"]) for r in rows if r["failed"] or r["status"] != "complete"]
    for exp, names in failed:
        lines.append(f"FAILED {exp}: {names or 'run did not complete'}")
    all_passed = all(m.passed for m in manifests)
    lines.append("all checks passed" if all_passed else "some checks failed")
    return "\n".join(lines), all_passed
