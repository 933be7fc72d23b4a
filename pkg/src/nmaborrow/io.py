"""Study CSV ingestion and the flat key=value analysis config format."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Optional

from .core import Arm, DataError, Network, Study

STUDY_COLUMNS = ("study_id", "subgroup", "treatment", "n", "mean", "sd", "high_rob")

_TRUE = {"1", "true", "yes", "y", "high"}
_FALSE = {"0", "false", "no", "n", "low"}


def _parse_flag(text: str):
    t = text.strip().lower()
    if t == "":
        return None
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ValueError(f"high_rob must be one of 1/0/true/false/yes/no or blank, got {text!r}")


def load_studies(path, subgroups: Optional[Iterable[str]] = None, canon: Optional[dict] = None) -> list[Study]:
    """Read arm-level rows into studies, keeping file order.

    Treatment names are trimmed and matched case-insensitively; the first
    spelling seen becomes the canonical one. Pass the same ``canon`` dict when
    loading several files so they agree. ``subgroups`` restricts the allowed
    subgroup labels. Every problem is reported as ``file:line: message``.
    """
    path = Path(path)
    canon = {} if canon is None else canon
    allowed = set(subgroups) if subgroups is not None else None
    rows: dict[str, dict] = {}
    try:
        fh = path.open(newline="", encoding="utf-8-sig")
    except OSError as exc:
        raise DataError(f"{path}: cannot open ({exc.strerror})") from None
    with fh:
        reader = csv.DictReader(fh)
        header = [c.strip() for c in (reader.fieldnames or [])]
        missing = [c for c in STUDY_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}:1: missing columns {missing}")
        for line, raw in enumerate(reader, start=2):
            row = {k.strip(): (v or "").strip() for k, v in raw.items() if k is not None}
            if not any(row.values()):
                continue

            def fail(msg):
                raise DataError(f"{path}:{line}: {msg}")

            sid, sub = row["study_id"], row["subgroup"]
            if not sid:
                fail("empty study_id")
            if not sub:
                fail("empty subgroup label")
            if allowed is not None and sub not in allowed:
                fail(f"unknown subgroup label {sub!r} (expected one of {sorted(allowed)})")
            name = row["treatment"]
            if not name:
                fail("empty treatment")
            treatment = canon.setdefault(name.lower(), name)
            try:
                n_val = float(row["n"])
            except ValueError:
                fail(f"n is not a number: {row['n']!r}")
            if not n_val.is_integer() or n_val < 2:
                fail(f"n must be an integer >= 2, got {row['n']}")
            try:
                mean, sd = float(row["mean"]), float(row["sd"])
            except ValueError:
                fail(f"mean and sd must be numbers, got {row['mean']!r}, {row['sd']!r}")
            if not math.isfinite(mean):
                fail("mean must be finite")
            if not (sd > 0 and math.isfinite(sd)):
                fail(f"sd must be positive, got {row['sd']}")
            try:
                flag = _parse_flag(row["high_rob"])
            except ValueError as exc:
                fail(str(exc))
            entry = rows.setdefault(sid, {"subgroup": sub, "arms": [], "flag": flag, "line": line, "seen": set()})
            if entry["subgroup"] != sub:
                fail(f"study {sid!r} changes subgroup from {entry['subgroup']!r} to {sub!r}")
            if entry["flag"] != flag:
                fail(f"study {sid!r} has inconsistent high_rob flags")
            if treatment in entry["seen"]:
                fail(f"duplicate (study_id, treatment) = ({sid!r}, {treatment!r})")
            entry["seen"].add(treatment)
            entry["arms"].append(Arm(treatment, int(n_val), mean, sd))
    studies = []
    for sid, entry in rows.items():
        try:
            studies.append(Study(sid, entry["subgroup"], tuple(entry["arms"]), entry["flag"]))
        except DataError as exc:
            raise DataError(f"{path}:{entry['line']}: {exc}") from None
    return studies


def load_network(path, reference: Optional[str] = None, subgroups: Optional[Iterable[str]] = None,
                 canon: Optional[dict] = None) -> Network:
    """Load a study file as one network; the reference defaults to 'Placebo' if present."""
    canon = {} if canon is None else canon
    studies = load_studies(path, subgroups, canon)
    if not studies:
        raise DataError(f"{path}: no studies")
    if reference is not None:
        reference = canon.get(reference.strip().lower(), reference.strip())
    else:
        names = {t for s in studies for t in s.treatments}
        reference = next((t for t in names if t.lower() in ("placebo", "pbo")), min(names))
    return Network.from_studies(studies, reference)


def write_studies(studies: Iterable[Study], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STUDY_COLUMNS)
        for s in studies:
            flag = "" if s.high_rob is None else int(s.high_rob)
            for a in s.arms:
                w.writerow([s.id, s.subgroup, a.treatment, a.n, repr(a.mean), repr(a.sd), flag])
    return path


# -- config ------------------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, keys are case-insensitive."""
    out: dict[str, str] = {}
    path = Path(path)
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise DataError(f"{path}:{line_no}: expected key = value")
        key, value = (p.strip() for p in text.split("=", 1))
        key = key.lower().replace("-", "_")
        if not key:
            raise DataError(f"{path}:{line_no}: empty key")
        if key in out:
            raise DataError(f"{path}:{line_no}: duplicate key {key!r}")
        out[key] = value
    return out


def write_config(values: dict, path) -> Path:
    path = Path(path)
    lines = [f"{k} = {v}" for k, v in values.items() if v is not None and v != ""]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
