"""Fact sheet, numeric verification, consistency checking and the audit log.

Report text generated here is rendered from ``{{key}}`` placeholders, so every
number it contains is copied from the fact sheet and its position is recorded.
The pattern scanner in :func:`verify_numbers` exists for text written elsewhere.
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

PLACEHOLDER = re.compile(r"\{\{\s*([a-z0-9_.=\-]+)\s*\}\}", re.IGNORECASE)

# (fact key, pattern with a ``num`` group) for externally written prose
NUMBER_PATTERNS = (
    ("cohort.n_participants",
     r"(?P<num>\d[\d,]*)\s+(?:unique\s+)?(?:participants|individuals|subjects)\b"),
    ("battery.n_validated",
     r"(?P<num>\d[\d,]*)\s+(?:fully\s+)?validated\s+(?:candidates|biomarkers|features)\b"),
    ("battery.n_checks",
     r"(?P<num>\d[\d,]*)\s+(?:statistical\s+|validation\s+)?(?:checks|tests)\b"),
    ("analysis.n_methods",
     r"(?P<num>\d[\d,]*)\s+(?:correlation\s+|statistical\s+)?methods\b"),
    ("cohort.n_features",
     r"(?P<num>\d[\d,]*)\s+(?:candidate\s+)?features\b"),
)
_SCANNER = re.compile("|".join(f"(?P<k{i}>{p})".replace("(?P<num>", f"(?P<num{i}>")
                               for i, (_, p) in enumerate(NUMBER_PATTERNS)), re.IGNORECASE)


def format_value(v) -> str:
    """Canonical text form of a fact value (round-trips exactly)."""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if v.is_integer() and abs(v) < 1e15:
            return str(int(v))
        return repr(v)
    return str(v)


def fact_number(v, digits: int = 3):
    """Normalize a number for storage: ints stay ints, floats are rounded."""
    if v is None:
        return "nan"
    if isinstance(v, (bool,)):
        return int(v)
    if isinstance(v, int) or (hasattr(v, "dtype") and getattr(v.dtype, "kind", "") in "iu"):
        return int(v)
    v = float(v)
    if not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return round(v, digits)


@dataclass
class FactSheet:
    entries: dict
    run_id: str = ""

    def __getitem__(self, key):
        return self.entries[key]

    def __contains__(self, key):
        return key in self.entries

    def content_hash(self) -> str:
        blob = json.dumps(self.entries, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "content_hash": self.content_hash(),
                "entries": dict(sorted(self.entries.items()))}

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def build_fact_sheet(run_id: str, state: dict) -> FactSheet:
    """Flatten a run-state mapping into dotted lowercase keys.

    ``state`` maps section names (``cohort``, ``screening``, ...) to flat
    dicts; nested dicts one level deeper become ``section.sub.key``. Battery
    counts are always present, zero when nothing was evaluated.
    """
    entries = {
        "battery.n_checks": 11, "battery.n_evaluated": 0, "battery.n_validated": 0,
        "battery.n_conditional": 0, "battery.n_rejected": 0,
    }

    def put(prefix, value):
        if isinstance(value, dict):
            for k, v in value.items():
                put(f"{prefix}.{k}", v)
        elif isinstance(value, str):
            entries[prefix.lower()] = value
        else:
            entries[prefix.lower()] = fact_number(value)

    for section, payload in state.items():
        put(section, payload)
    return FactSheet(entries, run_id)


# =============================================================================
# Numeric verification
# =============================================================================
@dataclass(frozen=True)
class CorrectionRecord:
    key: str
    written_value: float
    true_value: float
    action: str  # corrected | flagged_uncorrected
    location: str

    def to_dict(self) -> dict:
        return {"key": self.key, "written": self.written_value, "truth": self.true_value,
                "action": self.action, "location": self.location}


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = (_dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch
           else _dt.datetime.now(_dt.timezone.utc))
    return now.isoformat(timespec="seconds")


def append_audit(path, run_id: str, records) -> None:
    """Append one JSON line per record; the file is never rewritten."""
    if not records:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"timestamp": _timestamp(), "run_id": run_id, **r.to_dict()},
                                sort_keys=True) + "\n")


def resolve_placeholders(text: str, fs: FactSheet):
    """Replace ``{{key}}`` with fact values; returns (text, [(key, start, end)])."""
    out = []
    facts = []
    pos = 0
    length = 0
    for m in PLACEHOLDER.finditer(text):
        key = m.group(1).lower()
        if key not in fs:
            raise KeyError(f"placeholder {key!r} has no fact sheet entry")
        chunk = text[pos:m.start()]
        out.append(chunk)
        length += len(chunk)
        val = format_value(fs[key])
        facts.append((key, length, length + len(val)))
        out.append(val)
        length += len(val)
        pos = m.end()
    out.append(text[pos:])
    return "".join(out), facts


def _verify(text: str, fs: FactSheet, section: str, tagged=None):
    """Core of numeric verification; ``tagged`` spans (already-resolved facts) are skipped."""
    if tagged is None:
        text, tagged = resolve_placeholders(text, fs)
    out = []
    records = []
    shifts = []  # (position in input text, length change)
    pos = 0
    length = 0
    for m in _SCANNER.finditer(text):
        idx = next(i for i in range(len(NUMBER_PATTERNS)) if m.group(f"k{i}") is not None)
        key = NUMBER_PATTERNS[idx][0]
        if key not in fs or isinstance(fs[key], str):
            continue
        start, end = m.span(f"num{idx}")
        if any(a < end and start < b for _, a, b in tagged):
            continue
        raw = m.group(f"num{idx}")
        written = float(raw.replace(",", ""))
        truth = float(fs[key])
        chunk = text[pos:start]
        out.append(chunk)
        length += len(chunk)
        replacement = raw
        if written != truth:
            if truth / 3 <= written <= truth * 3:
                replacement = format_value(fs[key])
                action = "corrected"
            else:
                action = "flagged_uncorrected"
            records.append(CorrectionRecord(key, written, truth, action, f"{section}:{length}"))
        out.append(replacement)
        shifts.append((start, len(replacement) - len(raw)))
        length += len(replacement)
        pos = end
    out.append(text[pos:])

    def moved(i):
        return i + sum(d for p, d in shifts if p < i)

    return "".join(out), records, [(k, moved(a), moved(a) + (b - a)) for k, a, b in tagged]


def verify_numbers(text: str, fs: FactSheet, audit_path=None, section: str = "text"):
    """Resolve placeholders, then correct recognized numeric claims.

    A written value within [truth/3, 3*truth] is replaced by the fact value
    (``corrected``); anything outside that band is left in place and logged
    ``flagged_uncorrected``. Matching values produce no record. Records are
    appended to ``audit_path`` when given. Numbers rendered from placeholders
    are already tagged with their key and are not re-interpreted.
    """
    text, records, _ = _verify(text, fs, section)
    if audit_path is not None:
        append_audit(audit_path, fs.run_id, records)
    return text, records


# =============================================================================
# Report sections and consistency
# =============================================================================
@dataclass
class Section:
    title: str
    text: str
    facts: list = field(default_factory=list)

    @classmethod
    def render(cls, title: str, template: str, fs: FactSheet) -> "Section":
        text, facts = resolve_placeholders(template, fs)
        return cls(title, text, facts)

    def to_dict(self) -> dict:
        return {"title": self.title, "text": self.text, "facts": [list(f) for f in self.facts]}

    def verified(self, fs: FactSheet, audit_path=None) -> "Section":
        """Run numeric verification on the text, keeping fact positions aligned."""
        text, records, moved = _verify(self.text, fs, self.title, self.facts)
        if audit_path is not None:
            append_audit(audit_path, fs.run_id, records)
        return Section(self.title, text, moved)

    @classmethod
    def from_dict(cls, d) -> "Section":
        return cls(d["title"], d["text"], [tuple(f) for f in d.get("facts", [])])


def consistency_check(sections, fs: FactSheet):
    """Every tagged number must read back as its fact sheet value.

    Returns (ok, mismatches) where each mismatch is (section title, key,
    found text, expected text).
    """
    mismatches = []
    for s in sections:
        for key, start, end in s.facts:
            expected = format_value(fs[key]) if key in fs else "<missing key>"
            found = s.text[start:end]
            if found != expected:
                mismatches.append((s.title, key, found, expected))
    return not mismatches, mismatches
