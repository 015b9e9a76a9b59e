"""Syslog template mining: mask variable fields, assign dense template ids,
and turn timestamped message streams into per-slot count vectors.

Masking is deterministic and rule based: numeric literals, slash-separated
interface indices (``0/0/1``), ``key:value`` identifiers (``user:bob``) and
IPv4 addresses are replaced by the placeholder token ``XXX``. The timestamp
field always masks to ``XXX``; the host field is preserved verbatim.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from .errors import EmptyWindow, MalformedLine, UnknownTemplate

PLACEHOLDER = "XXX"

TIMESTAMP_FORMATS = (
    "%Y/%m/%d %H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
)

# Token classes treated as variable fields. Order matters only for clarity;
# each token matches at most one class in practice.
_VARIABLE_TOKEN = re.compile(
    r"""^(?:
        \d+(?:\.\d+)?                      # integer or decimal literal
        | \d+(?:/\d+)+                     # interface index like 0/0/1
        | \d{1,3}(?:\.\d{1,3}){3}(?::\d+)? # IPv4, optionally with port
        | \w+:[\w.\-]+                     # key:value identifier, e.g. user:b
    )$""",
    re.VERBOSE,
)


@dataclass(frozen=True)
class RawLogLine:
    """One parsed syslog message: timestamp, host, free-text body."""

    timestamp: datetime
    host: str
    body: str

    def __post_init__(self):
        if not self.body.strip():
            raise MalformedLine(self.body, "empty message body")


def parse_line(text: str) -> RawLogLine:
    """Parse a ``timestamp, host, body`` line; raises MalformedLine."""
    parts = text.split(",", 2)
    if len(parts) != 3:
        raise MalformedLine(text, "expected 'timestamp, host, body'")
    ts_text, host, body = (p.strip() for p in parts)
    ts = None
    for fmt in TIMESTAMP_FORMATS:
        try:
            ts = datetime.strptime(ts_text, fmt)
            break
        except ValueError:
            continue
    if ts is None:
        raise MalformedLine(text, "unparseable timestamp")
    if not body:
        raise MalformedLine(text, "empty message body")
    return RawLogLine(timestamp=ts, host=host, body=body)


def read_log_file(path) -> list[RawLogLine]:
    """Read a plain-text syslog file, one message per line; blank lines skipped."""
    lines: list[RawLogLine] = []
    with open(path, "r", encoding="utf-8", errors="strict") as fh:
        try:
            for raw in fh:
                raw = raw.rstrip("\n")
                if not raw.strip():
                    continue
                lines.append(parse_line(raw))
        except UnicodeDecodeError as exc:
            raise MalformedLine(str(path), f"not a text file ({exc.reason})") from exc
    return lines


def mask_tokens(text: str) -> str:
    """Replace variable tokens in free text with the placeholder."""
    out = []
    for token in text.split(" "):
        out.append(PLACEHOLDER if _VARIABLE_TOKEN.match(token) else token)
    return " ".join(out)


def mask_variables(line: RawLogLine) -> str:
    """Build the template pattern for one line: ``XXX, <host>, <masked body>``."""
    return f"{PLACEHOLDER}, {line.host}, {mask_tokens(line.body)}"


class TemplateCatalog:
    """Append-only mapping from masked patterns to dense template ids."""

    def __init__(self, templates: list[str] | None = None):
        self._templates: list[str] = []
        self._index: dict[str, int] = {}
        for pattern in templates or []:
            self.assign(pattern)

    @property
    def size(self) -> int:
        return len(self._templates)

    @property
    def templates(self) -> tuple[str, ...]:
        return tuple(self._templates)

    def assign(self, pattern: str) -> int:
        """Return the id of a pattern, appending it if unseen."""
        existing = self._index.get(pattern)
        if existing is not None:
            return existing
        new_id = len(self._templates)
        self._templates.append(pattern)
        self._index[pattern] = new_id
        return new_id

    def lookup(self, pattern: str) -> int | None:
        return self._index.get(pattern)

    def freeze(self, strict: bool = False) -> "FrozenCatalog":
        return FrozenCatalog(tuple(self._templates), strict=strict)

    def to_json(self) -> str:
        return json.dumps(
            {"version": 1, "templates": self._templates}, separators=(",", ":")
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TemplateCatalog":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("version") != 1:
            raise MalformedLine(str(path), "unsupported catalog version")
        return cls(list(doc["templates"]))


class FrozenCatalog:
    """Immutable catalog view for prediction-phase vectorization.

    In non-strict mode an extra overflow slot is appended so unseen
    patterns map to a reserved id instead of failing; in strict mode
    unseen patterns raise UnknownTemplate.
    """

    def __init__(self, templates: tuple[str, ...], strict: bool = False):
        self._index = {p: i for i, p in enumerate(templates)}
        self.strict = strict
        self.overflow_id = None if strict else len(templates)
        self.size = len(templates) + (0 if strict else 1)

    def template_id(self, pattern: str) -> int:
        tid = self._index.get(pattern)
        if tid is not None:
            return tid
        if self.strict:
            raise UnknownTemplate(f"pattern not in frozen catalog: {pattern!r}")
        return self.overflow_id


def vectorize_slots(
    catalog: TemplateCatalog | FrozenCatalog,
    lines,
    slot_minutes: float,
    window: tuple[datetime, datetime],
) -> np.ndarray:
    """Count template occurrences per time slot.

    Slot ``i`` covers ``[start + i*slot, start + (i+1)*slot)``; lines outside
    ``[start, end)`` are ignored. When ``catalog`` is mutable, unseen patterns
    extend it before counting so the vector width equals the final M.
    Returns an int64 array of shape (n_slots, M).
    """
    start, end = window
    if end <= start:
        raise EmptyWindow(f"window [{start}, {end}) has no duration")
    if slot_minutes <= 0:
        raise EmptyWindow(f"slot duration must be positive, got {slot_minutes}")
    slot = timedelta(minutes=slot_minutes)
    n_slots = -((start - end) // slot)  # ceil of duration / slot

    in_window = [ln for ln in lines if start <= ln.timestamp < end]
    if isinstance(catalog, FrozenCatalog):
        ids = [catalog.template_id(mask_variables(ln)) for ln in in_window]
        width = catalog.size
    else:
        ids = [catalog.assign(mask_variables(ln)) for ln in in_window]
        width = catalog.size
    counts = np.zeros((n_slots, width), dtype=np.int64)
    for ln, tid in zip(in_window, ids):
        slot_idx = int((ln.timestamp - start) // slot)
        counts[slot_idx, tid] += 1
    return counts
