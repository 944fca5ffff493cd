"""Library package index: loading, normalisation, and candidate search.

The index schema is JSON: ``{"schema_version": 1, "source_id": "...",
"libraries": [{name, description, paragraph, versions[], architectures[]}]}``.
``convert_package_index`` adapts the common per-version package-index layout
(one record per released version, with ``version``/``sentence`` fields) into
this schema; ``load_index`` then merges duplicates into one entry per name.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .textsim import tokenize

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class IndexLoadError(ValueError):
    """An index document is malformed; the message names the record."""


@dataclass(frozen=True)
class LibraryDetails:
    name: str
    description: str
    paragraph: str
    versions: tuple[str, ...]
    architectures: tuple[str, ...]

    def text(self) -> str:
        """Name, description, and paragraph joined for similarity scoring."""
        return " ".join(part for part in (self.name, self.description, self.paragraph) if part)

    def latest_version(self) -> str:
        return max(self.versions, key=_version_key)


@dataclass(frozen=True)
class LibraryIndex:
    entries: tuple[LibraryDetails, ...]
    source_id: str

    def __len__(self) -> int:
        return len(self.entries)


def _version_key(version: str) -> tuple:
    """Lenient version ordering: numeric runs compare as ints, rest as text."""
    parts: list[tuple[int, int, str]] = []
    for chunk in version.replace("-", ".").split("."):
        if chunk.isdigit():
            parts.append((0, int(chunk), ""))
        else:
            parts.append((1, 0, chunk))
    return tuple(parts)


def _parse_record(record: dict, position: int) -> LibraryDetails:
    name = record.get("name")
    label = name if isinstance(name, str) and name else f"record #{position}"
    if not isinstance(name, str) or not name.strip():
        raise IndexLoadError(f"{label}: missing or empty name")
    versions = record.get("versions")
    if not isinstance(versions, list) or not versions:
        raise IndexLoadError(f"{label}: versions must be a non-empty list")
    architectures = record.get("architectures")
    if not isinstance(architectures, list) or not architectures:
        raise IndexLoadError(f"{label}: architectures must be a non-empty list")
    return LibraryDetails(
        name=name,
        description=str(record.get("description", "")),
        paragraph=str(record.get("paragraph", "")),
        versions=tuple(str(v) for v in versions),
        architectures=tuple(str(a) for a in architectures),
    )


def _merge(base: LibraryDetails, extra: LibraryDetails) -> LibraryDetails:
    versions = list(base.versions)
    versions.extend(v for v in extra.versions if v not in versions)
    architectures = list(base.architectures)
    architectures.extend(a for a in extra.architectures if a not in architectures)
    return LibraryDetails(
        name=base.name,
        description=base.description or extra.description,
        paragraph=base.paragraph or extra.paragraph,
        versions=tuple(versions),
        architectures=tuple(architectures),
    )


def load_index(source: str | Path | dict) -> LibraryIndex:
    """Load an index document; duplicate names merge into one entry.

    ``source`` may be a parsed document or a path to a JSON file.
    """
    source_id = "<document>"
    if isinstance(source, (str, Path)):
        source_id = str(source)
        try:
            source = json.loads(Path(source).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise IndexLoadError(f"{source_id}: not valid JSON ({exc})") from exc
    if not isinstance(source, dict):
        raise IndexLoadError("index: expected a JSON object")
    version = source.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise IndexLoadError(f"index: unsupported schema_version {version!r}")
    source_id = source.get("source_id", source_id)

    records = source.get("libraries")
    if not isinstance(records, list):
        raise IndexLoadError("index: missing libraries list")

    merged: dict[str, LibraryDetails] = {}
    order: list[str] = []
    for position, record in enumerate(records):
        if not isinstance(record, dict):
            raise IndexLoadError(f"record #{position}: expected an object")
        details = _parse_record(record, position)
        key = details.name.casefold()
        if key in merged:
            merged[key] = _merge(merged[key], details)
        else:
            merged[key] = details
            order.append(key)

    entries = tuple(merged[key] for key in order)
    if not entries:
        log.warning("loaded an empty library index from %s", source_id)
    return LibraryIndex(entries=entries, source_id=source_id)


def convert_package_index(raw: dict, source_id: str = "package-index") -> dict:
    """Adapt a per-version package index document to the index schema.

    Accepts records carrying ``version`` (singular) and ``sentence`` fields;
    ``load_index`` merges the resulting per-version records by name.
    """
    libraries = []
    for record in raw.get("libraries", []):
        if not isinstance(record, dict):
            continue
        versions = record.get("versions")
        if versions is None:
            single = record.get("version")
            versions = [single] if single else []
        libraries.append(
            {
                "name": record.get("name", ""),
                "description": record.get("description", record.get("sentence", "")),
                "paragraph": record.get("paragraph", ""),
                "versions": versions,
                "architectures": record.get("architectures", []),
            }
        )
    return {
        "schema_version": SCHEMA_VERSION,
        "source_id": source_id,
        "libraries": libraries,
    }


def fetch_index(url: str, timeout_s: float = 30.0) -> LibraryIndex:
    """Fetch and load a remote package index. Never used by the test suite."""
    import requests

    response = requests.get(url, timeout=timeout_s)
    response.raise_for_status()
    return load_index(convert_package_index(response.json(), source_id=url))


def relevance(component: str, entry: LibraryDetails) -> tuple[int, float]:
    """Lexical relevance of an entry for a component name.

    Returns ``(band, overlap)``: band 1 when the case-folded component name is
    a substring of the entry name, and overlap is the fraction of the
    component's tokens present in the entry's combined text.
    """
    component_tokens = set(tokenize(component))
    band = 1 if component.casefold().strip() and component.casefold() in entry.name.casefold() else 0
    if not component_tokens:
        return band, 0.0
    entry_tokens = set(tokenize(entry.text()))
    overlap = len(component_tokens & entry_tokens) / len(component_tokens)
    return band, overlap


def search(index: LibraryIndex, component: str, n: int = 5) -> list[LibraryDetails]:
    """Top-n candidate libraries for a component, by descending lexical relevance.

    Deterministic and stable under entry-order permutation: ties break on the
    case-folded entry name. Entries with zero relevance are never returned, so
    a component with no token overlap yields an empty list.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    scored = []
    for entry in index.entries:
        band, overlap = relevance(component, entry)
        if band == 0 and overlap == 0.0:
            continue
        scored.append((band, overlap, entry))
    scored.sort(key=lambda item: (-item[0], -item[1], item[2].name.casefold()))
    return [entry for _, _, entry in scored[:n]]
