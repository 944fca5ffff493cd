"""Per-library knowledge base: API table and utility table.

API declarations are extracted from header (.h/.hpp) files and example usage
from sketch (.ino) files by prompting the model with strict line-oriented
block formats, so parsing stays deterministic. Each component's knowledge is
persisted as one JSON file under the knowledge directory.
"""

from __future__ import annotations

import json
import logging
import os
import re
import tempfile
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

from .prompts import load_template

log = logging.getLogger(__name__)

STORE_SCHEMA_VERSION = 1

HEADER_SUFFIXES = (".h", ".hpp")
EXAMPLE_SUFFIXES = (".ino",)

_FORMAT_REMINDER = (
    "Your previous reply did not follow the required format. "
    "Resend it following the format exactly, with no other text."
)


class KnowledgeStoreError(ValueError):
    pass


@dataclass(frozen=True)
class ApiEntry:
    api_name: str
    signature: str
    parameters: tuple[tuple[str, str], ...] = ()
    returns: str = ""
    usage_notes: str = ""
    source_file: str = ""


@dataclass(frozen=True)
class UtilityEntry:
    functionality: str
    api_sequence: tuple[str, ...]
    source_example: str = ""


@dataclass(frozen=True)
class KnowledgeBase:
    component: str
    library_name: str
    library_version: str
    api_table: tuple[ApiEntry, ...]
    utility_table: tuple[UtilityEntry, ...]


def discover_library_files(root: str | Path) -> tuple[list[Path], list[Path]]:
    """Header and example files under a library directory, sorted for determinism."""
    root = Path(root)
    headers = sorted(p for p in root.rglob("*") if p.suffix in HEADER_SUFFIXES)
    examples = sorted(p for p in root.rglob("*") if p.suffix in EXAMPLE_SUFFIXES)
    return headers, examples


def _chunk_text(text: str, max_chars: int) -> list[str]:
    """Split at function-boundary heuristics (closing braces, blank lines)."""
    if len(text) <= max_chars:
        return [text]
    chunks: list[str] = []
    current: list[str] = []
    size = 0
    boundary = 0  # index into current after the last good split point
    for line in text.splitlines(keepends=True):
        current.append(line)
        size += len(line)
        stripped = line.strip()
        if stripped in ("", "}", "};"):
            boundary = len(current)
        if size >= max_chars:
            cut = boundary if boundary > 0 else len(current)
            chunks.append("".join(current[:cut]))
            current = current[cut:]
            size = sum(len(l) for l in current)
            boundary = 0
    if current:
        chunks.append("".join(current))
    return [c for c in chunks if c.strip()]


def _ask_with_retry(gateway, prompt: str, parse, what: str):
    """One extraction request plus a single format-reminder re-ask."""
    reply = gateway.ask(prompt)
    parsed = parse(reply)
    if parsed is not None:
        return parsed
    reply = gateway.ask(prompt + "\n\n" + _FORMAT_REMINDER)
    parsed = parse(reply)
    if parsed is None:
        log.warning("skipping %s: model output unparseable after re-ask", what)
    return parsed


def _parse_api_blocks(text: str, source_file: str) -> list[ApiEntry] | None:
    entries: list[ApiEntry] = []
    current: dict | None = None
    for raw_line in text.splitlines():
        line = raw_line.strip()
        if line.startswith("API:"):
            current = {
                "api_name": line[len("API:"):].strip(),
                "signature": "",
                "parameters": [],
                "returns": "",
                "usage_notes": "",
            }
        elif current is not None and line.startswith("SIGNATURE:"):
            current["signature"] = line[len("SIGNATURE:"):].strip()
        elif current is not None and line.startswith("PARAM:"):
            body = line[len("PARAM:"):].strip()
            name, _, meaning = body.partition(":")
            current["parameters"].append((name.strip(), meaning.strip()))
        elif current is not None and line.startswith("RETURNS:"):
            current["returns"] = line[len("RETURNS:"):].strip()
        elif current is not None and line.startswith("NOTES:"):
            current["usage_notes"] = line[len("NOTES:"):].strip()
        elif line == "END" and current is not None:
            if not current["api_name"] or not current["signature"]:
                return None
            entries.append(
                ApiEntry(
                    api_name=current["api_name"],
                    signature=current["signature"],
                    parameters=tuple(current["parameters"]),
                    returns=current["returns"],
                    usage_notes=current["usage_notes"],
                    source_file=source_file,
                )
            )
            current = None
    if not entries:
        return None
    return entries


def _parse_usage_lines(text: str) -> dict[str, str] | None:
    notes: dict[str, str] = {}
    saw_any = False
    for raw_line in text.splitlines():
        line = raw_line.strip()
        if not line.startswith("USAGE:"):
            continue
        saw_any = True
        body = line[len("USAGE:"):].strip()
        if body.casefold() == "none":
            continue
        name, _, note = body.partition(":")
        name = name.strip()
        if name:
            notes.setdefault(name, note.strip())
    return notes if saw_any else None


def _parse_utility(text: str, source_example: str) -> UtilityEntry | None:
    functionality = None
    sequence: list[str] = []
    for raw_line in text.splitlines():
        line = raw_line.strip()
        if line.startswith("FUNCTIONALITY:"):
            functionality = line[len("FUNCTIONALITY:"):].strip()
        elif line.startswith("APIS:"):
            sequence = [s.strip() for s in line[len("APIS:"):].split(",") if s.strip()]
    if not functionality or not sequence:
        return None
    return UtilityEntry(
        functionality=functionality,
        api_sequence=tuple(sequence),
        source_example=source_example,
    )


def extract_api_table(
    headers: Sequence[str | Path],
    gateway,
    examples: Sequence[str | Path] = (),
    max_chunk_chars: int = 24000,
) -> list[ApiEntry]:
    """Extract one ApiEntry per declared API across the given headers.

    Large files are chunked at function boundaries and merged by api_name
    (first occurrence wins). Usage notes harvested from example sketches are
    merged into the matching entries. An unparseable model reply gets one
    format-reminder re-ask, then the file is skipped with a warning and the
    remaining files are still processed.
    """
    template = load_template("api_extract")
    table: dict[str, ApiEntry] = {}
    for header in headers:
        path = Path(header)
        text = path.read_text(encoding="utf-8", errors="replace")
        for chunk in _chunk_text(text, max_chunk_chars):
            prompt = template.format(file_name=path.name, file_text=chunk)
            entries = _ask_with_retry(
                gateway, prompt, lambda t: _parse_api_blocks(t, str(path)), str(path)
            )
            if entries is None:
                continue
            for entry in entries:
                table.setdefault(entry.api_name, entry)

    if examples and table:
        usage_template = load_template("usage_extract")
        api_names = ", ".join(table)
        for example in examples:
            path = Path(example)
            text = path.read_text(encoding="utf-8", errors="replace")
            prompt = usage_template.format(
                api_names=api_names, file_name=path.name, file_text=text
            )
            notes = _ask_with_retry(gateway, prompt, _parse_usage_lines, str(path))
            if not notes:
                continue
            for name, note in notes.items():
                entry = table.get(name)
                if entry is None:
                    log.warning("usage note for unknown api %r from %s", name, path)
                    continue
                merged = f"{entry.usage_notes} {note}".strip() if entry.usage_notes else note
                table[name] = ApiEntry(
                    api_name=entry.api_name,
                    signature=entry.signature,
                    parameters=entry.parameters,
                    returns=entry.returns,
                    usage_notes=merged,
                    source_file=entry.source_file,
                )
    return list(table.values())


def extract_utility_table(
    examples: Sequence[str | Path],
    api_table: Sequence[ApiEntry],
    gateway,
) -> list[UtilityEntry]:
    """One UtilityEntry per successfully analysed example file, in input order.

    API names missing from the api_table are kept in the sequence but logged
    as a soft warning.
    """
    template = load_template("utility_extract")
    known = {entry.api_name for entry in api_table}
    table: list[UtilityEntry] = []
    for example in examples:
        path = Path(example)
        text = path.read_text(encoding="utf-8", errors="replace")
        prompt = template.format(file_name=path.name, file_text=text)
        entry = _ask_with_retry(
            gateway, prompt, lambda t: _parse_utility(t, str(path)), str(path)
        )
        if entry is None:
            continue
        unknown = [name for name in entry.api_sequence if name not in known]
        if unknown:
            log.warning(
                "example %s references apis missing from the api table: %s",
                path,
                ", ".join(unknown),
            )
        table.append(entry)
    return table


def build_component_kb(
    component: str,
    library_name: str,
    library_version: str,
    library_root: str | Path,
    gateway,
    max_chunk_chars: int = 24000,
) -> KnowledgeBase:
    """Discover library files and extract both tables for one component."""
    headers, examples = discover_library_files(library_root)
    api_table = extract_api_table(
        headers, gateway, examples=examples, max_chunk_chars=max_chunk_chars
    )
    utility_table = extract_utility_table(examples, api_table, gateway)
    return KnowledgeBase(
        component=component,
        library_name=library_name,
        library_version=library_version,
        api_table=tuple(api_table),
        utility_table=tuple(utility_table),
    )


# --- persistence -----------------------------------------------------------


def kb_filename(component: str) -> str:
    slug = re.sub(r"[^0-9a-z]+", "_", component.casefold()).strip("_") or "component"
    return f"{slug}.json"


def save_kb(kb: KnowledgeBase, path: str | Path) -> Path:
    """Write a knowledge store atomically (temp file, then rename)."""
    path = Path(path)
    doc = {
        "schema_version": STORE_SCHEMA_VERSION,
        "component": kb.component,
        "library_name": kb.library_name,
        "library_version": kb.library_version,
        "api_table": [
            {
                "api_name": e.api_name,
                "signature": e.signature,
                "parameters": [list(p) for p in e.parameters],
                "returns": e.returns,
                "usage_notes": e.usage_notes,
                "source_file": e.source_file,
            }
            for e in kb.api_table
        ],
        "utility_table": [
            {
                "functionality": e.functionality,
                "api_sequence": list(e.api_sequence),
                "source_example": e.source_example,
            }
            for e in kb.utility_table
        ],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            json.dump(doc, handle, ensure_ascii=False, indent=1)
            handle.write("\n")
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def load_kb(path: str | Path) -> KnowledgeBase:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise KnowledgeStoreError(f"{path}: not valid JSON ({exc})") from exc
    version = doc.get("schema_version")
    if not isinstance(version, int) or version > STORE_SCHEMA_VERSION:
        raise KnowledgeStoreError(
            f"{path}: store schema_version {version!r} is newer than the "
            f"supported version {STORE_SCHEMA_VERSION}"
        )
    try:
        api_table = tuple(
            ApiEntry(
                api_name=e["api_name"],
                signature=e["signature"],
                parameters=tuple((str(n), str(m)) for n, m in e.get("parameters", [])),
                returns=e.get("returns", ""),
                usage_notes=e.get("usage_notes", ""),
                source_file=e.get("source_file", ""),
            )
            for e in doc.get("api_table", [])
        )
        utility_table = tuple(
            UtilityEntry(
                functionality=e["functionality"],
                api_sequence=tuple(e["api_sequence"]),
                source_example=e.get("source_example", ""),
            )
            for e in doc.get("utility_table", [])
        )
        kb = KnowledgeBase(
            component=doc["component"],
            library_name=doc.get("library_name", ""),
            library_version=doc.get("library_version", ""),
            api_table=api_table,
            utility_table=utility_table,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise KnowledgeStoreError(f"{path}: malformed store ({exc})") from exc
    for entry in kb.api_table:
        if not entry.api_name or not entry.signature:
            raise KnowledgeStoreError(f"{path}: api entry missing name or signature")
    known = {entry.api_name for entry in kb.api_table}
    for entry in kb.utility_table:
        if not entry.api_sequence:
            raise KnowledgeStoreError(f"{path}: utility entry with empty api_sequence")
        unknown = [name for name in entry.api_sequence if name not in known]
        if unknown:
            log.warning(
                "%s: utility entry %r references unknown apis: %s",
                path,
                entry.functionality,
                ", ".join(unknown),
            )
    return kb
