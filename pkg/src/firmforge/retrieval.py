"""Selective memory pick-up: choose only the API knowledge a task needs.

The task is decomposed into per-component functionalities by the model, each
functionality is matched against the utility table by TF-IDF cosine
similarity, and the matched entries' APIs are looked up in the API table. The
assembled context is trimmed to a token budget by dropping the
lowest-similarity matches first, so prompts stay strictly smaller than
embedding the whole knowledge base.
"""

from __future__ import annotations

import logging
import re
from collections.abc import Sequence
from dataclasses import dataclass

from .hardware import HardwareConfig, TaskSpec
from .knowledge import ApiEntry, KnowledgeBase, UtilityEntry
from .prompts import estimate_tokens, load_template
from .textsim import TfidfSpace

log = logging.getLogger(__name__)

DEFAULT_MATCH_K = 2
DEFAULT_CONTEXT_BUDGET_TOKENS = 2000

_LIST_LINE_RE = re.compile(r"^\s*-\s+(?:\[(?P<hint>[^\]]+)\]\s*)?(?P<text>.+?)\s*$")

_FORMAT_REMINDER = (
    "Your previous reply did not follow the required format. Reply again with "
    'one line per functionality, each starting with "- ".'
)


@dataclass(frozen=True)
class Functionality:
    text: str
    component_hint: str | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("functionality text must be non-empty")


@dataclass(frozen=True)
class ContextMatch:
    functionality: Functionality
    entries: tuple[tuple[UtilityEntry, float], ...]


@dataclass(frozen=True)
class ApiContext:
    matched: tuple[ContextMatch, ...]
    api_details: tuple[ApiEntry, ...]
    missing_apis: tuple[str, ...] = ()

    def render(self) -> str:
        if not self.matched and not self.api_details:
            return "none"
        lines: list[str] = ["matched functionality context:"]
        for match in self.matched:
            lines.append(f"- task functionality: {match.functionality.text}")
            for entry, similarity in match.entries:
                sequence = " -> ".join(entry.api_sequence)
                lines.append(
                    f"  - (similarity {similarity:.3f}) {entry.functionality} "
                    f"| APIs: {sequence}"
                )
        if self.api_details:
            lines.append("api reference:")
            for entry in self.api_details:
                lines.append(f"- {entry.api_name}: {entry.signature}")
                if entry.parameters:
                    params = "; ".join(f"{n}: {m}" for n, m in entry.parameters)
                    lines.append(f"  params: {params}")
                if entry.returns:
                    lines.append(f"  returns: {entry.returns}")
                if entry.usage_notes:
                    lines.append(f"  notes: {entry.usage_notes}")
        return "\n".join(lines)


def _parse_functionalities(reply: str) -> list[Functionality] | None:
    items: list[Functionality] = []
    for raw_line in reply.splitlines():
        match = _LIST_LINE_RE.match(raw_line)
        if match:
            items.append(
                Functionality(text=match.group("text"), component_hint=match.group("hint"))
            )
    return items or None


def separate_functionalities(
    task: TaskSpec, cfg: HardwareConfig, gateway
) -> list[Functionality]:
    """Ask the model to decompose the task; order is preserved.

    Falls back to the whole task as a single functionality after one failed
    re-ask — the pipeline never halts here.
    """
    components = ", ".join(cfg.component_names()) or "none"
    prompt = load_template("separate_functionalities").format(
        components=components, task=task.description
    )
    items = _parse_functionalities(gateway.ask(prompt))
    if items is None:
        items = _parse_functionalities(gateway.ask(prompt + "\n\n" + _FORMAT_REMINDER))
    if items is None:
        log.warning("functionality separation unparseable twice; using the whole task")
        return [Functionality(text=task.description)]
    return items


def tfidf_vectorize(corpus: Sequence[str]) -> TfidfSpace:
    """Fit the shared TF-IDF space over a corpus of texts."""
    return TfidfSpace.fit(corpus)


def cosine_similarity(text_a: str, text_b: str, space: TfidfSpace) -> float:
    return space.similarity(text_a, text_b)


def match_functionality(
    functionality: Functionality,
    utility_table: Sequence[UtilityEntry],
    k: int = DEFAULT_MATCH_K,
    space: TfidfSpace | None = None,
) -> list[tuple[UtilityEntry, float]]:
    """Top-k utility entries by similarity; zero-similarity entries excluded.

    Ties keep utility-table order. The idf statistics come from the utility
    texts only, so queries contribute no idf of their own.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not utility_table:
        return []
    if space is None:
        space = TfidfSpace.fit([entry.functionality for entry in utility_table])
    scored = [
        (entry, space.similarity(functionality.text, entry.functionality))
        for entry in utility_table
    ]
    scored = [(entry, sim) for entry, sim in scored if sim > 0.0]
    scored.sort(key=lambda pair: -pair[1])  # stable: ties keep table order
    return scored[:k]


def collect_api_context(
    matches: Sequence[tuple[Functionality, Sequence[tuple[UtilityEntry, float]]]],
    api_table: Sequence[ApiEntry],
    utility_table: Sequence[UtilityEntry] | None = None,
) -> ApiContext:
    """Look up the API details for every matched utility entry.

    ``api_details`` is the union over matched entries' api sequences,
    deduplicated by api_name, preserving utility-table order (pass
    ``utility_table`` for that; otherwise encounter order is used). Unknown
    api names are reported in ``missing_apis`` with a warning.
    """
    by_name: dict[str, ApiEntry] = {}
    for entry in api_table:
        by_name.setdefault(entry.api_name, entry)

    matched_entries: list[UtilityEntry] = []
    seen_entries: set[int] = set()
    for _, entry_sims in matches:
        for entry, _ in entry_sims:
            if id(entry) not in seen_entries:
                seen_entries.add(id(entry))
                matched_entries.append(entry)
    if utility_table is not None:
        position = {id(entry): i for i, entry in enumerate(utility_table)}
        matched_entries.sort(key=lambda entry: position.get(id(entry), len(position)))

    details: list[ApiEntry] = []
    included: set[str] = set()
    missing: list[str] = []
    for entry in matched_entries:
        for name in entry.api_sequence:
            if name in included:
                continue
            api = by_name.get(name)
            if api is None:
                if name not in missing:
                    missing.append(name)
                continue
            included.add(name)
            details.append(api)
    if missing:
        log.warning("matched apis missing from the api table: %s", ", ".join(missing))
    return ApiContext(
        matched=tuple(
            ContextMatch(functionality=f, entries=tuple(entry_sims))
            for f, entry_sims in matches
        ),
        api_details=tuple(details),
        missing_apis=tuple(missing),
    )


def fit_to_budget(
    ctx: ApiContext,
    api_table: Sequence[ApiEntry],
    budget_tokens: int = DEFAULT_CONTEXT_BUDGET_TOKENS,
    utility_table: Sequence[UtilityEntry] | None = None,
) -> ApiContext:
    """Drop lowest-similarity matches until the rendered context fits."""
    current = ctx
    while estimate_tokens(current.render()) > budget_tokens:
        candidates = [
            (match_idx, entry_idx, sim)
            for match_idx, match in enumerate(current.matched)
            for entry_idx, (_, sim) in enumerate(match.entries)
        ]
        if not candidates:
            break
        # Lowest similarity goes first; ties drop the later match.
        match_idx, entry_idx, _ = min(candidates, key=lambda c: (c[2], -c[0], -c[1]))
        pruned = [
            (match.functionality, list(match.entries)) for match in current.matched
        ]
        del pruned[match_idx][1][entry_idx]
        current = collect_api_context(
            [(f, entries) for f, entries in pruned], api_table, utility_table
        )
    return current


def build_api_context(
    functionalities: Sequence[Functionality],
    utility_table: Sequence[UtilityEntry],
    api_table: Sequence[ApiEntry],
    k: int = DEFAULT_MATCH_K,
    budget_tokens: int = DEFAULT_CONTEXT_BUDGET_TOKENS,
) -> ApiContext:
    """Match every functionality and assemble a budget-fitted ApiContext."""
    space = (
        TfidfSpace.fit([entry.functionality for entry in utility_table])
        if utility_table
        else None
    )
    matches = [
        (f, match_functionality(f, utility_table, k=k, space=space))
        for f in functionalities
    ]
    ctx = collect_api_context(matches, api_table, utility_table)
    return fit_to_budget(ctx, api_table, budget_tokens, utility_table)


def full_api_context(
    utility_table: Sequence[UtilityEntry], api_table: Sequence[ApiEntry]
) -> ApiContext:
    """Embed the whole knowledge base (the no-pick-up baseline for comparisons)."""
    anchor = Functionality(text="full knowledge base")
    matches = [(anchor, [(entry, 1.0) for entry in utility_table])]
    ctx = collect_api_context(matches, api_table, utility_table)
    # Include every API entry, not only the referenced ones.
    return ApiContext(
        matched=ctx.matched,
        api_details=tuple(dict.fromkeys(api_table)),
        missing_apis=ctx.missing_apis,
    )


def combined_tables(
    kbs: Sequence[KnowledgeBase],
) -> tuple[list[UtilityEntry], list[ApiEntry]]:
    """Merge per-component knowledge bases into one match pool."""
    utility: list[UtilityEntry] = []
    api: list[ApiEntry] = []
    for kb in kbs:
        utility.extend(kb.utility_table)
        api.extend(kb.api_table)
    return utility, api
