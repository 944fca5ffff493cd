"""Per-component library selection.

Each candidate from the index search is scored on three axes: name match m
(TF-IDF cosine between the component name and the candidate's combined text),
version count v (candidate's version count normalised by the cohort maximum),
and architecture compatibility a (1 when the target architecture or a "*"
wildcard is listed, else 0). The combined score is ``(m + 0.1*v + 0.1*a) * a``,
so incompatible candidates score 0 and are excluded from selection outright.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

from .hardware import HardwareConfig
from .libindex import LibraryDetails, LibraryIndex, search
from .textsim import TfidfSpace

DEFAULT_TOP_N = 5


@dataclass(frozen=True)
class LibraryScore:
    m: float
    v: float
    a: int

    @property
    def total(self) -> float:
        return (self.m + 0.1 * self.v + 0.1 * self.a) * self.a


@dataclass(frozen=True)
class Resolution:
    """Outcome of resolving every component of a hardware config.

    ``assignments`` and ``unresolved`` partition the component set;
    ``scored_candidates`` retains every candidate's score for audit reports.
    """

    assignments: dict[str, tuple[LibraryDetails, LibraryScore]]
    unresolved: tuple[str, ...]
    scored_candidates: dict[str, list[tuple[LibraryDetails, LibraryScore]]] = field(
        default_factory=dict
    )

    def components(self) -> list[str]:
        return list(self.assignments) + list(self.unresolved)


def name_match_score(
    component: str, details: LibraryDetails, corpus: Sequence[str]
) -> float:
    """TF-IDF cosine between the component name and the candidate's text.

    ``corpus`` must include the candidate's own text so document frequencies
    are well defined; empty or fully out-of-vocabulary texts score 0.
    """
    space = TfidfSpace.fit(corpus)
    return space.similarity(component, details.text())


def version_score(details: LibraryDetails, cohort: Sequence[LibraryDetails]) -> float:
    """Version count normalised by the cohort maximum; in (0, 1]."""
    return len(details.versions) / max(len(c.versions) for c in cohort)


def arch_score(details: LibraryDetails, target_arch: str) -> int:
    """1 when the target architecture (case-folded) or "*" is listed, else 0."""
    target = target_arch.casefold()
    listed = {a.casefold() for a in details.architectures}
    return 1 if "*" in listed or target in listed else 0


def score_candidates(
    component: str, candidates: Sequence[LibraryDetails], target_arch: str
) -> list[tuple[LibraryDetails, LibraryScore]]:
    """Score every candidate against the cohort, in candidate order."""
    if not candidates:
        return []
    space = TfidfSpace.fit([c.text() for c in candidates])
    max_versions = max(len(c.versions) for c in candidates)
    scored = []
    for details in candidates:
        score = LibraryScore(
            m=space.similarity(component, details.text()),
            v=len(details.versions) / max_versions,
            a=arch_score(details, target_arch),
        )
        scored.append((details, score))
    return scored


def select_library(
    component: str, candidates: Sequence[LibraryDetails], target_arch: str
) -> tuple[LibraryDetails, LibraryScore] | None:
    """Pick the candidate maximising the combined score.

    Candidates with a = 0 are never selected. Ties break on higher m, then on
    the case-folded name, so selection is invariant under candidate order.
    Returns None when no candidate is viable (an unresolved outcome, not an
    error).
    """
    viable = [(d, s) for d, s in score_candidates(component, candidates, target_arch) if s.a == 1]
    if not viable:
        return None
    viable.sort(key=lambda pair: (-pair[1].total, -pair[1].m, pair[0].name.casefold()))
    return viable[0]


def resolve_all(
    cfg: HardwareConfig, index: LibraryIndex, n: int = DEFAULT_TOP_N
) -> Resolution:
    """Search then select a library for every distinct component in the config.

    Components with no viable candidate are listed as unresolved; resolution
    never raises for them.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    assignments: dict[str, tuple[LibraryDetails, LibraryScore]] = {}
    unresolved: list[str] = []
    audit: dict[str, list[tuple[LibraryDetails, LibraryScore]]] = {}
    for component in cfg.component_names():
        candidates = search(index, component, n)
        audit[component] = score_candidates(component, candidates, cfg.platform_arch)
        selected = select_library(component, candidates, cfg.platform_arch)
        if selected is None:
            unresolved.append(component)
        else:
            assignments[component] = selected
    return Resolution(
        assignments=assignments,
        unresolved=tuple(unresolved),
        scored_candidates=audit,
    )


def render_resolution_report(resolution: Resolution) -> str:
    """Human-readable audit report with per-candidate m/v/a/total."""
    lines: list[str] = []
    for component, candidates in resolution.scored_candidates.items():
        lines.append(f"component: {component}")
        if component in resolution.assignments:
            details, score = resolution.assignments[component]
            lines.append(f"  selected: {details.name} (total {score.total:.4f})")
        else:
            lines.append("  unresolved: no compatible candidate")
        if candidates:
            lines.append(f"  {'candidate':40s} {'m':>7s} {'v':>7s} {'a':>3s} {'total':>7s}")
            for details, score in candidates:
                lines.append(
                    f"  {details.name[:40]:40s} {score.m:7.4f} {score.v:7.4f} "
                    f"{score.a:3d} {score.total:7.4f}"
                )
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"
