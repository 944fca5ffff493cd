"""Risk confirmation gating and reversible PII masking.

Risky tasks are flagged by a deterministic trigger-phrase scan (an optional
model check may add reasons but never removes any) and must be confirmed by
the operator before the pipeline proceeds. Sensitive values are replaced by
``<category_n>`` placeholders before any text leaves the machine; the
placeholder map lives only in session memory and is never written to disk.
"""

from __future__ import annotations

import logging
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

from .gateway import ModelRequest, ModelResponse
from .hardware import HardwareConfig, SecretDecl

log = logging.getLogger(__name__)

CATEGORIES = ("device_id", "password", "ssid", "person_name", "other")

_PLACEHOLDER_RE = re.compile(
    r"<(?:device_id|password|ssid|person_name|other)_(?:\d+)>"
)

# Seed lexicon of risk triggers; callers may extend it via configuration.
DEFAULT_RISK_TRIGGERS: dict[str, str] = {
    "warning": "the task itself carries a warning phrase",
    "overheat": "the action may overheat hardware",
    "damage": "the action may damage hardware",
    "high voltage": "high-voltage operation",
    "mains": "mains-powered operation",
    "pwm frequency": "an incorrect PWM frequency can overheat or damage the driven motor",
    "overcurrent": "overcurrent can destroy components",
    "unprotected write": "an unprotected write can corrupt storage",
}


class UnmaskError(ValueError):
    """A placeholder in the text has no entry in the session map."""


@dataclass(frozen=True)
class RiskVerdict:
    requires_confirmation: bool
    reasons: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        if self.requires_confirmation != bool(self.reasons):
            raise ValueError("requires_confirmation must mirror non-empty reasons")


@dataclass(frozen=True)
class MaskEntry:
    placeholder: str
    original: str
    category: str


@dataclass
class PlaceholderMap:
    entries: list[MaskEntry] = field(default_factory=list)

    def placeholder_for(self, original: str, category: str) -> str | None:
        for entry in self.entries:
            if entry.original == original and entry.category == category:
                return entry.placeholder
        return None

    def originals(self) -> list[str]:
        return [entry.original for entry in self.entries]

    def lookup(self, placeholder: str) -> MaskEntry | None:
        for entry in self.entries:
            if entry.placeholder == placeholder:
                return entry
        return None


def assess_risk(
    task_text: str,
    cfg: HardwareConfig | None = None,
    gateway=None,
    extra_triggers: dict[str, str] | None = None,
) -> RiskVerdict:
    """Scan for risk triggers; optionally let the model add (never drop) reasons."""
    triggers = dict(DEFAULT_RISK_TRIGGERS)
    if extra_triggers:
        triggers.update(extra_triggers)
    haystack = task_text.casefold()
    reasons = [
        (phrase, explanation)
        for phrase, explanation in sorted(triggers.items())
        if phrase in haystack
    ]
    if gateway is not None:
        reasons.extend(_model_risk_reasons(task_text, gateway))
    return RiskVerdict(requires_confirmation=bool(reasons), reasons=tuple(reasons))


def _model_risk_reasons(task_text: str, gateway) -> list[tuple[str, str]]:
    from .prompts import load_template

    try:
        reply = gateway.ask(load_template("risk_check").format(task=task_text))
    except Exception as exc:  # the deterministic scan already ran
        log.warning("model risk check unavailable: %s", exc)
        return []
    risky = re.search(r"(?im)^RISK:\s*yes\b", reply)
    if not risky:
        return []
    reason = re.search(r"(?im)^REASON:\s*(.+)$", reply)
    return [("model", reason.group(1).strip() if reason else "model flagged the task")]


def confirm_gate(verdict: RiskVerdict, answer: str | None) -> bool:
    """True to proceed. Auto-passes when no confirmation is required.

    ``answer=None`` means non-interactive refusal (the --assume-no path).
    """
    if not verdict.requires_confirmation:
        return True
    if answer is None:
        return False
    return answer.strip().casefold() in ("yes", "y")


# --- PII masking -----------------------------------------------------------

_TOKEN = r"[A-Za-z0-9_@#.\-]+"
_QUOTED = r"'[^']+'|\"[^\"]+\"|‘[^’]+’|“[^”]+”"

# Each pattern captures the secret span in group "secret".
_PII_PATTERNS: tuple[tuple[str, re.Pattern[str]], ...] = (
    (
        "device_id",
        re.compile(
            rf"\bdevice\s*id\s*(?:to|is|=|:)?\s*(?P<secret>{_QUOTED}|{_TOKEN})",
            re.IGNORECASE,
        ),
    ),
    (
        "password",
        re.compile(
            rf"\b(?:wi[- ]?fi\s+)?password\s*(?:to|is|=|:)?\s*(?P<secret>{_QUOTED}|{_TOKEN})",
            re.IGNORECASE,
        ),
    ),
    (
        "ssid",
        re.compile(
            rf"\bssid\s*(?:to|is|=|:)?\s*(?P<secret>{_QUOTED}|{_TOKEN})",
            re.IGNORECASE,
        ),
    ),
    (
        "other",
        re.compile(
            rf"\b(?:api\s+key|key|token|passphrase)\s*(?:to|is|=|:)?\s*(?P<secret>{_QUOTED})",
            re.IGNORECASE,
        ),
    ),
    (
        "person_name",
        re.compile(
            r"\b(?:my|user|owner)\s+name\s+(?:to|is|=|:)\s*(?P<secret>[A-Z][A-Za-z]+)",
        ),
    ),
)


def _find_secrets(
    text: str, declared: Sequence[SecretDecl]
) -> list[tuple[int, str, str]]:
    """(position, original, category) for every distinct secret, leftmost first."""
    found: list[tuple[int, str, str]] = []
    seen: set[str] = set()
    for decl in declared:
        pos = text.find(decl.value)
        if pos >= 0 and decl.value not in seen:
            found.append((pos, decl.value, decl.category))
            seen.add(decl.value)
    for category, pattern in _PII_PATTERNS:
        for match in pattern.finditer(text):
            secret = match.group("secret")
            if secret in seen:
                continue
            found.append((match.start("secret"), secret, category))
            seen.add(secret)
    found.sort(key=lambda item: item[0])
    return found


def mask_pii(
    text: str, declared_secrets: Sequence[SecretDecl] = ()
) -> tuple[str, PlaceholderMap]:
    """Replace detected PII spans with category placeholders.

    The same secret always maps to the same placeholder; placeholders are
    chosen so they never collide with text already present in the source.
    """
    pmap = PlaceholderMap()
    counters: dict[str, int] = {}
    masked = text
    # Longest secrets first so one secret never clobbers part of another.
    for _, original, category in sorted(
        _find_secrets(text, declared_secrets), key=lambda item: -len(item[1])
    ):
        existing = pmap.placeholder_for(original, category)
        if existing is not None:
            placeholder = existing
        else:
            while True:
                counters[category] = counters.get(category, 0) + 1
                placeholder = f"<{category}_{counters[category]}>"
                if placeholder not in text:
                    break
            pmap.entries.append(
                MaskEntry(placeholder=placeholder, original=original, category=category)
            )
        masked = masked.replace(original, placeholder)
    # Order the map by first appearance so placeholder numbering reads naturally.
    pmap.entries.sort(key=lambda entry: text.find(entry.original))
    return masked, pmap


def unmask(text: str, pmap: PlaceholderMap) -> str:
    """Substitute originals back; unknown placeholders are an error.

    A placeholder present in the text but absent from the map signals
    cross-session leakage and raises UnmaskError listing it.
    """
    present = set(_PLACEHOLDER_RE.findall(text))
    unknown = sorted(p for p in present if pmap.lookup(p) is None)
    if unknown:
        raise UnmaskError(f"placeholders not in the session map: {', '.join(unknown)}")
    restored = text
    for entry in pmap.entries:
        restored = restored.replace(entry.placeholder, entry.original)
    return restored


def remask(text: str, pmap: PlaceholderMap) -> str:
    """Replace any occurrence of an original secret with its placeholder."""
    out = text
    for entry in sorted(pmap.entries, key=lambda e: -len(e.original)):
        out = out.replace(entry.original, entry.placeholder)
    return out


class MaskingGateway:
    """Gateway wrapper that re-masks every outbound message.

    Guarantees that no mapped secret leaves the machine even when executor
    logs or prior code carry unmasked values.
    """

    def __init__(self, inner, pmap: PlaceholderMap):
        self._inner = inner
        self._pmap = pmap

    def __getattr__(self, name: str):
        return getattr(self._inner, name)

    def complete(self, req: ModelRequest) -> ModelResponse:
        messages = tuple(
            (role, remask(text, self._pmap)) for role, text in req.messages
        )
        return self._inner.complete(
            ModelRequest(
                messages=messages,
                model_id=req.model_id,
                temperature=req.temperature,
                max_output_tokens=req.max_output_tokens,
            )
        )

    def ask(self, text: str, system: str | None = None) -> str:
        messages: tuple[tuple[str, str], ...]
        if system is not None:
            messages = (("system", system), ("user", text))
        else:
            messages = (("user", text),)
        req = ModelRequest(
            messages=messages,
            model_id=self._inner.model_id,
            temperature=self._inner.temperature,
            max_output_tokens=self._inner.max_output_tokens,
        )
        return self.complete(req).text


def scrub_config_text(values: Iterable[str], pmap: PlaceholderMap) -> list[str]:
    """Re-mask a batch of config-derived strings (helper for report writers)."""
    return [remask(value, pmap) for value in values]
