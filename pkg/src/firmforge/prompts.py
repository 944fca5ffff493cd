"""Structured task-prompt assembly.

A task prompt is an ordered list of tagged sections: task, hardware,
api_context, coding_rules, and (when repairing) feedback. The coding rules are
shipped as a versioned text asset so prompt changes stay reviewable; the
target-platform constraints from the hardware config are appended to them at
build time. Rendering maps coding_rules to the system message and the
remaining sections, under ``### <TAG>`` headers, to the user message.

Section texts must not contain lines starting with the ``### `` header marker;
that prefix is reserved so rendering stays injective on section contents.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

from .gateway import ModelRequest
from .hardware import HardwareConfig

SECTION_ORDER = ("task", "hardware", "api_context", "coding_rules", "feedback")

DEFAULT_PROMPT_BUDGET_TOKENS = 4096


class PromptBudgetError(RuntimeError):
    """The prompt exceeds its token budget even after maximal trimming."""


@dataclass(frozen=True)
class TaskPrompt:
    sections: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        tags = [tag for tag, _ in self.sections]
        order = [tag for tag in SECTION_ORDER if tag in tags]
        if tags != order:
            raise ValueError(f"sections out of order or unknown: {tags}")
        for required in ("task", "hardware", "coding_rules"):
            if required not in tags:
                raise ValueError(f"missing required section {required!r}")

    def section(self, tag: str) -> str | None:
        for name, text in self.sections:
            if name == tag:
                return text
        return None


def load_template(name: str) -> str:
    return (
        resources.files("firmforge.templates").joinpath(f"{name}.txt").read_text("utf-8")
    )


def estimate_tokens(text: str) -> int:
    """Character/4 heuristic used for every prompt budget in the pipeline."""
    return (len(text) + 3) // 4


def hardware_section(cfg: HardwareConfig) -> str:
    """Platform and module bindings, pins forwarded verbatim."""
    lines = [
        f"platform: {cfg.platform_name} (arch {cfg.platform_arch}, "
        f"board {cfg.toolchain_board_id})"
    ]
    if cfg.modules:
        lines.append("modules:")
        for module in cfg.modules:
            pins = ", ".join(module.pins) if module.pins else "none"
            lines.append(f"- {module.component_name}: pins {pins} via {module.interface}")
    else:
        lines.append("modules: none")
    return "\n".join(lines)


def coding_rules_for(cfg: HardwareConfig) -> str:
    """The shipped rules plus the target-platform constraints from the config."""
    rules = load_template("coding_rules").rstrip()
    constraints = [
        "",
        f"Target platform: {cfg.platform_name} "
        f"(architecture {cfg.platform_arch}, board id {cfg.toolchain_board_id}).",
    ]
    return rules + "\n".join(constraints) + "\n"


def build_task_prompt(
    task_text: str,
    cfg: HardwareConfig,
    api_context_text: str,
    feedback: str | None = None,
    prior_code: str | None = None,
    budget_tokens: int = DEFAULT_PROMPT_BUDGET_TOKENS,
) -> TaskPrompt:
    """Assemble the prompt sections in their fixed order.

    ``task_text`` must already be PII-masked. The feedback section is present
    iff feedback is given; prior code rides along in it when the budget
    allows, and is dropped first when it does not. The task text is never
    truncated: a prompt that stays over budget raises PromptBudgetError.
    """

    def assemble(include_prior: bool) -> TaskPrompt:
        sections = [
            ("task", task_text),
            ("hardware", hardware_section(cfg)),
            ("api_context", api_context_text if api_context_text else "none"),
            ("coding_rules", coding_rules_for(cfg)),
        ]
        if feedback is not None:
            text = feedback
            if include_prior and prior_code is not None:
                text = f"{feedback}\n\nPrevious code:\n{prior_code}"
            sections.append(("feedback", text))
        return TaskPrompt(sections=tuple(sections))

    prompt = assemble(include_prior=True)
    if prompt_size_tokens(prompt) <= budget_tokens:
        return prompt
    prompt = assemble(include_prior=False)
    if prompt_size_tokens(prompt) <= budget_tokens:
        return prompt
    raise PromptBudgetError(
        f"prompt needs {prompt_size_tokens(prompt)} tokens but the budget is "
        f"{budget_tokens}; re-run with a smaller match count k or a smaller "
        "context budget"
    )


def user_text(prompt: TaskPrompt) -> str:
    parts = []
    for tag, text in prompt.sections:
        if tag == "coding_rules":
            continue
        parts.append(f"### {tag.upper()}\n{text}")
    return "\n\n".join(parts)


def prompt_size_tokens(prompt: TaskPrompt) -> int:
    system = prompt.section("coding_rules") or ""
    return estimate_tokens(system) + estimate_tokens(user_text(prompt))


def render(
    prompt: TaskPrompt,
    model_id: str,
    temperature: float = 0.0,
    max_output_tokens: int = 4096,
) -> ModelRequest:
    """Deterministic serialisation: coding_rules as system, the rest as user."""
    return ModelRequest(
        messages=(
            ("system", prompt.section("coding_rules") or ""),
            ("user", user_text(prompt)),
        ),
        model_id=model_id,
        temperature=temperature,
        max_output_tokens=max_output_tokens,
    )
