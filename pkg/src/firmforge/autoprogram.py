"""The auto-programming loop: coder, validators, and nested repair cycles.

A session runs an inner compile loop (generate, compile, validate, retry with
summarized compiler feedback) nested in an outer flash loop (flash, check
marker order deterministically, ask the model to check the logic, retry with
its feedback). Generated code carries machine-parseable debug markers —
``@DBG|<subtask>|START``, ``@DBG|<subtask>|END`` and
``@DBG|<subtask>|CHECK|<key>=<value>`` — printed over serial. On success the
marker lines are stripped mechanically, the clean code is re-compiled as a
regression guard, flashed once more, and returned.
"""

from __future__ import annotations

import enum
import logging
import re
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

from .executor import (
    CompileResult,
    ExecutorEnvironmentError,
    FlashLog,
    MARKER_TOKEN,
)
from .gateway import GatewayError, ModelRequest, TokenUsage
from .hardware import HardwareConfig, TaskSpec
from .knowledge import KnowledgeBase
from .prompts import (
    DEFAULT_PROMPT_BUDGET_TOKENS,
    TaskPrompt,
    build_task_prompt,
    load_template,
    render,
)
from .resolver import Resolution
from .retrieval import (
    DEFAULT_CONTEXT_BUDGET_TOKENS,
    DEFAULT_MATCH_K,
    build_api_context,
    combined_tables,
    separate_functionalities,
)
from .security import PlaceholderMap, remask, unmask

log = logging.getLogger(__name__)

COMPILE_FEEDBACK_CAP = 1000
COMPILE_LOG_TAIL_LINES = 30

_MARKER_LINE_RE = re.compile(
    r"^@DBG\|(?P<subtask>[A-Za-z0-9_]+)\|(?P<kind>START|END|CHECK)(?:\|(?P<detail>.*))?$"
)
_SUBTASK_LINE_RE = re.compile(r"^SUBTASK:\s*(?P<id>[A-Za-z0-9_]+)\s*:\s*(?P<desc>.+?)\s*$")
_CODE_MARKER_RE = re.compile(r"^CODE:\s*$")
_VERDICT_RE = re.compile(r"(?im)^VERDICT:\s*(success|failure)\s*$")
_FEEDBACK_RE = re.compile(r"(?im)^FEEDBACK:\s*(.*)$")


class CoderContractError(RuntimeError):
    """The coder reply still violates the output contract after a re-ask."""


@dataclass(frozen=True)
class AnnotatedCode:
    source: str
    subtasks: tuple[tuple[str, str], ...]

    @property
    def debug_markers(self) -> tuple[str, ...]:
        """The marker lines found in the source, in source order."""
        return tuple(
            line for line in self.source.splitlines() if MARKER_TOKEN in line
        )


@dataclass(frozen=True)
class Verdict:
    outcome: str  # "success" | "failure"
    feedback: str
    origin: str  # "compile" | "flash"

    def __post_init__(self) -> None:
        if self.outcome == "failure" and not self.feedback:
            raise ValueError("a failure verdict needs feedback")

    @property
    def ok(self) -> bool:
        return self.outcome == "success"


@dataclass(frozen=True)
class OrderViolation:
    kind: str  # missing_start | missing_end | end_before_start | sequence
    subtask_id: str
    detail: str = ""

    def describe(self) -> str:
        label = {
            "missing_start": "missing START",
            "missing_end": "missing END",
            "end_before_start": "END before START",
            "sequence": "out of declared order",
        }[self.kind]
        suffix = f" ({self.detail})" if self.detail else ""
        return f"{label} ({self.subtask_id}){suffix}"


@dataclass(frozen=True)
class OrderReport:
    violations: tuple[OrderViolation, ...] = ()

    @property
    def passed(self) -> bool:
        return not self.violations


class SessionStatus(str, enum.Enum):
    SUCCESS = "success"
    COMPILE_EXHAUSTED = "compile_exhausted"
    FLASH_EXHAUSTED = "flash_exhausted"
    ABORTED_BY_USER = "aborted_by_user"
    ABORTED_ENV = "aborted_env"


EXIT_CODES: dict[SessionStatus, int] = {
    SessionStatus.SUCCESS: 0,
    SessionStatus.COMPILE_EXHAUSTED: 2,
    SessionStatus.FLASH_EXHAUSTED: 3,
    SessionStatus.ABORTED_BY_USER: 4,
    SessionStatus.ABORTED_ENV: 4,
}


@dataclass(frozen=True)
class SessionLimits:
    max_compile_trials: int = 3
    max_flash_trials: int = 5
    capture_window_ms: int = 10_000
    match_k: int = DEFAULT_MATCH_K
    context_budget_tokens: int = DEFAULT_CONTEXT_BUDGET_TOKENS
    prompt_budget_tokens: int = DEFAULT_PROMPT_BUDGET_TOKENS

    def __post_init__(self) -> None:
        if self.max_compile_trials < 1 or self.max_flash_trials < 1:
            raise ValueError("trial limits must be >= 1")


@dataclass
class SessionResult:
    status: SessionStatus
    final_code: str | None
    compile_trials: tuple[int, ...]  # t_c per flash round
    flash_trials: int
    verdict_history: tuple[Verdict, ...]
    usage: TokenUsage
    model_latency_ms: int
    wall_ms: int
    abort_reason: str = ""

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.status]


def max_gateway_calls(limits: SessionLimits) -> int:
    """Closed-form bound on model calls per session.

    Two for functionality separation (ask plus one re-ask); per compile
    iteration up to two coder calls and one log summarization; per flash round
    up to two flash-validation calls.
    """
    per_round = limits.max_compile_trials * 3 + 2
    return 2 + limits.max_flash_trials * per_round


# --- coder -------------------------------------------------------------------


def parse_coder_reply(reply: str) -> AnnotatedCode:
    """Parse SUBTASK lines plus a CODE: body; raises on contract violations."""
    subtasks: list[tuple[str, str]] = []
    code_lines: list[str] | None = None
    for raw_line in reply.splitlines():
        if code_lines is not None:
            code_lines.append(raw_line)
            continue
        match = _SUBTASK_LINE_RE.match(raw_line.strip())
        if match:
            subtasks.append((match.group("id"), match.group("desc")))
        elif _CODE_MARKER_RE.match(raw_line.strip()):
            code_lines = []
    if code_lines is None:
        raise CoderContractError("reply has no CODE: line")
    if not subtasks:
        raise CoderContractError("reply declares no SUBTASK lines")
    ids = [sid for sid, _ in subtasks]
    duplicates = sorted({sid for sid in ids if ids.count(sid) > 1})
    if duplicates:
        raise CoderContractError(f"duplicate subtask ids: {', '.join(duplicates)}")
    # Tolerate fenced code blocks.
    source = "\n".join(
        line for line in code_lines if not line.strip().startswith("```")
    ).strip("\n")
    if not source.strip():
        raise CoderContractError("CODE: body is empty")
    code = AnnotatedCode(source=source, subtasks=tuple(subtasks))
    missing = missing_marker_subtasks(code)
    if missing:
        raise CoderContractError(
            f"missing DEBUG markers for subtasks: {', '.join(missing)}"
        )
    return code


def missing_marker_subtasks(code: AnnotatedCode) -> list[str]:
    missing = []
    for subtask_id, _ in code.subtasks:
        has_start = f"{MARKER_TOKEN}|{subtask_id}|START" in code.source
        has_end = f"{MARKER_TOKEN}|{subtask_id}|END" in code.source
        if not (has_start and has_end):
            missing.append(subtask_id)
    return missing


def generate_code(prompt: TaskPrompt, gateway) -> AnnotatedCode:
    """Ask the coder for annotated source; one corrective re-ask on violation."""
    request = render(
        prompt,
        model_id=gateway.model_id,
        temperature=gateway.temperature,
        max_output_tokens=gateway.max_output_tokens,
    )
    reply = gateway.complete(request).text
    try:
        return parse_coder_reply(reply)
    except CoderContractError as first_error:
        correction = (
            f"Format violation: {first_error}. Resend your full reply in the "
            "required format: SUBTASK lines, then CODE:, then the complete "
            "source including @DBG START and END markers for every subtask."
        )
        retry = ModelRequest(
            messages=request.messages + (("assistant", reply), ("user", correction)),
            model_id=request.model_id,
            temperature=request.temperature,
            max_output_tokens=request.max_output_tokens,
        )
        return parse_coder_reply(gateway.complete(retry).text)


# --- validators ----------------------------------------------------------------


def validate_compile(result: CompileResult, gateway) -> Verdict:
    """Success passes through; failures get a model-summarized log.

    When the gateway cannot summarize, the raw log tail stands in so the loop
    keeps moving.
    """
    if result.success:
        return Verdict(outcome="success", feedback="", origin="compile")
    try:
        summary = gateway.ask(load_template("compile_summary").format(log=result.log))
        summary = summary.strip()[:COMPILE_FEEDBACK_CAP]
    except GatewayError as exc:
        log.warning("compile-log summarization unavailable (%s); using raw tail", exc)
        summary = "\n".join(result.log.splitlines()[-COMPILE_LOG_TAIL_LINES:])
        summary = summary[:COMPILE_FEEDBACK_CAP]
    return Verdict(outcome="failure", feedback=summary or "compile failed", origin="compile")


def parse_flash_log_markers(flash_log: FlashLog) -> list[tuple[int, str, str, str]]:
    """(line_index, subtask, kind, detail) for each marker line; noise ignored."""
    events = []
    for index, (_, text) in enumerate(flash_log.lines):
        match = _MARKER_LINE_RE.match(text.strip())
        if match:
            events.append(
                (index, match.group("subtask"), match.group("kind"), match.group("detail") or "")
            )
    return events


def check_order(
    flash_log: FlashLog, subtasks: Sequence[tuple[str, str]]
) -> OrderReport:
    """Deterministic marker-order check; no model involved.

    Violations: missing START, missing END, END before START, and subtask
    start order differing from the declared order.
    """
    events = parse_flash_log_markers(flash_log)
    declared = [subtask_id for subtask_id, _ in subtasks]
    first_start: dict[str, int] = {}
    first_end: dict[str, int] = {}
    for index, subtask, kind, _ in events:
        if kind == "START":
            first_start.setdefault(subtask, index)
        elif kind == "END":
            first_end.setdefault(subtask, index)

    violations: list[OrderViolation] = []
    for subtask_id in declared:
        if subtask_id not in first_start:
            violations.append(OrderViolation(kind="missing_start", subtask_id=subtask_id))
        if subtask_id not in first_end:
            violations.append(OrderViolation(kind="missing_end", subtask_id=subtask_id))
        if (
            subtask_id in first_start
            and subtask_id in first_end
            and first_end[subtask_id] < first_start[subtask_id]
        ):
            violations.append(OrderViolation(kind="end_before_start", subtask_id=subtask_id))

    # Execution order (by first START) must follow the declared order.
    declared_position = {subtask_id: i for i, subtask_id in enumerate(declared)}
    executed = sorted(
        (index, subtask_id)
        for subtask_id, index in first_start.items()
        if subtask_id in declared_position
    )
    highest = -1
    highest_id = ""
    for _, subtask_id in executed:
        position = declared_position[subtask_id]
        if position < highest:
            violations.append(
                OrderViolation(
                    kind="sequence",
                    subtask_id=subtask_id,
                    detail=f"started after {highest_id}",
                )
            )
        else:
            highest = position
            highest_id = subtask_id
    return OrderReport(violations=tuple(violations))


def render_flash_log(flash_log: FlashLog) -> str:
    if not flash_log.lines:
        return "(no output captured)"
    return "\n".join(f"t=+{ts}ms {text}" for ts, text in flash_log.lines)


def validate_flash(
    flash_log: FlashLog,
    task: TaskSpec,
    order: OrderReport,
    gateway,
    subtasks: Sequence[tuple[str, str]] = (),
) -> Verdict:
    """Order violations fail deterministically; the model judges the logic.

    The model reply must carry VERDICT and FEEDBACK lines; after one re-ask a
    still-unparseable reply counts as a conservative failure.
    """
    if not order.passed:
        details = "; ".join(v.describe() for v in order.violations)
        return Verdict(
            outcome="failure",
            feedback=f"marker order check failed: {details}",
            origin="flash",
        )
    subtask_text = "\n".join(f"- {sid}: {desc}" for sid, desc in subtasks) or "- (none declared)"
    prompt = load_template("flash_validate").format(
        task=task.description,
        subtasks=subtask_text,
        log=render_flash_log(flash_log),
    )
    reply = gateway.ask(prompt)
    parsed = _parse_flash_verdict(reply)
    if parsed is None:
        reply = gateway.ask(
            prompt + "\n\nYour previous reply did not follow the required format. "
            "Reply again with a VERDICT line and a FEEDBACK line only."
        )
        parsed = _parse_flash_verdict(reply)
    if parsed is None:
        return Verdict(outcome="failure", feedback="validator reply unparseable", origin="flash")
    outcome, feedback = parsed
    if outcome == "failure" and not feedback:
        feedback = "flash validation failed"
    return Verdict(outcome=outcome, feedback=feedback, origin="flash")


def _parse_flash_verdict(reply: str) -> tuple[str, str] | None:
    verdict = _VERDICT_RE.search(reply)
    if not verdict:
        return None
    feedback = _FEEDBACK_RE.search(reply)
    return verdict.group(1).casefold(), (feedback.group(1).strip() if feedback else "")


# --- strip ---------------------------------------------------------------------


def strip_debug(code: AnnotatedCode | str) -> str:
    """Remove every line containing the marker token; nothing else changes."""
    source = code.source if isinstance(code, AnnotatedCode) else code
    kept = [line for line in source.splitlines() if MARKER_TOKEN not in line]
    return "\n".join(kept) + ("\n" if source.endswith("\n") else "")


# --- the session -----------------------------------------------------------------


def run_session(
    task: TaskSpec,
    cfg: HardwareConfig,
    kb: Mapping[str, KnowledgeBase],
    resolution: Resolution,
    executor,
    gateway,
    limits: SessionLimits = SessionLimits(),
    placeholder_map: PlaceholderMap | None = None,
) -> SessionResult:
    """Run the nested compile/flash repair loops until verified or exhausted.

    ``task`` must already be PII-masked and the risk gate passed. The
    placeholder map (when given) restores real values before anything reaches
    the executor and re-masks feedback kept in the session history; pairing it
    with a masking gateway keeps every outbound request clean.
    """
    pmap = placeholder_map or PlaceholderMap()
    started = time.perf_counter()
    usage_before = gateway.usage_total
    latency_before = gateway.latency_total_ms
    verdicts: list[Verdict] = []
    compile_trials: list[int] = []
    flash_count = 0

    def finish(
        status: SessionStatus, final_code: str | None = None, abort_reason: str = ""
    ) -> SessionResult:
        usage_after = gateway.usage_total
        return SessionResult(
            status=status,
            final_code=final_code,
            compile_trials=tuple(compile_trials),
            flash_trials=flash_count,
            verdict_history=tuple(verdicts),
            usage=TokenUsage(
                usage_after.input_tokens - usage_before.input_tokens,
                usage_after.output_tokens - usage_before.output_tokens,
            ),
            model_latency_ms=gateway.latency_total_ms - latency_before,
            wall_ms=int((time.perf_counter() - started) * 1000),
            abort_reason=abort_reason,
        )

    functionalities = separate_functionalities(task, cfg, gateway)
    utility_table, api_table = combined_tables(list(kb.values()))
    ctx = build_api_context(
        functionalities,
        utility_table,
        api_table,
        k=limits.match_k,
        budget_tokens=limits.context_budget_tokens,
    )
    ctx_text = ctx.render()

    feedback: str | None = None
    prior_code: str | None = None

    try:
        while True:
            # Inner compile loop.
            code: AnnotatedCode | None = None
            compile_result: CompileResult | None = None
            t_c = 0
            while True:
                prompt = build_task_prompt(
                    task.description,
                    cfg,
                    ctx_text,
                    feedback=feedback,
                    prior_code=prior_code,
                    budget_tokens=limits.prompt_budget_tokens,
                )
                try:
                    code = generate_code(prompt, gateway)
                except CoderContractError as exc:
                    t_c += 1
                    verdict = Verdict(
                        outcome="failure", feedback=remask(str(exc), pmap), origin="compile"
                    )
                    verdicts.append(verdict)
                    feedback = verdict.feedback
                    code = None
                    if t_c >= limits.max_compile_trials:
                        compile_trials.append(t_c)
                        return finish(SessionStatus.COMPILE_EXHAUSTED)
                    continue
                prior_code = code.source
                device_source = unmask(code.source, pmap)
                compile_result = executor.compile(device_source, cfg, resolution)
                t_c += 1
                verdict = validate_compile(compile_result, gateway)
                if not verdict.ok:
                    verdict = Verdict(
                        outcome="failure",
                        feedback=remask(verdict.feedback, pmap),
                        origin="compile",
                    )
                verdicts.append(verdict)
                if verdict.ok:
                    break
                feedback = verdict.feedback
                if t_c >= limits.max_compile_trials:
                    compile_trials.append(t_c)
                    return finish(SessionStatus.COMPILE_EXHAUSTED)
            compile_trials.append(t_c)

            # Flash and validate.
            assert code is not None and compile_result is not None
            assert compile_result.binary is not None
            flash_log = executor.flash_and_capture(
                compile_result.binary, cfg, limits.capture_window_ms
            )
            order = check_order(flash_log, code.subtasks)
            verdict = validate_flash(flash_log, task, order, gateway, code.subtasks)
            flash_count += 1
            if not verdict.ok:
                verdict = Verdict(
                    outcome="failure",
                    feedback=remask(verdict.feedback, pmap),
                    origin="flash",
                )
            verdicts.append(verdict)

            if verdict.ok:
                clean_masked = strip_debug(code)
                clean_device = unmask(clean_masked, pmap)
                regression = executor.compile(clean_device, cfg, resolution)
                if not regression.success:
                    return finish(
                        SessionStatus.ABORTED_ENV,
                        abort_reason="clean code failed to re-compile after marker strip",
                    )
                assert regression.binary is not None
                executor.flash_and_capture(regression.binary, cfg, limits.capture_window_ms)
                return finish(SessionStatus.SUCCESS, final_code=clean_device)

            feedback = verdict.feedback
            if flash_count >= limits.max_flash_trials:
                return finish(SessionStatus.FLASH_EXHAUSTED)
    except ExecutorEnvironmentError as exc:
        return finish(SessionStatus.ABORTED_ENV, abort_reason=str(exc))
