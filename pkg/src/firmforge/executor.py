"""Toolchain executors: compile a sketch, flash it, and capture serial output.

Two interchangeable backends implement the same contract, so the programming
loops run unchanged against either:

* ``ArduinoCliExecutor`` shells out to the arduino-cli toolchain (compile,
  upload, library install, serial monitor).
* ``SimulatedExecutor`` replays a FaultScript — a JSON test double dictating
  per-trial compile outcomes and flash logs, keyed by trial index or by
  code-content predicates. Unscripted flash trials echo the debug marker lines
  found in the compiled source, so well-formed firmware "runs" plausibly.

Environment problems (missing toolchain, busy port) raise
ExecutorEnvironmentError: they are not code defects and must abort the session
instead of feeding the debug loops.
"""

from __future__ import annotations

import json
import logging
import re
import shutil
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from .hardware import HardwareConfig
from .resolver import Resolution

log = logging.getLogger(__name__)

MARKER_TOKEN = "@DBG"
DEFAULT_CAPTURE_WINDOW_MS = 10_000
DEFAULT_COMPILE_TIMEOUT_S = 300

_MARKER_IN_LINE_RE = re.compile(r"@DBG\|[A-Za-z0-9_]+\|(?:START|END|CHECK\|[^\"\n]*)")


class ExecutorEnvironmentError(RuntimeError):
    """The toolchain or port is unusable; distinct from a compile failure."""


@dataclass(frozen=True)
class BinaryArtifact:
    artifact_id: str
    payload: str = ""  # simulated backend: source; real backend: build dir


@dataclass(frozen=True)
class CompileResult:
    success: bool
    log: str
    binary: BinaryArtifact | None = None

    def __post_init__(self) -> None:
        if self.success != (self.binary is not None):
            raise ValueError("success must coincide with a binary being present")


@dataclass(frozen=True)
class FlashLog:
    lines: tuple[tuple[int, str], ...]
    capture_window_ms: int
    port_id: str


@dataclass(frozen=True)
class InstallReport:
    installed: tuple[str, ...] = ()
    already_present: tuple[str, ...] = ()
    failed: tuple[tuple[str, str], ...] = ()


def make_flash_log(
    entries: list[tuple[int, str]], capture_window_ms: int, port_id: str
) -> FlashLog:
    """Normalise timestamps to non-decreasing order (with a warning)."""
    normalised: list[tuple[int, str]] = []
    highest = 0
    adjusted = False
    for ts, text in entries:
        if ts < highest:
            adjusted = True
            ts = highest
        highest = ts
        normalised.append((ts, text))
    if adjusted:
        log.warning("flash log timestamps were out of order; clamped to non-decreasing")
    return FlashLog(
        lines=tuple(normalised), capture_window_ms=capture_window_ms, port_id=port_id
    )


def extract_marker_lines(source: str) -> list[str]:
    """Marker strings embedded in the source, in source order."""
    markers = []
    for line in source.splitlines():
        match = _MARKER_IN_LINE_RE.search(line)
        if match:
            markers.append(match.group(0))
    return markers


# --- fault scripts -----------------------------------------------------------


@dataclass(frozen=True)
class FaultScript:
    """Scripted outcomes for the simulated backend.

    ``compile`` directives: ``{"trial": n, "outcome": "ok"|"error", "log": ...}``
    or ``{"when_code_contains": "...", "outcome": ..., "log": ...}``.
    ``flash`` directives: ``{"trial": n, "lines": [...]}`` or
    ``{"when_code_contains": "...", "lines": [...]}``; a line is either a
    string (synthetic timestamp) or a ``[ts_ms, text]`` pair. Content
    predicates win over trial directives. Trial indexes are 1-based.
    """

    compile_directives: tuple[dict, ...] = ()
    flash_directives: tuple[dict, ...] = ()

    def __post_init__(self) -> None:
        for directive in (*self.compile_directives, *self.flash_directives):
            trial = directive.get("trial")
            if trial is not None and (not isinstance(trial, int) or trial < 1):
                raise ValueError(f"fault script trial index must be >= 1, got {trial!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "FaultScript":
        return cls(
            compile_directives=tuple(doc.get("compile", [])),
            flash_directives=tuple(doc.get("flash", [])),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "FaultScript":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @staticmethod
    def _pick(directives: tuple[dict, ...], trial: int, code: str) -> dict | None:
        for directive in directives:
            needle = directive.get("when_code_contains")
            if needle is not None and needle in code:
                return directive
        for directive in directives:
            if directive.get("trial") == trial:
                return directive
        return None

    def compile_outcome(self, trial: int, code: str) -> tuple[bool, str]:
        directive = self._pick(self.compile_directives, trial, code)
        if directive is None:
            return True, "compiled (simulated)"
        if directive.get("outcome", "ok") == "ok":
            return True, directive.get("log", "compiled (simulated)")
        return False, directive.get("log", "error: simulated compile failure")

    def flash_lines(self, trial: int, code: str) -> list | None:
        directive = self._pick(self.flash_directives, trial, code)
        if directive is None:
            return None
        return list(directive.get("lines", []))


class SimulatedExecutor:
    """Deterministic in-memory backend driven by a FaultScript.

    Single-session: it keeps its own compile/flash call counters, which the
    script's trial indexes refer to.
    """

    def __init__(self, script: FaultScript | None = None, port_id: str = "SIM0"):
        self.script = script or FaultScript()
        self.port_id = port_id
        self.compile_calls = 0
        self.flash_calls = 0
        self._installed: set[str] = set()

    def compile(
        self, code: str, cfg: HardwareConfig, libs: Resolution | None = None
    ) -> CompileResult:
        self.compile_calls += 1
        if not code.strip():
            return CompileResult(success=False, log="error: empty source", binary=None)
        ok, text = self.script.compile_outcome(self.compile_calls, code)
        if not ok:
            return CompileResult(success=False, log=text, binary=None)
        binary = BinaryArtifact(artifact_id=f"sim-bin-{self.compile_calls}", payload=code)
        return CompileResult(success=True, log=text, binary=binary)

    def flash_and_capture(
        self,
        binary: BinaryArtifact,
        cfg: HardwareConfig,
        window_ms: int = DEFAULT_CAPTURE_WINDOW_MS,
    ) -> FlashLog:
        self.flash_calls += 1
        if window_ms <= 0:
            return FlashLog(lines=(), capture_window_ms=max(window_ms, 0), port_id=self.port_id)
        scripted = self.script.flash_lines(self.flash_calls, binary.payload)
        if scripted is None:
            scripted = extract_marker_lines(binary.payload)
        entries: list[tuple[int, str]] = []
        synthetic = 0
        for item in scripted:
            if isinstance(item, str):
                entries.append((synthetic, item))
                synthetic += 10
            else:
                ts, text = int(item[0]), str(item[1])
                entries.append((ts, text))
                synthetic = max(synthetic, ts) + 10
        entries = [(ts, text) for ts, text in entries if ts <= window_ms]
        return make_flash_log(entries, window_ms, self.port_id)

    def install_libraries(self, resolution: Resolution) -> InstallReport:
        installed: list[str] = []
        present: list[str] = []
        for component, (details, _) in resolution.assignments.items():
            spec = f"{details.name}@{details.latest_version()}"
            if spec in self._installed:
                present.append(spec)
            else:
                self._installed.add(spec)
                installed.append(spec)
        return InstallReport(installed=tuple(installed), already_present=tuple(present))


# --- real toolchain backend --------------------------------------------------


class ArduinoCliExecutor:
    """Backend that shells out to the arduino-cli toolchain.

    Requires the toolchain, board support, and a serial port; never exercised
    by the offline test suite.
    """

    def __init__(
        self,
        port: str,
        cli_binary: str = "arduino-cli",
        workdir: str | Path | None = None,
        compile_timeout_s: int = DEFAULT_COMPILE_TIMEOUT_S,
        baud: int = 115200,
    ):
        self.port = port
        self.cli_binary = cli_binary
        self.workdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="firmforge-"))
        self.compile_timeout_s = compile_timeout_s
        self.baud = baud

    def _run(self, args: list[str], timeout_s: int) -> subprocess.CompletedProcess:
        if shutil.which(self.cli_binary) is None:
            raise ExecutorEnvironmentError(f"toolchain binary {self.cli_binary!r} not found")
        try:
            return subprocess.run(
                [self.cli_binary, *args],
                capture_output=True,
                text=True,
                timeout=timeout_s,
            )
        except OSError as exc:
            raise ExecutorEnvironmentError(f"failed to run {self.cli_binary}: {exc}") from exc

    def _sketch_dir(self, code: str) -> Path:
        sketch = self.workdir / "sketch"
        sketch.mkdir(parents=True, exist_ok=True)
        (sketch / "sketch.ino").write_text(code, encoding="utf-8")
        return sketch

    def compile(
        self, code: str, cfg: HardwareConfig, libs: Resolution | None = None
    ) -> CompileResult:
        if not code.strip():
            return CompileResult(success=False, log="error: empty source", binary=None)
        sketch = self._sketch_dir(code)
        build_dir = self.workdir / "build"
        try:
            proc = self._run(
                [
                    "compile",
                    "--fqbn",
                    cfg.toolchain_board_id,
                    "--build-path",
                    str(build_dir),
                    str(sketch),
                ],
                timeout_s=self.compile_timeout_s,
            )
        except subprocess.TimeoutExpired:
            return CompileResult(
                success=False,
                log=f"error: compile timed out after {self.compile_timeout_s}s",
                binary=None,
            )
        output = proc.stdout + proc.stderr
        if proc.returncode != 0:
            return CompileResult(success=False, log=output, binary=None)
        return CompileResult(
            success=True,
            log=output,
            binary=BinaryArtifact(artifact_id=str(build_dir), payload=str(sketch)),
        )

    def flash_and_capture(
        self,
        binary: BinaryArtifact,
        cfg: HardwareConfig,
        window_ms: int = DEFAULT_CAPTURE_WINDOW_MS,
    ) -> FlashLog:
        proc = self._run(
            [
                "upload",
                "-p",
                self.port,
                "--fqbn",
                cfg.toolchain_board_id,
                "--input-dir",
                binary.artifact_id,
                binary.payload,
            ],
            timeout_s=self.compile_timeout_s,
        )
        if proc.returncode != 0:
            raise ExecutorEnvironmentError(
                f"upload to {self.port} failed: {proc.stdout + proc.stderr}"
            )
        return self._capture_serial(window_ms)

    def _capture_serial(self, window_ms: int) -> FlashLog:
        if window_ms <= 0:
            return FlashLog(lines=(), capture_window_ms=max(window_ms, 0), port_id=self.port)
        args = [self.cli_binary, "monitor", "-p", self.port, "--config", f"baudrate={self.baud}"]
        entries: list[tuple[int, str]] = []
        started = time.monotonic()
        try:
            proc = subprocess.Popen(
                args, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True
            )
        except OSError as exc:
            raise ExecutorEnvironmentError(f"serial monitor failed on {self.port}: {exc}") from exc
        try:
            assert proc.stdout is not None
            while (time.monotonic() - started) * 1000 < window_ms:
                line = proc.stdout.readline()
                if not line:
                    break
                ts = int((time.monotonic() - started) * 1000)
                entries.append((ts, line.rstrip("\r\n")))
        finally:
            proc.kill()
            proc.wait()
        return make_flash_log(entries, window_ms, self.port)

    def install_libraries(self, resolution: Resolution) -> InstallReport:
        listing = self._run(["lib", "list"], timeout_s=60)
        present_names = listing.stdout
        installed: list[str] = []
        present: list[str] = []
        failed: list[tuple[str, str]] = []
        for component, (details, _) in resolution.assignments.items():
            spec = f"{details.name}@{details.latest_version()}"
            if details.name in present_names:
                present.append(spec)
                continue
            proc = self._run(["lib", "install", spec], timeout_s=300)
            if proc.returncode == 0:
                installed.append(spec)
            else:
                failed.append((spec, (proc.stdout + proc.stderr).strip()))
        return InstallReport(
            installed=tuple(installed),
            already_present=tuple(present),
            failed=tuple(failed),
        )
