"""Hardware configuration and task ingestion.

The config document is a JSON file with top-level keys ``schema_version``,
``platform {name, arch, board_id}``, ``modules [{name, pins[], interface}]``
and ``task {description}``. Key names are normative for the CLI. An optional
``secrets [{value, category}]`` list declares values the privacy filter must
always mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

SCHEMA_VERSION = 1

INTERFACES = ("gpio", "i2c", "spi", "uart", "onboard")
# i2c/spi are multi-drop buses, so two devices may legitimately share pins.
SHARED_BUS_INTERFACES = frozenset({"i2c", "spi"})


class ConfigError(ValueError):
    """A config document violates the schema; the message names the field."""


class PinConflictError(ConfigError):
    """Two modules claim the same pin without both being on a shared bus."""


@dataclass(frozen=True)
class ModuleBinding:
    component_name: str
    pins: tuple[str, ...]
    interface: str


@dataclass(frozen=True)
class HardwareConfig:
    platform_name: str
    platform_arch: str
    toolchain_board_id: str
    modules: tuple[ModuleBinding, ...]

    def component_names(self) -> list[str]:
        """Distinct component names in declaration order."""
        seen: list[str] = []
        for module in self.modules:
            if module.component_name not in seen:
                seen.append(module.component_name)
        return seen


@dataclass(frozen=True)
class TaskSpec:
    description: str
    reference_api_sequence: tuple[str, ...] | None = None
    expected_functionality_count: int | None = None


@dataclass(frozen=True)
class SecretDecl:
    """A config-declared secret value the privacy filter must mask."""

    value: str
    category: str = "other"


def _require(doc: dict, key: str, kind: type, where: str) -> Any:
    if key not in doc:
        raise ConfigError(f"{where}.{key}: missing required field")
    value = doc[key]
    if not isinstance(value, kind):
        raise ConfigError(f"{where}.{key}: expected {kind.__name__}")
    return value


def _parse_module(doc: Any, index: int) -> ModuleBinding:
    where = f"modules[{index}]"
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    name = _require(doc, "name", str, where)
    if not name.strip():
        raise ConfigError(f"{where}.name: must be non-empty")
    interface = _require(doc, "interface", str, where)
    if interface not in INTERFACES:
        raise ConfigError(
            f"{where}.interface: {interface!r} not one of {', '.join(INTERFACES)}"
        )
    raw_pins = doc.get("pins", [])
    if not isinstance(raw_pins, list):
        raise ConfigError(f"{where}.pins: expected a list")
    pins = tuple(str(p) for p in raw_pins)
    if not pins and interface != "onboard":
        raise ConfigError(
            f"{where}.pins: may be empty only for the onboard interface"
        )
    return ModuleBinding(component_name=name, pins=pins, interface=interface)


def _check_pin_conflicts(modules: tuple[ModuleBinding, ...]) -> None:
    claims: dict[str, list[ModuleBinding]] = {}
    for module in modules:
        for pin in module.pins:
            claims.setdefault(pin, []).append(module)
    for pin in sorted(claims):
        claimants = claims[pin]
        for i in range(len(claimants)):
            for j in range(i + 1, len(claimants)):
                a, b = claimants[i], claimants[j]
                if (
                    a.interface in SHARED_BUS_INTERFACES
                    and b.interface in SHARED_BUS_INTERFACES
                ):
                    continue
                first, second = sorted([a.component_name, b.component_name])
                raise PinConflictError(
                    f"pin {pin}: claimed by both {first!r} and {second!r} "
                    "without a shared-bus interface"
                )


def parse_hardware_config(document: str | dict) -> HardwareConfig:
    """Validate a config document (JSON text or parsed dict) into a HardwareConfig.

    Deterministic: identical documents yield identical configs. Every declared
    module appears exactly once, in declaration order.
    """
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"document: not valid JSON ({exc})") from exc
    if not isinstance(document, dict):
        raise ConfigError("document: expected a JSON object")

    version = document.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version: expected {SCHEMA_VERSION}, got {version!r}"
        )

    platform = _require(document, "platform", dict, "config")
    name = _require(platform, "name", str, "platform")
    arch = _require(platform, "arch", str, "platform")
    board_id = _require(platform, "board_id", str, "platform")
    if not name.strip():
        raise ConfigError("platform.name: must be non-empty")
    if not arch.strip():
        raise ConfigError("platform.arch: must be non-empty")

    raw_modules = document.get("modules", [])
    if not isinstance(raw_modules, list):
        raise ConfigError("modules: expected a list")
    modules = tuple(_parse_module(m, i) for i, m in enumerate(raw_modules))
    _check_pin_conflicts(modules)

    return HardwareConfig(
        platform_name=name,
        platform_arch=arch,
        toolchain_board_id=board_id,
        modules=modules,
    )


def parse_task(
    text: str,
    reference: list[str] | tuple[str, ...] | None = None,
    expected_functionality_count: int | None = None,
) -> TaskSpec:
    """Build a TaskSpec; the reference API list is stored verbatim."""
    if not isinstance(text, str) or not text.strip():
        raise ConfigError("task.description: must be non-empty")
    return TaskSpec(
        description=text,
        reference_api_sequence=tuple(reference) if reference is not None else None,
        expected_functionality_count=expected_functionality_count,
    )


def to_document(
    cfg: HardwareConfig,
    task: TaskSpec | None = None,
    secrets: list[SecretDecl] | tuple[SecretDecl, ...] = (),
) -> dict:
    """Serialize back to the config document shape; round-trips through parse."""
    doc: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "platform": {
            "name": cfg.platform_name,
            "arch": cfg.platform_arch,
            "board_id": cfg.toolchain_board_id,
        },
        "modules": [
            {"name": m.component_name, "pins": list(m.pins), "interface": m.interface}
            for m in cfg.modules
        ],
    }
    if task is not None:
        doc["task"] = {"description": task.description}
        if task.reference_api_sequence is not None:
            doc["task"]["reference_api_sequence"] = list(task.reference_api_sequence)
    if secrets:
        doc["secrets"] = [{"value": s.value, "category": s.category} for s in secrets]
    return doc


def load_config_document(
    path: str | Path,
) -> tuple[HardwareConfig, TaskSpec | None, list[SecretDecl]]:
    """Load a config file: hardware, optional task, and declared secrets."""
    raw = Path(path).read_text(encoding="utf-8")
    try:
        document = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    cfg = parse_hardware_config(document)

    task: TaskSpec | None = None
    task_doc = document.get("task")
    if task_doc is not None:
        if not isinstance(task_doc, dict):
            raise ConfigError("task: expected an object")
        task = parse_task(
            task_doc.get("description", ""),
            reference=task_doc.get("reference_api_sequence"),
        )

    secrets: list[SecretDecl] = []
    for i, entry in enumerate(document.get("secrets", [])):
        if not isinstance(entry, dict) or not isinstance(entry.get("value"), str):
            raise ConfigError(f"secrets[{i}]: expected an object with a value field")
        secrets.append(
            SecretDecl(value=entry["value"], category=entry.get("category", "other"))
        )
    return cfg, task, secrets
