"""Run configuration stored as flat ``section.key = value`` text.

Grammar, one entry per line::

    # comment (also allowed after a value)
    model.hidden_dim = 128
    train.base_lr = 6.4e-05
    run.out_dir = runs/a

Values are Python literals (ints, floats, ``True``/``False``, ``None``, quoted
strings); anything that is not a literal is taken as a bare string. Unknown
sections or keys are errors, so typos do not pass silently.
"""

from __future__ import annotations

import ast
import dataclasses
from pathlib import Path

from .errors import ConfigurationError
from .model import ModelConfig
from .training import DataConfig, TrainConfig


@dataclasses.dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    out_dir: str = "runs/default"


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()
    run: RunSettings = RunSettings()

    def dumps(self) -> str:
        lines = []
        for section in SECTIONS:
            for f in dataclasses.fields(getattr(self, section)):
                value = getattr(getattr(self, section), f.name)
                lines.append(f"{section}.{f.name} = {value!r}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    def replace(self, section: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


SECTIONS = ("model", "data", "train", "run")


def _coerce(raw: str, default):
    try:
        value = ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        value = raw
    # ints are accepted where floats are expected; bools are not numbers here
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if default is not None and value is not None and type(value) is not type(default):
        raise ConfigurationError(f"expected {type(default).__name__}, got {raw!r}")
    return value


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply the entries in ``text`` on top of ``base`` (defaults when omitted)."""
    cfg = base or RunConfig()
    updates: dict[str, dict] = {s: {} for s in SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = _strip_comment(line).strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {lineno}: expected 'section.key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise ConfigurationError(f"line {lineno}: unknown section {section!r}")
        defaults = {f.name: getattr(getattr(cfg, section), f.name) for f in dataclasses.fields(getattr(cfg, section))}
        if name not in defaults:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        try:
            updates[section][name] = _coerce(raw, defaults[name])
        except ConfigurationError as exc:
            raise ConfigurationError(f"line {lineno}: {key}: {exc}") from None
    for section, changes in updates.items():
        if changes:
            try:
                cfg = cfg.replace(section, **changes)
            except (ValueError, TypeError) as exc:
                raise ConfigurationError(f"section {section}: {exc}") from exc
    return cfg


def _strip_comment(line: str) -> str:
    """Cut at the first '#' outside quotes."""
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
