"""Key-value run configuration.

Config files use INI syntax (``configparser``)::

    # comments start with '#' or ';'
    [synth]
    games = 16
    events_per_game = 8
    distances = 2, 8, 15, 22, 26

    [run]
    task = caption
    streams = T+BAL+BAS+PB+PA
    epochs = 80
    lr = 0.002

    [ablate]
    rows = T; T+BAL; T+BAS; T+PB; T+PA; T+BAL+BAS; T+BAL+BAS+PB; T+BAL+BAS+PB+PA
    seeds = 0, 1, 2

Each key must name a field of the section's dataclass; values are coerced to
that field's type (ints, floats, ``true``/``false``, comma-separated tuples).
Unknown sections or keys are errors.  ``--seed`` on the command line
overrides ``seed`` in both [synth] and [run].
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def _coerce(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if raw.strip().lower() in ("", "none", "null"):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(raw, inner, key)
    if origin is tuple:
        item = args[0] if args else str
        return tuple(_coerce(p, item, key) for p in raw.replace(";", ",").split(",") if p.strip())
    if hint is bool:
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if hint in (int, float, str):
        try:
            return hint(raw.strip())
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r} as {hint.__name__}") from exc
    raise ConfigError(f"{key}: unsupported field type {hint!r}")


def build(cls, values: dict[str, str], section: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        kwargs[key] = _coerce(raw, hints[key], f"[{section}] {key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def read_sections(path: str | Path | None, allowed: typing.Iterable[str]) -> dict[str, dict[str, str]]:
    allowed = set(allowed)
    out: dict[str, dict[str, str]] = {s: {} for s in allowed}
    if path is None:
        return out
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    with open(path, encoding="utf-8") as fh:
        try:
            parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
    for sec in parser.sections():
        if sec not in allowed:
            raise ConfigError(f"unknown section [{sec}]; expected one of {sorted(allowed)}")
        out[sec] = dict(parser[sec])
    return out


def canonical(obj) -> str:
    """Stable JSON text used for hashing configs."""
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical(obj).encode("utf-8")).hexdigest()
