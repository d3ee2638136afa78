"""Flat ``key=value`` text files used for manifests and checkpoint headers."""

from __future__ import annotations

import dataclasses
import types
import typing


class FieldError(ValueError):
    """A key=value field is unknown, missing, or unparsable."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def dumps(values: dict) -> str:
    lines = []
    for key in sorted(values):
        value = values[key]
        if value is None:
            text = ""
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        if "\n" in text:
            raise FieldError(key, "values may not contain newlines")
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FieldError(f"line {lineno}", f"expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _convert(field: str, text: str, kind):
    origin = typing.get_origin(kind)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(kind) if a is not type(None)]
        if text == "":
            return None
        return _convert(field, text, args[0])
    try:
        if kind is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
    except ValueError:
        raise FieldError(field, f"cannot parse {text!r} as {kind.__name__}") from None
    raise FieldError(field, f"unsupported field type {kind!r}")


def to_dataclass(cls, values: dict[str, str], *, strict: bool = True):
    """Build ``cls`` from string values, converting per the field annotations."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    if strict:
        for key in values:
            if key not in names:
                raise FieldError(key, f"unknown field for {cls.__name__}")
    kwargs = {k: _convert(k, v, hints[k]) for k, v in values.items() if k in names}
    return cls(**kwargs)
