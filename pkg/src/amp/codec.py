"""Canonical JSON (JCS) and CBOR (RFC 7049 canonical) codecs for manifest records.

Records are first lowered to a plain "wire tree" of dicts, lists, ints,
strings and bytes. JSON carries bytes as unpadded base64url and
timestamps as RFC 3339 strings; CBOR carries bytes natively and
timestamps as epoch milliseconds. Absent optionals are omitted, never
encoded as null.
"""

from __future__ import annotations

import base64
import enum
import json
import re
import types
import typing
from dataclasses import fields, is_dataclass
from datetime import datetime, timedelta, timezone
from functools import lru_cache

import cbor2

from . import manifest as m
from .errors import EncodingError, ManifestError

JSON_MAX_INT = 2**53 - 1
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)

_WIRE_OVERRIDES = {
    "media_id": "MediaID",
    "manifest_id": "ManifestID",
}


def wire_name(attr: str) -> str:
    if attr in _WIRE_OVERRIDES:
        return _WIRE_OVERRIDES[attr]
    return "".join(part[:1].upper() + part[1:] for part in attr.split("_"))


def b64e(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64d(text: str) -> bytes:
    if not isinstance(text, str):
        raise ManifestError(f"expected base64url string, got {type(text).__name__}")
    if not re.fullmatch(r"[A-Za-z0-9_-]*", text):
        raise ManifestError("invalid base64url string")
    return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))


def format_time(value: datetime) -> str:
    value = m.utc_ms(value)
    return value.strftime("%Y-%m-%dT%H:%M:%S.") + f"{value.microsecond // 1000:03d}Z"


def parse_time(text: str) -> datetime:
    if not isinstance(text, str):
        raise ManifestError("timestamp must be an RFC 3339 string")
    try:
        value = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise ManifestError(f"bad timestamp {text!r}") from exc
    return m.utc_ms(value)


def time_to_ms(value: datetime) -> int:
    delta = m.utc_ms(value) - _EPOCH
    return (delta.days * 86400 + delta.seconds) * 1000 + delta.microseconds // 1000


def ms_to_time(ms: int) -> datetime:
    if not isinstance(ms, int) or isinstance(ms, bool):
        raise ManifestError("CBOR timestamp must be an integer")
    return _EPOCH + timedelta(milliseconds=ms)


# --------------------------------------------------------------------------
# record <-> wire tree


def to_wire(obj, fmt: str):
    """Lower a record (or any field value) to a JSON- or CBOR-ready tree."""
    if is_dataclass(obj):
        out = {}
        for f in fields(obj):
            value = getattr(obj, f.name)
            if value is None:
                continue
            out[wire_name(f.name)] = to_wire(value, fmt)
        return out
    if isinstance(obj, bool):
        raise EncodingError("booleans are not part of the manifest model")
    if isinstance(obj, enum.IntEnum):
        return int(obj)
    if isinstance(obj, int):
        return obj
    if isinstance(obj, str):
        return obj
    if isinstance(obj, bytes):
        return b64e(obj) if fmt == "json" else obj
    if isinstance(obj, datetime):
        return format_time(obj) if fmt == "json" else time_to_ms(obj)
    if isinstance(obj, (tuple, list)):
        return [to_wire(v, fmt) for v in obj]
    raise EncodingError(f"cannot encode {type(obj).__name__}")


@lru_cache(maxsize=None)
def _hints(cls):
    return typing.get_type_hints(cls)


def _strip_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def from_wire(tp, value, fmt: str):
    """Rebuild a value of type ``tp`` from a wire tree, validating shapes."""
    tp = _strip_optional(tp)
    if tp is m.ChunkAuthenticator or typing.get_origin(tp) in (typing.Union, types.UnionType):
        if not isinstance(value, dict) or "ChunkingScheme" not in value:
            raise ManifestError("chunk authenticator without ChunkingScheme")
        try:
            cls = m.AUTHENTICATOR_TYPES[m.ChunkingScheme(value["ChunkingScheme"])]
        except (ValueError, TypeError):
            raise ManifestError(f"unknown ChunkingScheme {value['ChunkingScheme']!r}") from None
        return from_wire(cls, value, fmt)
    if is_dataclass(tp):
        if not isinstance(value, dict):
            raise ManifestError(f"{tp.__name__}: expected a map")
        hints = _hints(tp)
        known = {wire_name(f.name): f for f in fields(tp)}
        unknown = set(value) - set(known)
        if unknown:
            raise ManifestError(f"{tp.__name__}: unknown members {sorted(unknown)}")
        kwargs = {}
        for wname, f in known.items():
            if wname in value:
                if value[wname] is None:
                    raise ManifestError(f"{tp.__name__}.{wname}: null is not allowed")
                kwargs[f.name] = from_wire(hints[f.name], value[wname], fmt)
        try:
            return tp(**kwargs)
        except TypeError as exc:
            raise ManifestError(f"{tp.__name__}: {exc}") from None
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ManifestError("expected an array")
        (item_tp, _) = typing.get_args(tp)
        return tuple(from_wire(item_tp, v, fmt) for v in value)
    if isinstance(tp, type) and issubclass(tp, enum.IntEnum):
        try:
            return tp(value)
        except ValueError:
            raise ManifestError(f"{value!r} is not a valid {tp.__name__}") from None
    if tp is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ManifestError(f"expected integer, got {type(value).__name__}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ManifestError(f"expected string, got {type(value).__name__}")
        return value
    if tp is bytes:
        if fmt == "json":
            return b64d(value)
        if not isinstance(value, bytes):
            raise ManifestError(f"expected byte string, got {type(value).__name__}")
        return value
    if tp is datetime:
        return parse_time(value) if fmt == "json" else ms_to_time(value)
    raise ManifestError(f"unsupported field type {tp!r}")


# --------------------------------------------------------------------------
# JSON (JCS)

_ESCAPES = {'"': '\\"', "\\": "\\\\", "\b": "\\b", "\f": "\\f", "\n": "\\n", "\r": "\\r", "\t": "\\t"}


def _jcs_string(s: str) -> str:
    out = ['"']
    for ch in s:
        if ch in _ESCAPES:
            out.append(_ESCAPES[ch])
        elif ord(ch) < 0x20:
            out.append(f"\\u{ord(ch):04x}")
        else:
            out.append(ch)
    out.append('"')
    return "".join(out)


def _utf16_key(s: str):
    return s.encode("utf-16-be")


def _jcs(value, out: list):
    if isinstance(value, dict):
        out.append("{")
        for i, key in enumerate(sorted(value, key=_utf16_key)):
            if i:
                out.append(",")
            out.append(_jcs_string(key))
            out.append(":")
            _jcs(value[key], out)
        out.append("}")
    elif isinstance(value, list):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _jcs(item, out)
        out.append("]")
    elif isinstance(value, str):
        out.append(_jcs_string(value))
    elif isinstance(value, bool) or value is None:
        out.append(json.dumps(value))
    elif isinstance(value, int):
        if abs(value) > JSON_MAX_INT:
            raise EncodingError(f"integer {value} outside the JSON-safe range")
        out.append(str(value))
    else:
        raise EncodingError(f"cannot JCS-encode {type(value).__name__}")


def jcs_dumps(tree) -> bytes:
    """Serialize an int/str/list/dict tree per JCS. No floats are ever produced."""
    out: list = []
    _jcs(tree, out)
    try:
        return "".join(out).encode("utf-8")
    except UnicodeEncodeError as exc:
        raise EncodingError(f"string is not valid Unicode: {exc}") from None


def encode_canonical_json(record) -> bytes:
    return jcs_dumps(to_wire(record, "json"))


def decode_json(data: bytes, cls=m.ManifestContainer):
    try:
        tree = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"not valid JSON: {exc}") from None
    record = from_wire(cls, tree, "json")
    m.check(record)
    return record


# --------------------------------------------------------------------------
# CBOR


def _check_cbor_strings(tree):
    if isinstance(tree, str):
        try:
            tree.encode("utf-8")
        except UnicodeEncodeError as exc:
            raise EncodingError(f"string is not valid Unicode: {exc}") from None
    elif isinstance(tree, dict):
        for k, v in tree.items():
            _check_cbor_strings(k)
            _check_cbor_strings(v)
    elif isinstance(tree, list):
        for v in tree:
            _check_cbor_strings(v)


def cbor_dumps(tree) -> bytes:
    _check_cbor_strings(tree)
    try:
        return cbor2.dumps(tree, canonical=True)
    except (cbor2.CBOREncodeError, UnicodeEncodeError) as exc:
        raise EncodingError(str(exc)) from None


def cbor_loads(data: bytes):
    try:
        return cbor2.loads(data)
    except (cbor2.CBORDecodeError, ValueError) as exc:
        raise ManifestError(f"not valid CBOR: {exc}") from None


def encode_canonical_cbor(record) -> bytes:
    return cbor_dumps(to_wire(record, "cbor"))


def decode_cbor(data: bytes, cls=m.ManifestContainer):
    record = from_wire(cls, cbor_loads(data), "cbor")
    m.check(record)
    return record


def load_manifest(path) -> m.ManifestContainer:
    """Read a ``.amp.cbor`` or ``.amp.json`` file."""
    path = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if path.endswith(".json"):
        return decode_json(data)
    return decode_cbor(data)


def save_manifest(container: m.ManifestContainer, path) -> None:
    path = str(path)
    data = encode_canonical_json(container) if path.endswith(".json") else encode_canonical_cbor(container)
    with open(path, "wb") as fh:
        fh.write(data)
