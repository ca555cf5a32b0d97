"""Canonical JSON and base58 helpers.

Canonical form: keys sorted, no insignificant whitespace, UTF-8. Every
signature and digest in the stack is computed over this byte form.
"""

import json
from typing import Any

import base58

from ssi_ehr.errors import MalformedPayload


def canonical_json(obj: Any) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def load_json(data: bytes | str) -> Any:
    try:
        return json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedPayload(f"not valid JSON: {exc}") from exc


def b58(data: bytes) -> str:
    return base58.b58encode(data).decode("ascii")


def unb58(text: str) -> bytes:
    try:
        return base58.b58decode(text)
    except (ValueError, TypeError) as exc:
        raise MalformedPayload(f"bad base58 field: {text!r}") from exc
