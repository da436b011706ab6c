"""Prompt bundles: one text-to-image prompt plus its list of edit instructions.

Bundles arrive as a JSON array of ``{"prompt": str, "edits": [str, ...]}``
objects produced by an external prompt-engineering model. This module parses
and validates that shape and assigns each bundle a deterministic content id so
that pipeline stages can join on it without a database.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, replace
from typing import Any, Iterable

from .errors import BundleParseError, BundleValidationError

DEFAULT_MAX_EDITS = 16

_WS = re.compile(r"\s+")


def _normalize_ws(text: str) -> str:
    return _WS.sub(" ", text).strip()


@dataclass(frozen=True)
class EditInstruction:
    """A single natural-language edit, positioned within its bundle."""

    edit_index: int
    text: str
    is_composite: bool = False


@dataclass(frozen=True)
class PromptBundle:
    """A generation prompt and its coherent edit instructions."""

    bundle_id: str
    t2i_prompt: str
    edits: tuple[EditInstruction, ...]


def bundle_content_id(t2i_prompt: str, edit_texts: Iterable[str]) -> str:
    """Deterministic id: digest of a whitespace-normalized canonical form.

    Identity covers only the textual content, so derived flags (composites)
    never change a bundle's id.
    """
    canonical = json.dumps(
        {"edits": [_normalize_ws(t) for t in edit_texts], "prompt": _normalize_ws(t2i_prompt)},
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def make_bundle(t2i_prompt: str, edit_texts: Iterable[str]) -> PromptBundle:
    """Build a validated bundle from raw texts (outer whitespace stripped)."""
    prompt = t2i_prompt.strip()
    texts = [t.strip() for t in edit_texts]
    if not prompt:
        raise BundleValidationError("t2i prompt is empty")
    if not texts:
        raise BundleValidationError("edits list is empty")
    for i, t in enumerate(texts):
        if not t:
            raise BundleValidationError(f"edit {i} is empty")
    edits = tuple(EditInstruction(edit_index=i, text=t) for i, t in enumerate(texts))
    return PromptBundle(bundle_id=bundle_content_id(prompt, texts), t2i_prompt=prompt, edits=edits)


def parse_bundles(data: bytes | str, max_edits: int = DEFAULT_MAX_EDITS) -> list[PromptBundle]:
    """Parse a JSON array of ``{"prompt", "edits"}`` objects into bundles.

    Raises ``BundleParseError`` (with the decoder's character offset) on
    malformed JSON and ``BundleValidationError`` (naming the element index)
    on shape violations.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        payload = json.loads(data)
    except json.JSONDecodeError as exc:
        raise BundleParseError(f"invalid JSON at offset {exc.pos}: {exc.msg}", offset=exc.pos, raw=data) from exc
    if not isinstance(payload, list):
        raise BundleValidationError(f"expected a JSON array, got {type(payload).__name__}")

    bundles: list[PromptBundle] = []
    for idx, item in enumerate(payload):
        bundles.append(_parse_element(idx, item, max_edits))
    return bundles


def _parse_element(idx: int, item: Any, max_edits: int) -> PromptBundle:
    if not isinstance(item, dict):
        raise BundleValidationError(f"element {idx}: expected an object", element=idx)
    prompt = item.get("prompt")
    edits = item.get("edits")
    if not isinstance(prompt, str) or not prompt.strip():
        raise BundleValidationError(f"element {idx}: missing or empty 'prompt'", element=idx)
    if not isinstance(edits, list) or not edits:
        raise BundleValidationError(f"element {idx}: missing or empty 'edits'", element=idx)
    if len(edits) > max_edits:
        raise BundleValidationError(
            f"element {idx}: {len(edits)} edits exceeds the configured maximum of {max_edits}", element=idx
        )
    for j, text in enumerate(edits):
        if not isinstance(text, str) or not text.strip():
            raise BundleValidationError(f"element {idx}: edit {j} is missing or empty", element=idx)
    try:
        return make_bundle(prompt, edits)
    except BundleValidationError as exc:
        raise BundleValidationError(f"element {idx}: {exc}", element=idx) from exc


def mark_composites(bundle: PromptBundle) -> PromptBundle:
    """Flag the final instruction of a multi-edit bundle as composite.

    Bundles with a single edit are returned unchanged; the flag never alters
    the bundle id.
    """
    if len(bundle.edits) < 2:
        return bundle
    last = len(bundle.edits) - 1
    edits = tuple(replace(e, is_composite=(e.edit_index == last)) for e in bundle.edits)
    return replace(bundle, edits=edits)


def serialize_bundles(bundles: Iterable[PromptBundle]) -> str:
    """Render bundles back to the input JSON array shape."""
    payload = [{"prompt": b.t2i_prompt, "edits": [e.text for e in b.edits]} for b in bundles]
    return json.dumps(payload, ensure_ascii=False, indent=2)
