"""Uniform client layer for the black-box model endpoints.

Every model role (prompt engineer, generator, plausibility checker, editor,
pre/hard validators, inverter) is reached through the same JSON-over-HTTP
surface: POST to one of /design, /generate, /edit, /score, /check, /invert
with a JSON body, get a JSON envelope back. Every envelope carries a
non-negative ``cost_gpu_hours`` that the gateway accumulates per role.

Each request attempt, successful or not, lands in an append-only audit log,
so the log line count always equals the total attempt count.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import random
import string
import threading
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Callable, Mapping, Protocol

import numpy as np
import requests

from .bundles import PromptBundle, parse_bundles
from .errors import DimensionMismatch, InversionRefused, ProtocolViolation, ScoreUnavailable, TransportError
from .images import ImageRef, decode_png
from .scores import ScorePair
from .seeds import derive_seed

if TYPE_CHECKING:
    from .store import BlobStore


class Role(str, Enum):
    PROMPT_ENGINEER = "prompt_engineer"
    GENERATOR = "generator"
    PLAUSIBILITY = "plausibility"
    EDITOR = "editor"
    PRE_VALIDATOR = "pre_validator"
    HARD_VALIDATOR = "hard_validator"
    INVERTER = "inverter"


class BoolCheck(str, Enum):
    UNWANTED_MODS = "unwanted_mods"
    AESTHETICS = "aesthetics"


# Long side limits, snapped to the multiple-of-64 grid inside [860, 2200].
LONG_SIDE_MIN = 860
LONG_SIDE_MAX = 2200
SNAPPED_LONG_MIN = 896
SNAPPED_LONG_MAX = 2176
ASPECT_RATIO_MAX = 6.0

GENERATOR_STEPS_DEFAULT = 4
EDITOR_STEPS_RANGE = (18, 28)


@dataclass(frozen=True)
class EndpointConfig:
    role: Role
    base_url: str
    timeout: float = 120.0
    max_retries: int = 2
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")


def default_endpoints(base_url: str) -> dict[Role, EndpointConfig]:
    """All roles on one server, with the stock validator temperatures."""
    temps = {Role.PRE_VALIDATOR: 1e-6, Role.HARD_VALIDATOR: 0.0}
    return {
        role: EndpointConfig(role=role, base_url=base_url, temperature=temps.get(role, 0.0))
        for role in Role
    }


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    seed: int
    width: int
    height: int
    steps: int = GENERATOR_STEPS_DEFAULT

    def __post_init__(self) -> None:
        if not self.prompt.strip():
            raise ValueError("prompt is empty")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.width % 64 or self.height % 64:
            raise ValueError(f"dimensions must be multiples of 64, got {self.width}x{self.height}")
        long_side = max(self.width, self.height)
        if not LONG_SIDE_MIN <= long_side <= LONG_SIDE_MAX:
            raise ValueError(f"long side {long_side} outside [{LONG_SIDE_MIN}, {LONG_SIDE_MAX}]")
        ar = self.width / self.height
        if not 1.0 / ASPECT_RATIO_MAX <= ar <= ASPECT_RATIO_MAX:
            raise ValueError(f"aspect ratio {ar:.3f} outside [1/6, 6]")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")


def sample_resolution(
    rng: random.Random, ar_bounds: tuple[float, float] = (1.0 / ASPECT_RATIO_MAX, ASPECT_RATIO_MAX)
) -> tuple[int, int]:
    """Draw a (width, height) pair on the multiple-of-64 grid.

    The long side is uniform over the grid points inside the allowed range;
    the short side is uniform over grid points keeping the aspect ratio in
    bounds; orientation is a fair coin. ``ar_bounds`` narrows the ratio range
    (for example (1.0, 1.0) forces squares) but never widens it.
    """
    ar_lo = max(ar_bounds[0], 1.0 / ASPECT_RATIO_MAX)
    ar_hi = min(ar_bounds[1], ASPECT_RATIO_MAX)
    if ar_lo > ar_hi:
        raise ValueError("empty aspect-ratio range")
    # The long/short split means the effective ratio long/short lives in [1, ar_hi].
    long_side = 64 * rng.randint(SNAPPED_LONG_MIN // 64, SNAPPED_LONG_MAX // 64)
    min_short = 64 * math.ceil(long_side / ar_hi / 64)
    max_short = min(long_side, 64 * math.floor(long_side / max(ar_lo, 1.0) / 64))
    short_side = 64 * rng.randint(min_short // 64, max_short // 64)
    if rng.random() < 0.5:
        return long_side, short_side
    return short_side, long_side


_TRAILING_PUNCTUATION = set(string.punctuation)


def normalize_yes_no(text: str) -> bool:
    """Strict yes/no normalization: trim, casefold, strip trailing punctuation.

    Anything that does not land exactly on "yes" or "no" is a protocol
    violation, never silently treated as a refusal.
    """
    token = text.strip().casefold()
    while token and token[-1] in _TRAILING_PUNCTUATION:
        token = token[:-1].rstrip()
    if token == "yes":
        return True
    if token == "no":
        return False
    raise ProtocolViolation(f"expected yes/no, got {text!r}")


_INVERSION_BANNED_WORDS = ("revert", "undo", "restore", "back")


def editor_steps_for_seed(seed: int) -> int:
    """Per-job diffusion step count, uniform over the default editor range."""
    lo, hi = EDITOR_STEPS_RANGE
    return lo + derive_seed("editor-steps", seed) % (hi - lo + 1)


class Transport(Protocol):
    def post(self, base_url: str, path: str, payload: dict, timeout: float) -> dict: ...


class HttpTransport:
    """JSON POST over HTTP with a shared session."""

    def __init__(self, session: requests.Session | None = None):
        self._session = session or requests.Session()

    def post(self, base_url: str, path: str, payload: dict, timeout: float) -> dict:
        url = base_url.rstrip("/") + path
        try:
            response = self._session.post(url, json=payload, timeout=timeout)
        except requests.RequestException as exc:
            raise TransportError(f"POST {url} failed: {exc}") from exc
        if response.status_code != 200:
            raise TransportError(f"POST {url} returned HTTP {response.status_code}")
        try:
            body = response.json()
        except ValueError as exc:
            raise ProtocolViolation(f"POST {url} returned a non-JSON body") from exc
        if not isinstance(body, dict):
            raise ProtocolViolation(f"POST {url} returned a non-object body")
        return body


class InProcessTransport:
    """Calls a handler directly, round-tripping both sides through JSON.

    The round trip keeps the in-process path honest: anything that would not
    survive the wire fails here too.
    """

    def __init__(self, handler: Callable[[str, dict], dict]):
        self._handler = handler

    def post(self, base_url: str, path: str, payload: dict, timeout: float) -> dict:
        body = self._handler(path, json.loads(json.dumps(payload)))
        decoded = json.loads(json.dumps(body))
        if not isinstance(decoded, dict):
            raise ProtocolViolation(f"POST {path} returned a non-object body")
        return decoded


class AuditLog:
    """Append-only request log: one JSON line per attempt, no timestamps."""

    def __init__(self, path: str | None = None):
        self._path = path
        self._lock = threading.Lock()
        self._seq = 0
        self.lines_written = 0
        if path is not None:
            open(path, "a", encoding="utf-8").close()

    def record(self, role: Role, endpoint: str, request_sha256: str, status: str, cost: float) -> None:
        with self._lock:
            entry = {
                "seq": self._seq,
                "role": role.value,
                "endpoint": endpoint,
                "request_sha256": request_sha256,
                "status": status,
                "cost_gpu_hours": cost,
            }
            self._seq += 1
            self.lines_written += 1
            if self._path is not None:
                with open(self._path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")


class _LruCache:
    def __init__(self, capacity: int):
        self._capacity = capacity
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            if key not in self._data:
                return None
            self._data.move_to_end(key)
            return self._data[key]

    def put(self, key, value) -> None:
        with self._lock:
            self._data[key] = value
            self._data.move_to_end(key)
            while len(self._data) > self._capacity:
                self._data.popitem(last=False)


class ModelGateway:
    """Shared, thread-safe client over all configured model roles.

    Generated and edited images are persisted straight into the blob store;
    the gateway hands out :class:`ImageRef` values and keeps small LRU caches
    of encoded and decoded images to avoid repeated disk round trips.
    """

    def __init__(
        self,
        endpoints: Mapping[Role, EndpointConfig],
        transport: Transport,
        store: "BlobStore",
        audit_path: str | None = None,
        cache_size: int = 64,
        on_cost: Callable[[Role, float], None] | None = None,
    ):
        self._endpoints = dict(endpoints)
        self._transport = transport
        self._store = store
        self.audit = AuditLog(audit_path)
        self.on_cost = on_cost
        self._png_cache = _LruCache(cache_size)
        self._pixel_cache = _LruCache(cache_size)
        self._cost_lock = threading.Lock()
        self.cost_by_role: dict[str, float] = {}
        self.max_cost_by_role: dict[str, float] = {}

    @property
    def total_cost_gpu_hours(self) -> float:
        with self._cost_lock:
            return sum(self.cost_by_role.values())

    def observed_max_cost(self, role: Role) -> float:
        """Highest single-response cost seen for a role; 0 before any response."""
        with self._cost_lock:
            return self.max_cost_by_role.get(role.value, 0.0)

    def _config(self, role: Role) -> EndpointConfig:
        try:
            return self._endpoints[role]
        except KeyError:
            raise ValueError(f"no endpoint configured for role {role.value}") from None

    def _account(self, role: Role, cost: float) -> None:
        with self._cost_lock:
            self.cost_by_role[role.value] = self.cost_by_role.get(role.value, 0.0) + cost
            if cost > self.max_cost_by_role.get(role.value, 0.0):
                self.max_cost_by_role[role.value] = cost
        if self.on_cost is not None:
            self.on_cost(role, cost)

    def _call(self, role: Role, path: str, payload: dict) -> dict:
        cfg = self._config(role)
        digest = hashlib.sha256(
            json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
        ).hexdigest()
        last_error: TransportError | None = None
        for attempt in range(cfg.max_retries + 1):
            try:
                envelope = self._transport.post(cfg.base_url, path, payload, cfg.timeout)
            except TransportError as exc:
                self.audit.record(role, path, digest, "transport_error", 0.0)
                last_error = exc
                continue
            except ProtocolViolation:
                self.audit.record(role, path, digest, "protocol_violation", 0.0)
                raise
            cost = envelope.get("cost_gpu_hours")
            if not isinstance(cost, (int, float)) or isinstance(cost, bool) or cost < 0:
                self.audit.record(role, path, digest, "protocol_violation", 0.0)
                raise ProtocolViolation(f"{path} response lacks a non-negative cost_gpu_hours")
            self.audit.record(role, path, digest, "ok", float(cost))
            self._account(role, float(cost))
            return envelope
        assert last_error is not None
        raise last_error

    @staticmethod
    def _text_field(envelope: dict, path: str) -> str:
        text = envelope.get("text")
        if not isinstance(text, str):
            raise ProtocolViolation(f"{path} response is missing its text field")
        return text

    def _encoded(self, image: ImageRef) -> str:
        png = self._png_cache.get(image.image_id)
        if png is None:
            png = self._store.load_png(image.image_id)
            self._png_cache.put(image.image_id, png)
        return base64.b64encode(png).decode("ascii")

    def pixels(self, image: ImageRef) -> np.ndarray:
        """Decoded pixels for a gateway-produced or stored image."""
        arr = self._pixel_cache.get(image.image_id)
        if arr is None:
            arr = self._store.load_pixels(image.image_id)
            self._pixel_cache.put(image.image_id, arr)
        return arr

    def _ingest_image(self, envelope: dict, path: str) -> tuple[ImageRef, np.ndarray]:
        b64 = envelope.get("image_png_b64")
        if not isinstance(b64, str):
            raise ProtocolViolation(f"{path} response is missing image_png_b64")
        try:
            png = base64.b64decode(b64, validate=True)
            ref, pixels = self._store.put_png(png)
        except Exception as exc:
            raise ProtocolViolation(f"{path} returned an undecodable image: {exc}") from exc
        self._png_cache.put(ref.image_id, png)
        self._pixel_cache.put(ref.image_id, pixels)
        return ref, pixels

    def design_samples(self, task_payload: str) -> list[PromptBundle]:
        """Ask the prompt engineer for bundles; the reply text must be bundle JSON."""
        if not task_payload.strip():
            raise ValueError("task payload is empty")
        cfg = self._config(Role.PROMPT_ENGINEER)
        envelope = self._call(
            Role.PROMPT_ENGINEER,
            "/design",
            {"task": task_payload, "temperature": cfg.temperature},
        )
        return parse_bundles(self._text_field(envelope, "/design"))

    def generate(self, request: GenerationRequest) -> ImageRef:
        envelope = self._call(
            Role.GENERATOR,
            "/generate",
            {
                "prompt": request.prompt,
                "seed": request.seed,
                "width": request.width,
                "height": request.height,
                "steps": request.steps,
            },
        )
        ref, _ = self._ingest_image(envelope, "/generate")
        if (ref.width, ref.height) != (request.width, request.height):
            raise DimensionMismatch(
                f"generator returned {ref.width}x{ref.height}, requested {request.width}x{request.height}"
            )
        return ref

    def edit(self, image: ImageRef, instruction: str, seed: int, steps: int | None = None) -> ImageRef:
        if not instruction.strip():
            raise ValueError("instruction is empty")
        if steps is None:
            steps = editor_steps_for_seed(seed)
        envelope = self._call(
            Role.EDITOR,
            "/edit",
            {
                "image_png_b64": self._encoded(image),
                "instruction": instruction,
                "seed": seed,
                "steps": steps,
            },
        )
        ref, _ = self._ingest_image(envelope, "/edit")
        if (ref.width, ref.height) != (image.width, image.height):
            raise DimensionMismatch(
                f"editor returned {ref.width}x{ref.height} for a {image.width}x{image.height} input"
            )
        return ref

    def check_plausibility(self, image: ImageRef, prompt: str) -> bool:
        envelope = self._call(
            Role.PLAUSIBILITY,
            "/check",
            {"kind": "plausibility", "image_png_b64": self._encoded(image), "prompt": prompt},
        )
        return normalize_yes_no(self._text_field(envelope, "/check"))

    def check_bool(
        self,
        kind: BoolCheck,
        *,
        edited: ImageRef,
        instruction: str,
        source: ImageRef | None = None,
    ) -> bool:
        """One-word yes/no checks on an edit (validator endpoint).

        The unwanted-modifications check compares source and edited images,
        so it requires ``source``; the aesthetics check looks at the edited
        image alone.
        """
        payload: dict = {
            "kind": kind.value,
            "image_png_b64": self._encoded(edited),
            "instruction": instruction,
        }
        if kind is BoolCheck.UNWANTED_MODS:
            if source is None:
                raise ValueError("unwanted-modifications check requires the source image")
            payload["source_png_b64"] = self._encoded(source)
        envelope = self._call(Role.PRE_VALIDATOR, "/check", payload)
        return normalize_yes_no(self._text_field(envelope, "/check"))

    def _parse_score_text(self, text: str) -> ScorePair:
        try:
            body = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScoreUnavailable(f"score reply is not JSON: {text!r}") from exc
        if not isinstance(body, dict):
            raise ScoreUnavailable(f"score reply is not an object: {text!r}")
        try:
            adherence = body["InstructionAdherence"]
            aesthetic = body["ImageAesthetic"]
        except KeyError as exc:
            raise ScoreUnavailable(f"score reply is missing key {exc}") from exc
        if isinstance(adherence, bool) or isinstance(aesthetic, bool):
            raise ScoreUnavailable("score reply carries booleans, not numbers")
        try:
            return ScorePair.from_raw(float(adherence), float(aesthetic))
        except (TypeError, ValueError) as exc:
            raise ScoreUnavailable(f"score reply has non-numeric values: {text!r}") from exc

    def score(
        self,
        image_before: ImageRef,
        instruction: str,
        image_after: ImageRef,
        validator: Role = Role.PRE_VALIDATOR,
    ) -> ScorePair:
        """Two-axis scoring of an edit; the reply text must be a score JSON.

        A malformed reply earns exactly one identical retry before giving up
        with :class:`ScoreUnavailable`. Out-of-range values are clamped and
        flagged rather than rejected.
        """
        if validator not in (Role.PRE_VALIDATOR, Role.HARD_VALIDATOR):
            raise ValueError("validator must be the pre or hard validator role")
        cfg = self._config(validator)
        payload = {
            "image_before_png_b64": self._encoded(image_before),
            "instruction": instruction,
            "image_after_png_b64": self._encoded(image_after),
            "temperature": cfg.temperature,
        }
        last: ScoreUnavailable | None = None
        for _ in range(2):
            envelope = self._call(validator, "/score", payload)
            try:
                return self._parse_score_text(self._text_field(envelope, "/score"))
            except ScoreUnavailable as exc:
                last = exc
        assert last is not None
        raise last

    def _inverter_text(self, payload: dict) -> str:
        envelope = self._call(Role.INVERTER, "/invert", payload)
        text = self._text_field(envelope, "/invert").strip()
        if not text:
            raise ProtocolViolation("inverter returned an empty instruction")
        if "\n" in text:
            raise ProtocolViolation("inverter returned a multi-line instruction")
        words = {w.strip(string.punctuation).casefold() for w in text.split()}
        banned = sorted(words & set(_INVERSION_BANNED_WORDS))
        if banned:
            raise InversionRefused(f"inverse instruction uses banned word(s) {banned}: {text!r}")
        return text

    def invert(self, original_description: str, instruction: str) -> str:
        """One concise inverse instruction; refusal words reject the response."""
        if not original_description.strip() or not instruction.strip():
            raise ValueError("original description and instruction must be non-empty")
        return self._inverter_text(
            {"original_description": original_description, "instruction": instruction}
        )

    def rewrite_composite(self, original_description: str, instruction: str) -> str:
        """Rewrite a multi-sentence composite into one instruction."""
        if not original_description.strip() or not instruction.strip():
            raise ValueError("original description and instruction must be non-empty")
        return self._inverter_text(
            {
                "original_description": original_description,
                "instruction": instruction,
                "mode": "rewrite",
            }
        )
