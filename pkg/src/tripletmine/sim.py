"""Deterministic simulated backend for every model role.

The simulator serves the full wire protocol offline. Generated images are a
coarse noise background (fast to encode, highly compressible) with a few
solid-colored rectangles laid out on a 3x3 grid, keyed by the prompt. The
editor resolves an instruction to one of those rectangles by hashing the
instruction text after its leading verb, then draws or erases it, producing
a genuinely local pixel change for the diff gate to measure. Scenes are
tracked by pixel digest, so editing a previously produced image knows its
rectangles; unknown images fall back to a generic deterministic patch edit.

Everything is a pure function of (backend seed, request payload) plus the
digest registry, so repeating a request returns byte-identical responses.

Fault injection is content-keyed: a request misbehaves when its instruction
or prompt contains a marker substring, which keeps faults idempotent under
retry and lets tests target individual candidates.
"""

from __future__ import annotations

import base64
import hashlib
import json
import random
import string
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .images import decode_png, encode_png, pixel_digest
from .seeds import derive_seed

_REMOVE_VERBS = {"remove", "delete", "erase", "get", "take", "clear"}
_ADD_VERBS = {"add", "place", "put", "insert", "draw"}

_PALETTE = (
    (220, 40, 40),
    (40, 180, 60),
    (50, 90, 220),
    (230, 200, 40),
    (170, 60, 200),
    (40, 200, 200),
    (240, 130, 30),
    (120, 90, 50),
)

_NOUNS = (
    "cactus", "lamp", "mug", "book", "clock", "plant", "vase", "radio",
    "candle", "bottle", "bowl", "hat", "frame", "globe", "kettle", "basket",
)


@dataclass(frozen=True)
class SimCosts:
    """Fixed GPU-hour price per role, reported in every response."""

    prompt_engineer: float = 0.010
    generator: float = 0.020
    plausibility: float = 0.005
    editor: float = 0.050
    validator: float = 0.010
    inverter: float = 0.005


@dataclass(frozen=True)
class FaultPlan:
    """Marker substrings that trigger misbehavior when present in the text."""

    score_malformed_marker: str = "[faulty-score]"
    score_out_of_range_marker: str = "[wild-score]"
    bool_gibberish_marker: str = "[gibberish-check]"
    implausible_marker: str = "[implausible]"
    unwanted_marker: str = "[unwanted-mods]"
    ugly_marker: str = "[low-aesthetic]"
    scatter_marker: str = "[scatter-noise]"
    noop_marker: str = "[no-op-edit]"
    refuse_invert_marker: str = "[refuse-invert]"


@dataclass(frozen=True)
class _Rect:
    x0: int
    y0: int
    x1: int
    y1: int
    color: tuple[int, int, int]


@dataclass(frozen=True)
class _Scene:
    width: int
    height: int
    bg_key: int
    rects: tuple[_Rect, ...]
    present: frozenset[int]


def _instruction_mode(instruction: str) -> tuple[str, str]:
    """Split an instruction into an edit mode and its residual text.

    The residual text is what identifies the target object, so adding and
    removing the same object resolve to the same rectangle.
    """
    stripped = instruction.strip()
    head, _, rest = stripped.partition(" ")
    verb = head.strip(string.punctuation).casefold()
    if verb in _ADD_VERBS:
        return "add", rest.strip().casefold()
    if verb in _REMOVE_VERBS:
        return "remove", rest.strip().casefold()
    return "toggle", stripped.casefold()


class SimBackend:
    """In-process deterministic server for all six endpoints."""

    def __init__(
        self,
        seed: int,
        costs: SimCosts | None = None,
        faults: FaultPlan | None = None,
        score_profile: str = "high",
    ):
        if score_profile not in ("high", "mixed", "low"):
            raise ValueError("score_profile must be high, mixed, or low")
        self.seed = seed
        self.costs = costs or SimCosts()
        self.faults = faults or FaultPlan()
        self.score_profile = score_profile
        self._scenes: dict[str, _Scene] = {}
        # PNG bytes -> pixel digest, so repeated sends of the same image
        # (scoring, checks, retries) skip the decode entirely
        self._digest_by_png: dict[bytes, str] = {}
        self._lock = threading.Lock()
        self.requests_served = 0

    def _png_digest(self, png: bytes) -> str:
        key = hashlib.sha256(png).digest()
        with self._lock:
            cached = self._digest_by_png.get(key)
        if cached is None:
            cached = pixel_digest(decode_png(png))
            with self._lock:
                self._digest_by_png[key] = cached
        return cached

    # Scene construction

    def _layout(self, prompt: str, width: int, height: int) -> tuple[_Rect, ...]:
        rng = random.Random(derive_seed(self.seed, "layout", prompt))
        count = rng.randint(2, 5)
        cells = rng.sample(range(9), count)
        rects = []
        for cell in cells:
            row, col = divmod(cell, 3)
            cw, ch = width // 3, height // 3
            mx, my = max(4, cw // 8), max(4, ch // 8)
            rects.append(
                _Rect(
                    x0=col * cw + mx,
                    y0=row * ch + my,
                    x1=(col + 1) * cw - mx,
                    y1=(row + 1) * ch - my,
                    color=_PALETTE[rng.randrange(len(_PALETTE))],
                )
            )
        return tuple(rects)

    def _background(self, scene: _Scene) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(scene.bg_key))
        tile = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        reps_y = -(-scene.height // 8)
        reps_x = -(-scene.width // 8)
        big = np.repeat(np.repeat(tile, reps_y, axis=0), reps_x, axis=1)
        return np.ascontiguousarray(big[: scene.height, : scene.width])

    def _render(self, scene: _Scene) -> np.ndarray:
        img = self._background(scene)
        for idx in sorted(scene.present):
            r = scene.rects[idx]
            img[r.y0 : r.y1, r.x0 : r.x1] = r.color
        return img

    def _register(self, pixels: np.ndarray, scene: _Scene) -> str:
        digest = pixel_digest(pixels)
        with self._lock:
            self._scenes.setdefault(digest, scene)
        return digest

    # Endpoint handlers

    def handle(self, path: str, payload: dict) -> dict:
        with self._lock:
            self.requests_served += 1
        handlers = {
            "/design": self._handle_design,
            "/generate": self._handle_generate,
            "/edit": self._handle_edit,
            "/score": self._handle_score,
            "/check": self._handle_check,
            "/invert": self._handle_invert,
        }
        if path not in handlers:
            raise ValueError(f"unknown endpoint {path}")
        return handlers[path](payload)

    def _handle_design(self, payload: dict) -> dict:
        task = payload["task"]
        rng = random.Random(derive_seed(self.seed, "design", task))
        bundles = []
        for _ in range(3):
            nouns = rng.sample(_NOUNS, 4)
            prompt = f"A bright room with a {nouns[0]}, a {nouns[1]}, and a {nouns[2]} on a table."
            edits = [f"Remove the {nouns[0]}.", f"Add a {nouns[3]} next to the {nouns[1]}."]
            if rng.random() < 0.5:
                edits.append(f"Remove the {nouns[1]} and the {nouns[2]}.")
            bundles.append({"prompt": prompt, "edits": edits})
        return {"text": json.dumps(bundles), "cost_gpu_hours": self.costs.prompt_engineer}

    def _handle_generate(self, payload: dict) -> dict:
        prompt = payload["prompt"]
        width, height = int(payload["width"]), int(payload["height"])
        seed = int(payload["seed"])
        rects = self._layout(prompt, width, height)
        scene = _Scene(
            width=width,
            height=height,
            bg_key=derive_seed(self.seed, "background", prompt, seed, width, height),
            rects=rects,
            present=frozenset(range(len(rects))),
        )
        pixels = self._render(scene)
        self._register(pixels, scene)
        png = encode_png(pixels)
        return {
            "image_png_b64": base64.b64encode(png).decode("ascii"),
            "cost_gpu_hours": self.costs.generator,
        }

    def _scatter(self, pixels: np.ndarray, instruction: str) -> np.ndarray:
        """Flip isolated pixels on a sparse grid: many tiny change components."""
        out = pixels.copy()
        h, w = out.shape[:2]
        rng = np.random.Generator(np.random.PCG64(derive_seed(self.seed, "scatter", instruction)))
        ys = np.arange(0, h, 4)
        xs = np.arange(0, w, 4)
        grid_y = rng.choice(ys, size=min(1000, len(ys) * len(xs)), replace=True)
        grid_x = rng.choice(xs, size=len(grid_y), replace=True)
        out[grid_y, grid_x] = (out[grid_y, grid_x].astype(np.int16) + 128) % 256
        return out

    def _stamp(self, pixels: np.ndarray, seed: int) -> np.ndarray:
        """Small seed-keyed patch so different edit seeds give distinct outputs."""
        out = pixels if pixels.flags.writeable else pixels.copy()
        h, w = out.shape[:2]
        key = derive_seed(self.seed, "stamp", seed)
        x0 = key % max(1, w - 12)
        y0 = (key >> 20) % max(1, h - 12)
        block = out[y0 : y0 + 12, x0 : x0 + 12].astype(np.int16)
        out[y0 : y0 + 12, x0 : x0 + 12] = (block + 96) % 256
        return out

    def _handle_edit(self, payload: dict) -> dict:
        raw = base64.b64decode(payload["image_png_b64"])
        instruction = payload["instruction"]
        seed = int(payload.get("seed", 0))
        if self.faults.noop_marker in instruction:
            edited = decode_png(raw)
        elif self.faults.scatter_marker in instruction:
            edited = self._scatter(decode_png(raw), instruction)
        else:
            digest = self._png_digest(raw)
            with self._lock:
                scene = self._scenes.get(digest)
            mode, rest = _instruction_mode(instruction)
            if scene is not None:
                # Toggle the targeted rectangle whatever the verb, so every
                # distinct instruction produces a real, local pixel change.
                idx = derive_seed(self.seed, "target", rest) % len(scene.rects)
                present = scene.present ^ {idx}
                new_scene = _Scene(scene.width, scene.height, scene.bg_key, scene.rects, present)
                edited = self._render(new_scene)
            else:
                edited = self._generic_edit(decode_png(raw), mode, rest)
            edited = self._stamp(edited, seed)
        png = encode_png(edited)
        return {
            "image_png_b64": base64.b64encode(png).decode("ascii"),
            "cost_gpu_hours": self.costs.editor,
        }

    def _generic_edit(self, pixels: np.ndarray, mode: str, rest: str) -> np.ndarray:
        """Deterministic patch edit for images this backend never generated."""
        out = pixels.copy()
        h, w = out.shape[:2]
        key = derive_seed(self.seed, "generic", mode, rest)
        pw, ph = max(8, w // 5), max(8, h // 5)
        x0 = key % max(1, w - pw)
        y0 = (key >> 20) % max(1, h - ph)
        if mode == "remove":
            out[y0 : y0 + ph, x0 : x0 + pw] = (32, 32, 32)
        else:
            out[y0 : y0 + ph, x0 : x0 + pw] = _PALETTE[key % len(_PALETTE)]
        return out

    def _unit_pair(self, *parts: int | str) -> tuple[float, float]:
        d = derive_seed(self.seed, *parts)
        return (d >> 32) / 2.0**32, (d & 0xFFFFFFFF) / 2.0**32

    def _score_values(self, after_digest: str, instruction: str, temperature: float) -> tuple[float, float]:
        u1, u2 = self._unit_pair("score", after_digest, instruction, repr(temperature))
        if self.score_profile == "high":
            lo, span = 4.7, 0.3
        elif self.score_profile == "mixed":
            lo, span = 4.2, 0.8
        else:
            lo, span = 1.0, 3.5
        return round(lo + span * u1, 2), round(lo + span * u2, 2)

    def _handle_score(self, payload: dict) -> dict:
        instruction = payload["instruction"]
        cost = self.costs.validator
        if self.faults.score_malformed_marker in instruction:
            return {"text": "The edit looks quite good overall.", "cost_gpu_hours": cost}
        if self.faults.score_out_of_range_marker in instruction:
            text = json.dumps({"InstructionAdherence": 6.3, "ImageAesthetic": 0.4})
            return {"text": text, "cost_gpu_hours": cost}
        after_digest = self._png_digest(base64.b64decode(payload["image_after_png_b64"]))
        adherence, aesthetic = self._score_values(
            after_digest, instruction, float(payload.get("temperature", 0.0))
        )
        text = json.dumps({"InstructionAdherence": adherence, "ImageAesthetic": aesthetic})
        return {"text": text, "cost_gpu_hours": cost}

    def _yes(self, good: bool) -> str:
        return "Yes" if good else "No"

    def _handle_check(self, payload: dict) -> dict:
        kind = payload["kind"]
        if kind == "plausibility":
            prompt = payload["prompt"]
            cost = self.costs.plausibility
            if self.faults.bool_gibberish_marker in prompt:
                return {"text": "Absolutely!", "cost_gpu_hours": cost}
            if self.faults.implausible_marker in prompt:
                return {"text": "No", "cost_gpu_hours": cost}
            digest = self._png_digest(base64.b64decode(payload["image_png_b64"]))
            u, _ = self._unit_pair("plausible", digest, prompt)
            plausible = True if self.score_profile == "high" else u >= 0.125
            return {"text": self._yes(plausible), "cost_gpu_hours": cost}

        instruction = payload["instruction"]
        cost = self.costs.validator
        if self.faults.bool_gibberish_marker in instruction:
            return {"text": "Absolutely!", "cost_gpu_hours": cost}
        digest = self._png_digest(base64.b64decode(payload["image_png_b64"]))
        u, _ = self._unit_pair("bool", kind, digest, instruction)
        clean = True if self.score_profile == "high" else u >= 0.125
        if kind == "unwanted_mods":
            if self.faults.unwanted_marker in instruction:
                clean = False
            # "No" means no unwanted modifications, i.e. a clean edit.
            return {"text": self._yes(not clean), "cost_gpu_hours": cost}
        if kind == "aesthetics":
            if self.faults.ugly_marker in instruction:
                clean = False
            return {"text": self._yes(clean), "cost_gpu_hours": cost}
        raise ValueError(f"unknown check kind {kind!r}")

    def _handle_invert(self, payload: dict) -> dict:
        instruction = payload["instruction"]
        cost = self.costs.inverter
        if self.faults.refuse_invert_marker in instruction:
            return {"text": "Undo the previous edit.", "cost_gpu_hours": cost}
        if payload.get("mode") == "rewrite":
            one_line = " ".join(instruction.split())
            return {"text": f"In one step: {one_line}", "cost_gpu_hours": cost}
        mode, rest = _instruction_mode(instruction)
        rest = rest.rstrip()
        if mode == "add":
            text = f"Remove {rest}" if rest else "Remove it."
        elif mode == "remove":
            text = f"Add {rest}" if rest else "Add it."
        else:
            text = f"Apply the opposite change: {instruction.strip()}"
        return {"text": text, "cost_gpu_hours": cost}


class _SimRequestHandler(BaseHTTPRequestHandler):
    server: "SimServer"

    def do_POST(self) -> None:  # noqa: N802 (http.server API)
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length))
            body = self.server.backend.handle(self.path, payload)
        except (ValueError, KeyError) as exc:
            self.send_response(400)
            error = json.dumps({"error": str(exc)}).encode("utf-8")
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(error)))
            self.end_headers()
            self.wfile.write(error)
            return
        data = json.dumps(body).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, format: str, *args) -> None:
        pass


class SimServer(ThreadingHTTPServer):
    """HTTP wrapper around a :class:`SimBackend`; bind to port 0 for tests."""

    daemon_threads = True

    def __init__(self, backend: SimBackend, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _SimRequestHandler)
        self.backend = backend

    @property
    def base_url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def serve_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread
