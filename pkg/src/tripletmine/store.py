"""Dataset persistence and reporting.

Triplets live in a JSONL manifest, one record per line, with images in a
content-addressed PNG blob directory next to it. Everything is plain files:
desk-scale datasets stay diff-friendly and resumable without a database.

Also houses the stage-statistics report (per-stage survivor counts with
signed percentage deltas) and simple distribution histograms.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import BlobIntegrityError, ManifestError
from .images import ImageRef, decode_png, encode_png, pixel_digest
from .scores import ScorePair

FORWARD = "forward"
INVERTED = "inverted"
COMPOSED = "composed"


@dataclass(frozen=True)
class Derivation:
    """How a record came to exist: mined directly, inverted, or composed."""

    kind: str
    parent_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        expected = {FORWARD: 0, INVERTED: 1, COMPOSED: 2}
        if self.kind not in expected:
            raise ValueError(f"unknown derivation kind {self.kind!r}")
        if len(self.parent_ids) != expected[self.kind]:
            raise ValueError(f"{self.kind} derivation requires {expected[self.kind]} parent ids")

    @classmethod
    def forward(cls) -> "Derivation":
        return cls(FORWARD)

    @classmethod
    def inverted(cls, parent_id: str) -> "Derivation":
        return cls(INVERTED, (parent_id,))

    @classmethod
    def composed(cls, first_parent: str, second_parent: str) -> "Derivation":
        if first_parent == second_parent:
            raise ValueError("composed parents must be distinct")
        return cls(COMPOSED, (first_parent, second_parent))


@dataclass(frozen=True)
class TripletRecord:
    record_id: str
    source_image: ImageRef
    instruction: str
    edited_image: ImageRef
    derivation: Derivation
    bundle_id: str
    edit_index: int
    t2i_prompt: str
    hard_scores: ScorePair | None = None
    seeds: tuple[int, int] | None = None
    category_tag: str | None = None

    def validate(self) -> None:
        if not self.instruction.strip():
            raise ValueError("instruction is empty")
        if self.derivation.kind == FORWARD:
            if self.seeds is None:
                raise ValueError("forward record is missing its (t2i, edit) seed pair")
            if self.hard_scores is None:
                raise ValueError("forward record is missing hard validator scores")


def record_content_id(
    derivation: Derivation,
    source_image_id: str,
    instruction: str,
    edited_image_id: str,
    bundle_id: str,
    edit_index: int,
    seeds: tuple[int, int] | None,
) -> str:
    """Digest of the identity fields. Scores and tags do not participate."""
    identity = {
        "derivation": [derivation.kind, list(derivation.parent_ids)],
        "source": source_image_id,
        "instruction": instruction,
        "edited": edited_image_id,
        "bundle": bundle_id,
        "edit_index": edit_index,
        "seeds": list(seeds) if seeds is not None else None,
    }
    canonical = json.dumps(identity, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def make_record(
    source_image: ImageRef,
    instruction: str,
    edited_image: ImageRef,
    derivation: Derivation,
    bundle_id: str,
    edit_index: int,
    t2i_prompt: str,
    hard_scores: ScorePair | None = None,
    seeds: tuple[int, int] | None = None,
    category_tag: str | None = None,
) -> TripletRecord:
    record = TripletRecord(
        record_id=record_content_id(
            derivation, source_image.image_id, instruction, edited_image.image_id,
            bundle_id, edit_index, seeds,
        ),
        source_image=source_image,
        instruction=instruction,
        edited_image=edited_image,
        derivation=derivation,
        bundle_id=bundle_id,
        edit_index=edit_index,
        t2i_prompt=t2i_prompt,
        hard_scores=hard_scores,
        seeds=seeds,
        category_tag=category_tag,
    )
    record.validate()
    return record


def with_hard_scores(record: TripletRecord, scores: ScorePair) -> TripletRecord:
    """Attach validator scores without changing identity."""
    return replace(record, hard_scores=scores)


def _image_ref_to_dict(ref: ImageRef) -> dict:
    return {
        "image_id": ref.image_id,
        "width": ref.width,
        "height": ref.height,
        "storage_path": ref.storage_path,
    }


def _image_ref_from_dict(data: dict) -> ImageRef:
    return ImageRef(
        image_id=data["image_id"],
        width=int(data["width"]),
        height=int(data["height"]),
        storage_path=data["storage_path"],
    )


def record_to_dict(record: TripletRecord) -> dict:
    return {
        "record_id": record.record_id,
        "source_image": _image_ref_to_dict(record.source_image),
        "instruction": record.instruction,
        "edited_image": _image_ref_to_dict(record.edited_image),
        "derivation": {"kind": record.derivation.kind, "parent_ids": list(record.derivation.parent_ids)},
        "bundle_id": record.bundle_id,
        "edit_index": record.edit_index,
        "t2i_prompt": record.t2i_prompt,
        "hard_scores": record.hard_scores.as_dict() if record.hard_scores else None,
        "seeds": list(record.seeds) if record.seeds else None,
        "category_tag": record.category_tag,
    }


def record_from_dict(data: dict) -> TripletRecord:
    seeds = data.get("seeds")
    scores = data.get("hard_scores")
    record = TripletRecord(
        record_id=data["record_id"],
        source_image=_image_ref_from_dict(data["source_image"]),
        instruction=data["instruction"],
        edited_image=_image_ref_from_dict(data["edited_image"]),
        derivation=Derivation(data["derivation"]["kind"], tuple(data["derivation"]["parent_ids"])),
        bundle_id=data["bundle_id"],
        edit_index=int(data["edit_index"]),
        t2i_prompt=data["t2i_prompt"],
        hard_scores=ScorePair.from_dict(scores) if scores else None,
        seeds=(int(seeds[0]), int(seeds[1])) if seeds else None,
        category_tag=data.get("category_tag"),
    )
    record.validate()
    return record


class BlobStore:
    """Write-once PNG storage addressed by pixel-content digest.

    Files land at ``<root>/blobs/<first two hex chars>/<image_id>.png``.
    Concurrent identical writes are benign: the content is the same bytes.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.blob_dir = self.root / "blobs"
        self.blob_dir.mkdir(parents=True, exist_ok=True)

    def path_for(self, image_id: str) -> Path:
        return self.blob_dir / image_id[:2] / f"{image_id}.png"

    def has(self, image_id: str) -> bool:
        return self.path_for(image_id).exists()

    def _relative(self, path: Path) -> str:
        return str(path.relative_to(self.root))

    def put_pixels(self, pixels: np.ndarray) -> ImageRef:
        image_id = pixel_digest(pixels)
        path = self.path_for(image_id)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(encode_png(pixels))
            tmp.replace(path)
        h, w = pixels.shape[:2]
        return ImageRef(image_id=image_id, width=w, height=h, storage_path=self._relative(path))

    def put_png(self, png_bytes: bytes) -> tuple[ImageRef, np.ndarray]:
        """Store an encoded PNG verbatim; returns the ref and decoded pixels."""
        pixels = decode_png(png_bytes)
        image_id = pixel_digest(pixels)
        path = self.path_for(image_id)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(png_bytes)
            tmp.replace(path)
        h, w = pixels.shape[:2]
        return ImageRef(image_id=image_id, width=w, height=h, storage_path=self._relative(path)), pixels

    def load_pixels(self, image_id: str) -> np.ndarray:
        path = self.path_for(image_id)
        if not path.exists():
            raise BlobIntegrityError(f"no blob stored for image {image_id}")
        pixels = decode_png(path.read_bytes())
        actual = pixel_digest(pixels)
        if actual != image_id:
            raise BlobIntegrityError(f"blob at {path} decodes to digest {actual}, expected {image_id}")
        return pixels

    def load_png(self, image_id: str) -> bytes:
        path = self.path_for(image_id)
        if not path.exists():
            raise BlobIntegrityError(f"no blob stored for image {image_id}")
        return path.read_bytes()


class Dataset:
    """In-memory view of a manifest: ordered records plus an id index."""

    def __init__(self, records: Iterable[TripletRecord] = ()):
        self._records: list[TripletRecord] = []
        self._by_id: dict[str, TripletRecord] = {}
        for record in records:
            self.add(record)

    def add(self, record: TripletRecord) -> None:
        if record.record_id in self._by_id:
            raise ValueError(f"duplicate record_id {record.record_id}")
        self._records.append(record)
        self._by_id[record.record_id] = record

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[TripletRecord]:
        return iter(self._records)

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._by_id

    def get(self, record_id: str) -> TripletRecord:
        return self._by_id[record_id]

    @property
    def records(self) -> tuple[TripletRecord, ...]:
        return tuple(self._records)

    def by_kind(self, kind: str) -> list[TripletRecord]:
        return [r for r in self._records if r.derivation.kind == kind]


def append_record(manifest_path: str | Path, record: TripletRecord) -> None:
    """Append one record as a single JSONL line (one write call per record)."""
    line = json.dumps(record_to_dict(record), sort_keys=True, separators=(",", ":")) + "\n"
    with open(manifest_path, "a", encoding="utf-8") as fh:
        fh.write(line)


def write_manifest(manifest_path: str | Path, records: Iterable[TripletRecord]) -> None:
    lines = [
        json.dumps(record_to_dict(r), sort_keys=True, separators=(",", ":")) for r in records
    ]
    Path(manifest_path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_dataset(manifest_path: str | Path, blob_store: BlobStore | None = None) -> Dataset:
    """Parse and validate a manifest, failing fast with 1-based line numbers.

    With a blob store supplied, every image reference must resolve to a
    stored blob (existence only; content digests are verified on pixel load).
    """
    dataset = Dataset()
    path = Path(manifest_path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}", line=0)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON: {exc}", line=lineno) from exc
            try:
                record = record_from_dict(data)
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"invalid record: {exc}", line=lineno) from exc
            if record.record_id in dataset:
                raise ManifestError(f"duplicate record_id {record.record_id}", line=lineno)
            if blob_store is not None:
                for ref in (record.source_image, record.edited_image):
                    if not blob_store.has(ref.image_id):
                        raise ManifestError(
                            f"dangling image reference {ref.image_id}", line=lineno
                        )
            dataset.add(record)
    return dataset


UNDEFINED_DELTA = "undefined"


@dataclass(frozen=True)
class StageRow:
    stage: str
    method: str
    count: int

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ValueError("stage counts are non-negative")


@dataclass(frozen=True)
class StageReport:
    rows: tuple[StageRow, ...]
    deltas: tuple[str | None, ...] = field(default=())
    survival_rate_percent: float | None = None

    def as_dict(self) -> dict:
        out = {
            "stages": [
                {"stage": r.stage, "method": r.method, "count": r.count, "delta_percent": d}
                for r, d in zip(self.rows, self.deltas)
            ]
        }
        if self.survival_rate_percent is not None:
            out["survival_rate_percent"] = self.survival_rate_percent
        return out


def stage_report(
    stages: Sequence[tuple[str, str, int]], attempts: int | None = None
) -> StageReport:
    """Survivor counts with signed two-decimal deltas against the prior stage.

    The first stage has no delta; a zero predecessor count makes the delta
    undefined rather than raising. With an attempts figure supplied, the
    overall survival rate is final count / attempts.
    """
    if not stages:
        raise ValueError("at least one stage is required")
    rows = tuple(StageRow(stage=s, method=m, count=c) for s, m, c in stages)
    deltas: list[str | None] = [None]
    for prev, cur in zip(rows, rows[1:]):
        if prev.count == 0:
            deltas.append(UNDEFINED_DELTA)
        else:
            percent = (cur.count - prev.count) / prev.count * 100.0
            deltas.append(f"{percent:+.2f}")
    survival = None
    if attempts is not None:
        if attempts <= 0:
            raise ValueError("attempts must be positive when supplied")
        survival = rows[-1].count / attempts * 100.0
    return StageReport(rows=rows, deltas=tuple(deltas), survival_rate_percent=survival)


def format_stage_table(report: StageReport) -> str:
    """Aligned text rendering of a stage report."""
    headers = ("Stage", "Method", "Count", "Delta %")
    body = [
        (r.stage, r.method, f"{r.count:,}", d if d is not None else "")
        for r, d in zip(report.rows, report.deltas)
    ]
    widths = [max(len(h), *(len(row[i]) for row in body)) for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * w for w in widths),
    ]
    for row in body:
        lines.append("  ".join(row[i].ljust(widths[i]) for i in range(len(headers))))
    if report.survival_rate_percent is not None:
        lines.append(f"Overall survival rate: {report.survival_rate_percent:.1f}%")
    return "\n".join(lines)


def distribution_report(dataset: Dataset, axis: str) -> dict[str, int]:
    """Histogram over category tags, exact resolutions, or derivation kinds."""
    counter: Counter[str] = Counter()
    if axis == "category":
        for r in dataset:
            counter[r.category_tag if r.category_tag is not None else "uncategorized"] += 1
    elif axis == "aspect_ratio":
        for r in dataset:
            counter[f"{r.edited_image.width}x{r.edited_image.height}"] += 1
    elif axis == "derivation":
        for r in dataset:
            counter[r.derivation.kind] += 1
    else:
        raise ValueError(f"unknown axis {axis!r}; expected category, aspect_ratio, or derivation")
    return dict(sorted(counter.items()))
