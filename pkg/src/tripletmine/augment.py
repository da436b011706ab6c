"""Dataset expansion: semantic inversion, bootstrap composition, and the
backward consistency filter.

Inversion asks the inverter endpoint to rewrite each mined instruction into
its logical inverse (with the original text-to-image prompt as context) and
swaps the image roles, doubling the dataset in the ideal case. Bootstrap
composition chains two accepted edits of the same source: undo the first,
then apply the second, reusing images that already exist. The backward
filter re-scores every inverted triplet with the hard validator and, when
one fails, removes both directions plus any composition built on them.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import InversionRefused, ProtocolViolation, ScoreUnavailable, TransportError
from .gateway import ModelGateway, Role
from .seeds import derive_seed
from .store import (
    COMPOSED,
    FORWARD,
    INVERTED,
    Derivation,
    TripletRecord,
    make_record,
    with_hard_scores,
)


@dataclass(frozen=True)
class AugmentConfig:
    """Expansion knobs; composition is capped per source by default."""

    max_compositions_per_source: int | None = 1
    rewrite_composites: bool = False
    seed: int = 0
    t_inv_adherence: float = 4.7
    t_inv_aesthetic: float = 4.7

    def __post_init__(self) -> None:
        if self.max_compositions_per_source is not None and self.max_compositions_per_source < 0:
            raise ValueError("max_compositions_per_source must be non-negative or None")
        for t in (self.t_inv_adherence, self.t_inv_aesthetic):
            if not 1.0 <= t <= 5.0:
                raise ValueError(f"threshold {t} outside [1.0, 5.0]")


def apply_inversions(
    records: Iterable[TripletRecord], gateway: ModelGateway
) -> tuple[list[TripletRecord], dict[str, int]]:
    """One inverted record per forward record, minus refusals and failures."""
    counters = {"attempted": 0, "inverted": 0, "refused": 0, "failed": 0}
    inverted = []
    for record in records:
        if record.derivation.kind != FORWARD:
            continue
        counters["attempted"] += 1
        try:
            inverse_text = gateway.invert(record.t2i_prompt, record.instruction)
        except InversionRefused:
            counters["refused"] += 1
            continue
        except (TransportError, ProtocolViolation):
            counters["failed"] += 1
            continue
        inverted.append(
            make_record(
                source_image=record.edited_image,
                instruction=inverse_text,
                edited_image=record.source_image,
                derivation=Derivation.inverted(record.record_id),
                bundle_id=record.bundle_id,
                edit_index=record.edit_index,
                t2i_prompt=record.t2i_prompt,
                seeds=record.seeds,
            )
        )
        counters["inverted"] += 1
    return inverted, counters


def compose_instruction(inverse_of_first: str, forward_second: str) -> str:
    """Two-sentence surface form: undo the first edit, then apply the second."""
    first = inverse_of_first.strip()
    if first and first[-1] not in ".!?":
        first += "."
    return f"{first} {forward_second.strip()}"


def apply_bootstraps(
    records: Sequence[TripletRecord],
    cfg: AugmentConfig,
    gateway: ModelGateway | None = None,
) -> tuple[list[TripletRecord], dict[str, int]]:
    """Composed records from ordered pairs of forward edits sharing a source.

    The inverse text for the pair's first edit comes from that edit's
    inverted record, so inversion must run first; pairs whose first edit has
    no surviving inverse are skipped. ``max_compositions_per_source`` caps
    the pairs per source via a seeded uniform sample (None means all pairs).
    """
    counters = {
        "sources_with_pairs": 0,
        "pairs_considered": 0,
        "composed": 0,
        "skipped_no_inverse": 0,
        "skipped_degenerate": 0,
        "rewrites_refused": 0,
    }
    inverse_text: dict[str, str] = {}
    for record in records:
        if record.derivation.kind == INVERTED:
            inverse_text[record.derivation.parent_ids[0]] = record.instruction

    by_source: dict[str, list[TripletRecord]] = {}
    for record in records:
        if record.derivation.kind == FORWARD:
            by_source.setdefault(record.source_image.image_id, []).append(record)

    composed = []
    for source_id, group in by_source.items():
        if len(group) < 2:
            continue
        counters["sources_with_pairs"] += 1
        group = sorted(group, key=lambda r: (r.edit_index, r.record_id))
        pairs = [(a, b) for a in group for b in group if a.record_id != b.record_id]
        cap = cfg.max_compositions_per_source
        if cap is not None and len(pairs) > cap:
            rng = random.Random(derive_seed(cfg.seed, "bootstrap", source_id))
            pairs = rng.sample(pairs, cap)
        for first, second in pairs:
            counters["pairs_considered"] += 1
            if first.record_id not in inverse_text:
                counters["skipped_no_inverse"] += 1
                continue
            if first.edited_image.image_id == second.edited_image.image_id:
                counters["skipped_degenerate"] += 1
                continue
            instruction = compose_instruction(inverse_text[first.record_id], second.instruction)
            if cfg.rewrite_composites and gateway is not None:
                try:
                    instruction = gateway.rewrite_composite(first.t2i_prompt, instruction)
                except (InversionRefused, TransportError, ProtocolViolation):
                    counters["rewrites_refused"] += 1
            composed.append(
                make_record(
                    source_image=first.edited_image,
                    instruction=instruction,
                    edited_image=second.edited_image,
                    derivation=Derivation.composed(first.record_id, second.record_id),
                    bundle_id=first.bundle_id,
                    edit_index=second.edit_index,
                    t2i_prompt=first.t2i_prompt,
                )
            )
            counters["composed"] += 1
    return composed, counters


def backward_consistency_filter(
    records: Sequence[TripletRecord],
    gateway: ModelGateway,
    t_inv_adherence: float = 4.7,
    t_inv_aesthetic: float = 4.7,
) -> tuple[list[TripletRecord], set[str], dict[str, int]]:
    """Re-score inverted triplets; failures remove both directions.

    A failing (or unscorable) inverted record is removed together with its
    forward parent, and any composed record referencing a removed record is
    pruned by cascade. Passing inverted records keep their validator scores.
    """
    counters = {
        "inverted_checked": 0,
        "inverted_failed": 0,
        "score_unavailable": 0,
        "forward_removed": 0,
        "composed_cascaded": 0,
    }
    removed: set[str] = set()
    rescored: dict[str, TripletRecord] = {}
    for record in records:
        if record.derivation.kind != INVERTED:
            continue
        counters["inverted_checked"] += 1
        failing = False
        try:
            scores = gateway.score(
                record.source_image, record.instruction, record.edited_image, Role.HARD_VALIDATOR
            )
        except (ScoreUnavailable, TransportError, ProtocolViolation):
            counters["score_unavailable"] += 1
            failing = True
            scores = None
        if scores is not None and (
            scores.adherence < t_inv_adherence or scores.aesthetic < t_inv_aesthetic
        ):
            failing = True
        if failing:
            counters["inverted_failed"] += 1
            removed.add(record.record_id)
            removed.add(record.derivation.parent_ids[0])
        else:
            rescored[record.record_id] = with_hard_scores(record, scores)

    counters["forward_removed"] = sum(
        1 for r in records if r.derivation.kind == FORWARD and r.record_id in removed
    )
    for record in records:
        if record.derivation.kind == COMPOSED and any(
            p in removed for p in record.derivation.parent_ids
        ):
            removed.add(record.record_id)
            counters["composed_cascaded"] += 1

    kept = []
    for record in records:
        if record.record_id in removed:
            continue
        kept.append(rescored.get(record.record_id, record))
    return kept, removed, counters


def validate_lineage(records: Sequence[TripletRecord]) -> None:
    """Check the derivation graph: parents resolve, kinds agree, images swap."""
    by_id = {r.record_id: r for r in records}
    for record in records:
        kind = record.derivation.kind
        for parent_id in record.derivation.parent_ids:
            parent = by_id.get(parent_id)
            if parent is None:
                raise ValueError(f"record {record.record_id} references missing parent {parent_id}")
            if parent.derivation.kind != FORWARD:
                raise ValueError(f"{kind} record {record.record_id} has a non-forward parent")
        if kind == INVERTED:
            parent = by_id[record.derivation.parent_ids[0]]
            if (
                record.source_image.image_id != parent.edited_image.image_id
                or record.edited_image.image_id != parent.source_image.image_id
            ):
                raise ValueError(f"inverted record {record.record_id} does not swap its parent's images")
        if kind == COMPOSED:
            first, second = (by_id[p] for p in record.derivation.parent_ids)
            if first.source_image.image_id != second.source_image.image_id:
                raise ValueError(f"composed record {record.record_id} parents have different sources")


def run_augmentation(
    records: Sequence[TripletRecord],
    gateway: ModelGateway,
    cfg: AugmentConfig,
) -> tuple[list[TripletRecord], dict[str, dict[str, int]]]:
    """Inversion, then composition, then the backward filter, in that order."""
    expanded = list(records)
    inverted, inversion_counters = apply_inversions(expanded, gateway)
    expanded.extend(inverted)
    composed, bootstrap_counters = apply_bootstraps(expanded, cfg, gateway)
    expanded.extend(composed)
    kept, removed, filter_counters = backward_consistency_filter(
        expanded, gateway, cfg.t_inv_adherence, cfg.t_inv_aesthetic
    )
    validate_lineage(kept)
    report = {
        "inversion": inversion_counters,
        "bootstrap": bootstrap_counters,
        "backward_filter": {**filter_counters, "removed_total": len(removed)},
    }
    return kept, report
