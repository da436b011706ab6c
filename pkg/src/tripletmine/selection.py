"""Hard-validator scoring and per-group winner selection.

Pooled candidates are scored by the hard validator, filtered by inclusive
thresholds on both axes, grouped by ⟨source image, instruction⟩, and reduced
to at most one winner per group: the candidate with the highest geometric
mean of its two scores. Because the geometric mean is monotone in the score
product, the argmax compares exact products (via Fraction) and breaks ties
by lower edit seed, then lower edited-image id, so selection is fully
deterministic.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .errors import ProtocolViolation, ScoreUnavailable, TransportError
from .gateway import ModelGateway, Role
from .scheduler import Candidate
from .scores import ScorePair
from .store import Derivation, TripletRecord, make_record

GroupKey = tuple[str, str, int]


@dataclass(frozen=True)
class ScoredCandidate:
    candidate: Candidate
    hard_scores: ScorePair


@dataclass(frozen=True)
class CandidateGroup:
    key: GroupKey
    candidates: tuple[ScoredCandidate, ...]

    def __post_init__(self) -> None:
        for sc in self.candidates:
            if sc.candidate.group_key != self.key:
                raise ValueError("candidate does not belong to this group")


def hard_score_pool(
    pool: Sequence[Candidate], gateway: ModelGateway, max_parallel: int = 1
) -> tuple[list[ScoredCandidate], dict[str, int]]:
    """Score every pooled candidate; unusable replies drop the candidate.

    The pool is oversampled upstream, so candidates whose score never
    arrives are excluded rather than retried further.
    """
    counters = {"scored": 0, "score_unavailable": 0, "failed": 0}

    def score_one(candidate: Candidate) -> ScoredCandidate | str:
        try:
            scores = gateway.score(
                candidate.source, candidate.instruction, candidate.edited, Role.HARD_VALIDATOR
            )
        except ScoreUnavailable:
            return "score_unavailable"
        except (TransportError, ProtocolViolation):
            return "failed"
        return ScoredCandidate(candidate, scores)

    if max_parallel > 1:
        with ThreadPoolExecutor(max_workers=max_parallel) as executor:
            results = list(executor.map(score_one, pool))
    else:
        results = [score_one(c) for c in pool]

    scored = []
    for result in results:
        if isinstance(result, str):
            counters[result] += 1
        else:
            counters["scored"] += 1
            scored.append(result)
    return scored, counters


def group_candidates(scored: Sequence[ScoredCandidate]) -> list[CandidateGroup]:
    """Group by ⟨source image, bundle, edit⟩, keeping first-seen group order."""
    ordered: dict[GroupKey, list[ScoredCandidate]] = {}
    for sc in scored:
        ordered.setdefault(sc.candidate.group_key, []).append(sc)
    return [CandidateGroup(key, tuple(members)) for key, members in ordered.items()]


def filter_thresholds(group: CandidateGroup, t_adherence: float, t_aesthetic: float) -> CandidateGroup:
    """Keep exactly the candidates meeting both thresholds (inclusive)."""
    kept = tuple(sc for sc in group.candidates if sc.hard_scores.meets(t_adherence, t_aesthetic))
    return CandidateGroup(group.key, kept)


def _score_product(sc: ScoredCandidate) -> Fraction:
    # Fraction(float) is exact, so equal products compare equal regardless of
    # the factor split; sqrt is monotone and never needs to be taken here.
    return Fraction(sc.hard_scores.adherence) * Fraction(sc.hard_scores.aesthetic)


def select_best(group: CandidateGroup) -> ScoredCandidate | None:
    """Argmax of the geometric mean; ties go to lower seed, then lower image id."""
    best: ScoredCandidate | None = None
    best_product: Fraction | None = None
    for sc in group.candidates:
        product = _score_product(sc)
        if best is None or product > best_product:
            best, best_product = sc, product
        elif product == best_product:
            challenger = (sc.candidate.edit_seed, sc.candidate.edited.image_id)
            incumbent = (best.candidate.edit_seed, best.candidate.edited.image_id)
            if challenger < incumbent:
                best, best_product = sc, product
    return best


def build_dataset(winners: Sequence[ScoredCandidate]) -> list[TripletRecord]:
    """One forward record per winning candidate, hard scores attached."""
    records = []
    for sc in winners:
        c = sc.candidate
        records.append(
            make_record(
                source_image=c.source,
                instruction=c.instruction,
                edited_image=c.edited,
                derivation=Derivation.forward(),
                bundle_id=c.bundle_id,
                edit_index=c.edit_index,
                t2i_prompt=c.t2i_prompt,
                hard_scores=sc.hard_scores,
                seeds=(c.t2i_seed, c.edit_seed),
            )
        )
    return records


def select_forward_records(
    pool: Sequence[Candidate],
    gateway: ModelGateway,
    t_adherence: float,
    t_aesthetic: float,
    max_parallel: int = 1,
) -> tuple[list[TripletRecord], dict[str, int]]:
    """The full selection stage: score, threshold, group, argmax, build."""
    scored, counters = hard_score_pool(pool, gateway, max_parallel)
    groups = group_candidates(scored)
    winners = []
    for group in groups:
        winner = select_best(filter_thresholds(group, t_adherence, t_aesthetic))
        if winner is not None:
            winners.append(winner)
    counters["groups"] = len(groups)
    counters["survivors"] = sum(
        len(filter_thresholds(g, t_adherence, t_aesthetic).candidates) for g in groups
    )
    counters["selected"] = len(winners)
    return build_dataset(winners), counters
