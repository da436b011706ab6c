"""Job enumeration, uniform sampling, and the budget-aware mining loop.

Candidate edits are enumerated as independent jobs (one per source image,
instruction, and retry ordinal), drawn uniformly without replacement, and
executed until the queue drains or the GPU-hour budget runs out. The budget
check happens at the loop head and cost is charged from response envelopes
afterwards (dispatch-then-account), so consumption can overshoot the limit
by at most one job's cost.

Every per-job seed is a digest of the master seed and the job identity, so
results are reproducible regardless of draw order or parallelism. Completed
work is checkpointed as JSONL outcomes keyed by job identity; a resumed run
replays those outcomes instead of calling the endpoints again.
"""

from __future__ import annotations

import json
import math
import random
import threading
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .bundles import PromptBundle
from .diffgate import DiffGateConfig, low_level_check
from .errors import DimensionMismatch, ProtocolViolation, ScoreUnavailable, TransportError
from .gateway import BoolCheck, GenerationRequest, ModelGateway, Role, sample_resolution
from .images import ImageRef
from .scores import ScorePair
from .seeds import derive_seed

_MICRO = 1_000_000


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of the mining loop. Defaults follow the reference pipeline."""

    seeds_per_prompt: int = 10
    retries_per_edit: int = 5
    t_adherence: float = 4.7
    t_aesthetic: float = 4.7
    t_inv_adherence: float = 4.7
    t_inv_aesthetic: float = 4.7
    master_seed: int = 0
    max_parallel_jobs: int = 1
    budget_gpu_hours: float = math.inf
    generator_steps: int = 4

    def __post_init__(self) -> None:
        if self.seeds_per_prompt < 1 or self.retries_per_edit < 1:
            raise ValueError("seeds_per_prompt and retries_per_edit must be at least 1")
        for t in (self.t_adherence, self.t_aesthetic, self.t_inv_adherence, self.t_inv_aesthetic):
            if not 1.0 <= t <= 5.0:
                raise ValueError(f"threshold {t} outside [1.0, 5.0]")
        if self.max_parallel_jobs < 1:
            raise ValueError("max_parallel_jobs must be at least 1")
        if self.budget_gpu_hours < 0:
            raise ValueError("budget_gpu_hours must be non-negative")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class SourceImage:
    """A generated source that passed the plausibility gate."""

    ref: ImageRef
    bundle: PromptBundle
    seed_ordinal: int
    t2i_seed: int


@dataclass(frozen=True)
class Job:
    source_image_id: str
    bundle_id: str
    edit_index: int
    retry_ordinal: int
    seed: int
    instruction: str
    t2i_prompt: str
    t2i_seed: int
    source: ImageRef

    @property
    def key(self) -> str:
        return f"{self.source_image_id}:{self.edit_index}:{self.retry_ordinal}"


@dataclass(frozen=True)
class Candidate:
    """A triplet candidate that survived every pre-selection filter."""

    source: ImageRef
    bundle_id: str
    edit_index: int
    instruction: str
    t2i_prompt: str
    t2i_seed: int
    edit_seed: int
    retry_ordinal: int
    edited: ImageRef
    pre_scores: ScorePair

    @property
    def group_key(self) -> tuple[str, str, int]:
        return (self.source.image_id, self.bundle_id, self.edit_index)


class BudgetLedger:
    """GPU-hour accounting in integer microhours.

    Integer accumulation keeps the consumed total independent of the order
    worker threads report their costs, which keeps run manifests
    byte-reproducible under parallel execution.
    """

    def __init__(self, limit_gpu_hours: float):
        if limit_gpu_hours < 0:
            raise ValueError("budget must be non-negative")
        self.limit_gpu_hours = limit_gpu_hours
        self._micro_consumed = 0
        self._lock = threading.Lock()
        self.jobs_executed = 0
        self.jobs_unsampled = 0

    @property
    def consumed_gpu_hours(self) -> float:
        with self._lock:
            return self._micro_consumed / _MICRO

    def charge(self, cost_gpu_hours: float) -> None:
        if cost_gpu_hours < 0:
            raise ValueError("cost must be non-negative")
        with self._lock:
            self._micro_consumed += round(cost_gpu_hours * _MICRO)

    def within_budget(self, reserved_gpu_hours: float = 0.0) -> bool:
        """Loop-head guard: strictly below the limit, counting reservations."""
        with self._lock:
            return self._micro_consumed / _MICRO + reserved_gpu_hours < self.limit_gpu_hours

    def count_executed(self, n: int = 1) -> None:
        with self._lock:
            self.jobs_executed += n

    def as_dict(self) -> dict:
        return {
            "limit_gpu_hours": None if math.isinf(self.limit_gpu_hours) else self.limit_gpu_hours,
            "consumed_gpu_hours": self.consumed_gpu_hours,
            "jobs_executed": self.jobs_executed,
            "jobs_unsampled": self.jobs_unsampled,
        }


class JobQueue:
    """Uniform draw without replacement via swap-and-pop."""

    def __init__(self, jobs: Sequence[Job]):
        self._jobs = list(jobs)

    def __len__(self) -> int:
        return len(self._jobs)

    def draw(self, rng: random.Random) -> Job | None:
        if not self._jobs:
            return None
        i = rng.randrange(len(self._jobs))
        self._jobs[i], self._jobs[-1] = self._jobs[-1], self._jobs[i]
        return self._jobs.pop()


def draw_next(queue: JobQueue, rng: random.Random) -> Job | None:
    return queue.draw(rng)


def job_seed(master_seed: int, source_image_id: str, edit_index: int, retry_ordinal: int) -> int:
    return derive_seed(master_seed, "job", source_image_id, edit_index, retry_ordinal)


def enumerate_jobs(plausible_sources: Sequence[SourceImage], retries_per_edit: int, master_seed: int) -> list[Job]:
    """All (source, instruction, retry) combinations with derived seeds."""
    jobs = []
    for source in plausible_sources:
        for edit in source.bundle.edits:
            for retry in range(1, retries_per_edit + 1):
                jobs.append(
                    Job(
                        source_image_id=source.ref.image_id,
                        bundle_id=source.bundle.bundle_id,
                        edit_index=edit.edit_index,
                        retry_ordinal=retry,
                        seed=job_seed(master_seed, source.ref.image_id, edit.edit_index, retry),
                        instruction=edit.text,
                        t2i_prompt=source.bundle.t2i_prompt,
                        t2i_seed=source.t2i_seed,
                        source=source.ref,
                    )
                )
    return jobs


# Per-job outcome statuses, in filter-chain order.
STATUS_POOL = "pool"
STATUS_FAILED = "failed"
STATUS_SCORE_UNAVAILABLE = "score_unavailable"
STATUS_PRE_FILTER = "pre_filter"
STATUS_UNWANTED_MODS = "unwanted_mods"
STATUS_AESTHETICS = "aesthetics"
STATUS_DIFF_DISCARD = "diff_discard"

_JOB_STATUSES = (
    STATUS_POOL,
    STATUS_FAILED,
    STATUS_SCORE_UNAVAILABLE,
    STATUS_PRE_FILTER,
    STATUS_UNWANTED_MODS,
    STATUS_AESTHETICS,
    STATUS_DIFF_DISCARD,
)


@dataclass
class MiningResult:
    pool: list[Candidate]
    counters: dict[str, int]
    ledger: BudgetLedger
    budget_stopped: bool
    plausible_sources: list[SourceImage] = field(default_factory=list)


class _Checkpoint:
    """JSONL log of completed work, keyed by unit identity.

    The header pins the run identity (master seed, N, M, bundle ids); a
    resume against a different configuration is refused rather than silently
    mixing incompatible outcomes.
    """

    def __init__(self, path: str | Path | None, header: dict, resume: bool):
        self._path = Path(path) if path is not None else None
        self.entries: dict[str, dict] = {}
        if self._path is None:
            return
        if self._path.exists() and resume:
            with open(self._path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    entry = json.loads(line)
                    if entry.get("kind") == "header":
                        if {k: entry[k] for k in header} != header:
                            raise ValueError(
                                "checkpoint header does not match this run's configuration"
                            )
                        continue
                    self.entries[entry["key"]] = entry
        else:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            with open(self._path, "w", encoding="utf-8") as fh:
                fh.write(json.dumps({"kind": "header", **header}, sort_keys=True) + "\n")

    def get(self, key: str) -> dict | None:
        return self.entries.get(key)

    def write(self, entry: dict) -> None:
        if self._path is None:
            return
        with open(self._path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _new_counters() -> dict[str, int]:
    counters = {
        "bundles": 0,
        "generation_attempted": 0,
        "generation_failed": 0,
        "images_generated": 0,
        "plausibility_rejected": 0,
        "plausible_sources": 0,
        "jobs_enumerated": 0,
        "jobs_drawn": 0,
        "edits_completed": 0,
    }
    for status in _JOB_STATUSES:
        counters[f"jobs_{status}"] = 0
    return counters


def _image_ref_dict(ref: ImageRef) -> dict:
    return {
        "image_id": ref.image_id,
        "width": ref.width,
        "height": ref.height,
        "storage_path": ref.storage_path,
    }


def _image_ref_from(entry: dict) -> ImageRef:
    return ImageRef(
        image_id=entry["image_id"],
        width=int(entry["width"]),
        height=int(entry["height"]),
        storage_path=entry["storage_path"],
    )


def generate_sources(
    config: PipelineConfig,
    bundles: Sequence[PromptBundle],
    gateway: ModelGateway,
    ledger: BudgetLedger,
    counters: dict[str, int],
    checkpoint: _Checkpoint,
) -> tuple[list[SourceImage], bool]:
    """Generate N seeds per bundle and keep the plausible ones.

    Returns the plausible sources and whether the budget stopped the phase.
    """
    sources: list[SourceImage] = []
    counters["bundles"] = len(bundles)
    for bundle in bundles:
        for ordinal in range(1, config.seeds_per_prompt + 1):
            key = f"source:{bundle.bundle_id}:{ordinal}"
            entry = checkpoint.get(key)
            if entry is not None:
                counters["generation_attempted"] += 1
                counters["images_generated"] += 1
                if entry["plausible"]:
                    ref = _image_ref_from(entry["image"])
                    sources.append(SourceImage(ref, bundle, ordinal, entry["t2i_seed"]))
                    counters["plausible_sources"] += 1
                else:
                    counters["plausibility_rejected"] += 1
                continue
            if not ledger.within_budget():
                return sources, True
            counters["generation_attempted"] += 1
            rng = random.Random(derive_seed(config.master_seed, "resolution", bundle.bundle_id, ordinal))
            width, height = sample_resolution(rng)
            t2i_seed = derive_seed(config.master_seed, "t2i", bundle.bundle_id, ordinal)
            try:
                ref = gateway.generate(
                    GenerationRequest(
                        prompt=bundle.t2i_prompt,
                        seed=t2i_seed,
                        width=width,
                        height=height,
                        steps=config.generator_steps,
                    )
                )
                plausible = gateway.check_plausibility(ref, bundle.t2i_prompt)
            except (TransportError, ProtocolViolation, DimensionMismatch):
                counters["generation_failed"] += 1
                continue
            counters["images_generated"] += 1
            if plausible:
                sources.append(SourceImage(ref, bundle, ordinal, t2i_seed))
                counters["plausible_sources"] += 1
            else:
                counters["plausibility_rejected"] += 1
            checkpoint.write(
                {
                    "kind": "source",
                    "key": key,
                    "t2i_seed": t2i_seed,
                    "image": _image_ref_dict(ref),
                    "plausible": plausible,
                }
            )
    return sources, False


def execute_job(
    job: Job,
    gateway: ModelGateway,
    diff_cfg: DiffGateConfig,
    config: PipelineConfig,
) -> tuple[str, Candidate | None, bool]:
    """Run one job through edit, scoring, boolean checks, and the diff gate.

    Returns (status, candidate when pooled, whether the edit completed).
    Endpoint failures abort only this job, never the run.
    """
    edited = None
    try:
        edited = gateway.edit(job.source, job.instruction, job.seed)
        try:
            pre_scores = gateway.score(job.source, job.instruction, edited, Role.PRE_VALIDATOR)
        except ScoreUnavailable:
            return STATUS_SCORE_UNAVAILABLE, None, True
        if not pre_scores.meets(config.t_adherence, config.t_aesthetic):
            return STATUS_PRE_FILTER, None, True
        if gateway.check_bool(
            BoolCheck.UNWANTED_MODS, edited=edited, instruction=job.instruction, source=job.source
        ):
            return STATUS_UNWANTED_MODS, None, True
        if not gateway.check_bool(BoolCheck.AESTHETICS, edited=edited, instruction=job.instruction):
            return STATUS_AESTHETICS, None, True
        verdict = low_level_check(gateway.pixels(job.source), gateway.pixels(edited), diff_cfg)
        if not verdict.passed:
            return STATUS_DIFF_DISCARD, None, True
        candidate = Candidate(
            source=job.source,
            bundle_id=job.bundle_id,
            edit_index=job.edit_index,
            instruction=job.instruction,
            t2i_prompt=job.t2i_prompt,
            t2i_seed=job.t2i_seed,
            edit_seed=job.seed,
            retry_ordinal=job.retry_ordinal,
            edited=edited,
            pre_scores=pre_scores,
        )
        return STATUS_POOL, candidate, True
    except (TransportError, ProtocolViolation, DimensionMismatch):
        return STATUS_FAILED, None, edited is not None


def _candidate_from_checkpoint(job: Job, entry: dict) -> Candidate:
    return Candidate(
        source=job.source,
        bundle_id=job.bundle_id,
        edit_index=job.edit_index,
        instruction=job.instruction,
        t2i_prompt=job.t2i_prompt,
        t2i_seed=job.t2i_seed,
        edit_seed=job.seed,
        retry_ordinal=job.retry_ordinal,
        edited=_image_ref_from(entry["edited"]),
        pre_scores=ScorePair.from_dict(entry["pre_scores"]),
    )


def _job_entry(job: Job, status: str, candidate: Candidate | None, edited_done: bool) -> dict:
    entry: dict = {"kind": "job", "key": f"job:{job.key}", "status": status, "edited_done": edited_done}
    if candidate is not None:
        entry["edited"] = _image_ref_dict(candidate.edited)
        entry["pre_scores"] = candidate.pre_scores.as_dict()
    return entry


def run_mining(
    config: PipelineConfig,
    bundles: Sequence[PromptBundle],
    gateway: ModelGateway,
    diff_cfg: DiffGateConfig | None = None,
    checkpoint_path: str | Path | None = None,
    resume: bool = False,
    on_progress: Callable[[dict[str, int]], None] | None = None,
) -> MiningResult:
    """Generate sources, enumerate jobs, and drain the queue under budget.

    With more than one parallel job, the first job runs alone as a cost
    pilot; later dispatches reserve the pilot's observed per-job cost for
    every in-flight job, keeping budget overshoot near one job's cost.
    """
    diff_cfg = diff_cfg or DiffGateConfig()
    ledger = BudgetLedger(config.budget_gpu_hours)
    counters = _new_counters()
    header = {
        "master_seed": config.master_seed,
        "seeds_per_prompt": config.seeds_per_prompt,
        "retries_per_edit": config.retries_per_edit,
        "bundles_digest": derive_seed(*sorted(b.bundle_id for b in bundles)) if bundles else 0,
    }
    checkpoint = _Checkpoint(checkpoint_path, header, resume)

    previous_hook = gateway.on_cost
    gateway.on_cost = lambda role, cost: ledger.charge(cost)
    try:
        sources, budget_stopped = generate_sources(
            config, bundles, gateway, ledger, counters, checkpoint
        )
        jobs = enumerate_jobs(sources, config.retries_per_edit, config.master_seed)
        counters["jobs_enumerated"] = len(jobs)
        queue = JobQueue(jobs)
        rng = random.Random(derive_seed(config.master_seed, "draw-order"))

        pool_by_seq: dict[int, Candidate] = {}
        state_lock = threading.Lock()

        def finish(job: Job, seq: int, status: str, candidate: Candidate | None, edited_done: bool) -> None:
            with state_lock:
                counters[f"jobs_{status}"] += 1
                if edited_done:
                    counters["edits_completed"] += 1
                if candidate is not None:
                    pool_by_seq[seq] = candidate
                snapshot = dict(counters) if on_progress is not None else None
            checkpoint.write(_job_entry(job, status, candidate, edited_done))
            ledger.count_executed()
            if snapshot is not None:
                on_progress(snapshot)

        def replay(job: Job, seq: int, entry: dict) -> None:
            status = entry["status"]
            with state_lock:
                counters[f"jobs_{status}"] += 1
                if entry.get("edited_done", status != STATUS_FAILED):
                    counters["edits_completed"] += 1
                if status == STATUS_POOL:
                    pool_by_seq[seq] = _candidate_from_checkpoint(job, entry)
            ledger.count_executed()

        if not budget_stopped:
            if config.max_parallel_jobs == 1:
                budget_stopped = _drain_serial(
                    queue, rng, checkpoint, ledger, counters, replay, finish, gateway, diff_cfg, config
                )
            else:
                budget_stopped = _drain_parallel(
                    queue, rng, checkpoint, ledger, counters, replay, finish, gateway, diff_cfg, config
                )

        ledger.jobs_unsampled = len(queue)
        pool = [pool_by_seq[seq] for seq in sorted(pool_by_seq)]
        return MiningResult(
            pool=pool,
            counters=counters,
            ledger=ledger,
            budget_stopped=budget_stopped,
            plausible_sources=sources,
        )
    finally:
        gateway.on_cost = previous_hook


def _drain_serial(queue, rng, checkpoint, ledger, counters, replay, finish, gateway, diff_cfg, config) -> bool:
    seq = 0
    while True:
        if not ledger.within_budget():
            return len(queue) > 0
        job = queue.draw(rng)
        if job is None:
            return False
        seq += 1
        counters["jobs_drawn"] += 1
        entry = checkpoint.get(f"job:{job.key}")
        if entry is not None:
            replay(job, seq, entry)
            continue
        status, candidate, edited_done = execute_job(job, gateway, diff_cfg, config)
        finish(job, seq, status, candidate, edited_done)


def _drain_parallel(queue, rng, checkpoint, ledger, counters, replay, finish, gateway, diff_cfg, config) -> bool:
    seq = 0
    pilot_cost: float | None = None
    pending: dict[Future, tuple[Job, int, float]] = {}
    budget_stopped = False
    with ThreadPoolExecutor(max_workers=config.max_parallel_jobs) as executor:
        while True:
            reserve = (pilot_cost or 0.0) * len(pending)
            can_dispatch = ledger.within_budget(reserve) and (pilot_cost is not None or not pending)
            if can_dispatch and len(pending) < config.max_parallel_jobs and len(queue) > 0:
                consumed_before = ledger.consumed_gpu_hours
                job = queue.draw(rng)
                assert job is not None
                seq += 1
                counters["jobs_drawn"] += 1
                entry = checkpoint.get(f"job:{job.key}")
                if entry is not None:
                    replay(job, seq, entry)
                    continue
                future = executor.submit(execute_job, job, gateway, diff_cfg, config)
                pending[future] = (job, seq, consumed_before)
                continue
            if not pending:
                budget_stopped = len(queue) > 0 and not ledger.within_budget()
                break
            done, _ = wait(pending, return_when=FIRST_COMPLETED)
            for future in done:
                job, job_seq, consumed_before = pending.pop(future)
                status, candidate, edited_done = future.result()
                if pilot_cost is None:
                    pilot_cost = max(ledger.consumed_gpu_hours - consumed_before, 0.0)
                finish(job, job_seq, status, candidate, edited_done)
    return budget_stopped
