"""Scheduler: enumeration, uniform draws, budget laws, checkpoint resume."""

import random
from collections import Counter

import pytest

from tripletmine.bundles import make_bundle, mark_composites
from tripletmine.images import ImageRef
from tripletmine.scheduler import (
    BudgetLedger,
    Job,
    JobQueue,
    PipelineConfig,
    SourceImage,
    enumerate_jobs,
    job_seed,
    run_mining,
)
from tripletmine.sim import SimCosts

from .conftest import make_sim_gateway

DEFAULT_SPEC = (
    ("A desk with a lamp, a mug, and a clock.", ["Remove the lamp.", "Add a plant beside the mug."]),
    ("A shelf with a radio and a globe.", ["Remove the radio.", "Add a candle on the shelf."]),
)


def make_sources(n, edits_per_bundle=3):
    sources = []
    for i in range(n):
        bundle = mark_composites(
            make_bundle(f"prompt {i}", [f"Edit {j} of source {i}." for j in range(edits_per_bundle)])
        )
        ref = ImageRef(image_id=f"img{i}", width=64, height=64)
        sources.append(SourceImage(ref=ref, bundle=bundle, seed_ordinal=1, t2i_seed=i))
    return sources


def mine(
    tmp_path,
    spec=DEFAULT_SPEC,
    backend_seed=3,
    profile="high",
    checkpoint=None,
    resume=False,
    gateway_pair=None,
    **config_kwargs,
):
    if gateway_pair is None:
        gateway_pair = make_sim_gateway(tmp_path, seed=backend_seed, profile=profile)
    gateway, backend = gateway_pair
    bundles = [mark_composites(make_bundle(p, edits)) for p, edits in spec]
    defaults = dict(seeds_per_prompt=1, retries_per_edit=2, master_seed=11)
    defaults.update(config_kwargs)
    config = PipelineConfig(**defaults)
    result = run_mining(
        config, bundles, gateway, checkpoint_path=checkpoint, resume=resume
    )
    return result, gateway, backend


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"seeds_per_prompt": 0},
            {"retries_per_edit": 0},
            {"t_adherence": 0.5},
            {"t_aesthetic": 5.5},
            {"max_parallel_jobs": 0},
            {"budget_gpu_hours": -1.0},
            {"master_seed": -1},
        ],
    )
    def test_invalid_config_rejected(self, kwargs):
        with pytest.raises(ValueError):
            PipelineConfig(**kwargs)


class TestEnumeration:
    def test_counts_two_sources(self):
        jobs = enumerate_jobs(make_sources(2, edits_per_bundle=3), 2, master_seed=0)
        assert len(jobs) == 2 * 3 * 2

    def test_counts_ten_sources(self):
        jobs = enumerate_jobs(make_sources(10, edits_per_bundle=6), 5, master_seed=0)
        assert len(jobs) == 300

    def test_keys_unique_and_retries_one_based(self):
        jobs = enumerate_jobs(make_sources(3), 4, master_seed=0)
        keys = [j.key for j in jobs]
        assert len(set(keys)) == len(keys)
        assert {j.retry_ordinal for j in jobs} == {1, 2, 3, 4}

    def test_seeds_distinct_and_derived(self):
        jobs = enumerate_jobs(make_sources(3), 4, master_seed=9)
        seeds = {j.seed for j in jobs}
        assert len(seeds) == len(jobs)
        for job in jobs:
            assert job.seed == job_seed(9, job.source_image_id, job.edit_index, job.retry_ordinal)

    def test_master_seed_changes_every_job_seed(self):
        a = enumerate_jobs(make_sources(2), 2, master_seed=1)
        b = enumerate_jobs(make_sources(2), 2, master_seed=2)
        assert all(x.seed != y.seed for x, y in zip(a, b))


class TestQueue:
    def test_draw_without_replacement_covers_all(self):
        jobs = enumerate_jobs(make_sources(3), 3, master_seed=0)
        queue = JobQueue(jobs)
        rng = random.Random(5)
        drawn = []
        while (job := queue.draw(rng)) is not None:
            drawn.append(job.key)
        assert sorted(drawn) == sorted(j.key for j in jobs)
        assert len(drawn) == len(jobs)

    def test_draw_order_reproducible(self):
        jobs = enumerate_jobs(make_sources(3), 3, master_seed=0)

        def order(seed):
            q, r, out = JobQueue(jobs), random.Random(seed), []
            while (j := q.draw(r)) is not None:
                out.append(j.key)
            return out

        assert order(7) == order(7)
        assert order(7) != order(8)

    def test_first_draw_uniform(self):
        jobs = enumerate_jobs(make_sources(1, edits_per_bundle=2), 2, master_seed=0)
        assert len(jobs) == 4
        trials = 100_000
        counts = Counter()
        for trial in range(trials):
            queue = JobQueue(jobs)
            first = queue.draw(random.Random(trial))
            counts[first.key] += 1
        # each of 4 jobs should be first with probability 1/4, within 3 sigma
        sigma = (0.25 * 0.75 / trials) ** 0.5
        for key in (j.key for j in jobs):
            assert abs(counts[key] / trials - 0.25) <= 3 * sigma


class TestLedger:
    def test_charges_accumulate_in_microhours(self):
        ledger = BudgetLedger(1.0)
        for _ in range(10):
            ledger.charge(0.1)
        assert ledger.consumed_gpu_hours == pytest.approx(1.0, abs=1e-12)
        assert not ledger.within_budget()

    def test_order_independent_totals(self):
        costs = [0.013, 0.0007, 0.25, 0.111, 0.005] * 20
        a, b = BudgetLedger(float("inf")), BudgetLedger(float("inf"))
        for c in costs:
            a.charge(c)
        for c in reversed(costs):
            b.charge(c)
        assert a.consumed_gpu_hours == b.consumed_gpu_hours

    def test_within_budget_is_strict(self):
        ledger = BudgetLedger(0.5)
        ledger.charge(0.5)
        assert not ledger.within_budget()
        ledger2 = BudgetLedger(0.5)
        ledger2.charge(0.49)
        assert ledger2.within_budget()
        assert not ledger2.within_budget(reserved_gpu_hours=0.02)

    def test_zero_budget_blocks_immediately(self):
        assert not BudgetLedger(0.0).within_budget()

    def test_as_dict_limit_none_when_unlimited(self):
        assert BudgetLedger(float("inf")).as_dict()["limit_gpu_hours"] is None
        assert BudgetLedger(2.5).as_dict()["limit_gpu_hours"] == 2.5

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            BudgetLedger(-0.1)
        with pytest.raises(ValueError):
            BudgetLedger(1.0).charge(-0.5)


class TestMiningLaws:
    def test_unlimited_budget_executes_every_job_once(self, tmp_path):
        result, _, _ = mine(tmp_path)
        c = result.counters
        assert c["jobs_drawn"] == c["jobs_enumerated"] > 0
        status_total = sum(v for k, v in c.items() if k.startswith("jobs_") and k not in ("jobs_enumerated", "jobs_drawn"))
        assert status_total == c["jobs_drawn"]
        assert result.ledger.jobs_executed == c["jobs_drawn"]
        assert result.ledger.jobs_unsampled == 0
        assert not result.budget_stopped

    def test_zero_budget_runs_nothing(self, tmp_path):
        result, gateway, backend = mine(tmp_path, budget_gpu_hours=0.0)
        assert backend.requests_served == 0
        assert result.counters["images_generated"] == 0
        assert result.counters["jobs_drawn"] == 0
        assert result.pool == []
        assert result.budget_stopped
        assert result.ledger.consumed_gpu_hours == 0.0

    def test_budget_overshoot_at_most_one_job(self, tmp_path):
        # uniform per-call costs make the per-job bound exact
        costs = SimCosts(
            prompt_engineer=0.01,
            generator=0.01,
            plausibility=0.01,
            editor=0.01,
            validator=0.01,
            inverter=0.01,
        )
        gateway_pair = make_sim_gateway(tmp_path, seed=3, costs=costs)
        budget = 0.10
        result, _, _ = mine(
            tmp_path,
            gateway_pair=gateway_pair,
            budget_gpu_hours=budget,
            seeds_per_prompt=2,
            retries_per_edit=3,
        )
        # worst single job: edit + score (2 attempts) + 2 checks = 5 calls
        max_job_cost = 5 * 0.01
        assert result.budget_stopped
        assert result.counters["jobs_drawn"] < result.counters["jobs_enumerated"] + 1
        assert result.ledger.consumed_gpu_hours <= budget + max_job_cost + 1e-9
        assert result.ledger.jobs_unsampled > 0

    def test_budget_can_stop_generation_phase(self, tmp_path):
        result, _, _ = mine(tmp_path, budget_gpu_hours=0.03, seeds_per_prompt=3)
        assert result.budget_stopped
        # one generation costs 0.02 + 0.005; the second check trips the guard
        assert result.counters["images_generated"] >= 1
        assert result.counters["jobs_drawn"] == 0
        assert result.ledger.jobs_unsampled == result.counters["jobs_enumerated"]

    def test_runs_are_deterministic(self, tmp_path):
        r1, g1, _ = mine(tmp_path / "a")
        r2, g2, _ = mine(tmp_path / "b")
        assert [c.edited.image_id for c in r1.pool] == [c.edited.image_id for c in r2.pool]
        assert [c.pre_scores for c in r1.pool] == [c.pre_scores for c in r2.pool]
        assert r1.counters == r2.counters
        assert r1.ledger.consumed_gpu_hours == r2.ledger.consumed_gpu_hours

    def test_master_seed_changes_edit_seeds(self, tmp_path):
        r1, _, _ = mine(tmp_path / "a", master_seed=1)
        r2, _, _ = mine(tmp_path / "b", master_seed=2)
        assert {c.edit_seed for c in r1.pool}.isdisjoint({c.edit_seed for c in r2.pool})

    def test_parallel_matches_serial(self, tmp_path):
        serial, _, _ = mine(tmp_path / "s", seeds_per_prompt=2, max_parallel_jobs=1)
        parallel, _, _ = mine(tmp_path / "p", seeds_per_prompt=2, max_parallel_jobs=4)
        assert [c.edited.image_id for c in serial.pool] == [c.edited.image_id for c in parallel.pool]
        assert serial.counters == parallel.counters
        assert serial.ledger.consumed_gpu_hours == parallel.ledger.consumed_gpu_hours

    def test_parallel_budget_overshoot_bounded(self, tmp_path):
        costs = SimCosts(0.01, 0.01, 0.01, 0.01, 0.01, 0.01)
        gateway_pair = make_sim_gateway(tmp_path, seed=3, costs=costs)
        budget = 0.15
        result, _, _ = mine(
            tmp_path,
            gateway_pair=gateway_pair,
            budget_gpu_hours=budget,
            seeds_per_prompt=2,
            retries_per_edit=3,
            max_parallel_jobs=4,
        )
        max_job_cost = 5 * 0.01
        assert result.ledger.consumed_gpu_hours <= budget + 4 * max_job_cost + 1e-9
        assert result.budget_stopped


class TestStatusCounters:
    def run_with_instruction(self, tmp_path, instruction, profile="high"):
        spec = (("A desk with a lamp and a mug.", [instruction]),)
        result, _, _ = mine(tmp_path, spec=spec, profile=profile, retries_per_edit=1)
        return result

    def test_pool_on_clean_run(self, tmp_path):
        result = self.run_with_instruction(tmp_path, "Remove the lamp.")
        assert result.counters["jobs_pool"] == 1
        assert len(result.pool) == 1

    def test_score_unavailable(self, tmp_path):
        result = self.run_with_instruction(tmp_path, "Remove the lamp. [faulty-score]")
        assert result.counters["jobs_score_unavailable"] == 1

    def test_unwanted_mods(self, tmp_path):
        result = self.run_with_instruction(tmp_path, "Remove the lamp. [unwanted-mods]")
        assert result.counters["jobs_unwanted_mods"] == 1

    def test_aesthetics(self, tmp_path):
        result = self.run_with_instruction(tmp_path, "Remove the lamp. [low-aesthetic]")
        assert result.counters["jobs_aesthetics"] == 1

    def test_diff_discard_on_noop(self, tmp_path):
        result = self.run_with_instruction(tmp_path, "Remove the lamp. [no-op-edit]")
        assert result.counters["jobs_diff_discard"] == 1

    def test_diff_discard_on_scatter(self, tmp_path):
        result = self.run_with_instruction(tmp_path, "Remove the lamp. [scatter-noise]")
        assert result.counters["jobs_diff_discard"] == 1

    def test_pre_filter_on_low_profile(self, tmp_path):
        result = self.run_with_instruction(tmp_path, "Remove the lamp.", profile="low")
        assert result.counters["jobs_pre_filter"] == 1

    def test_failed_on_gibberish_check(self, tmp_path):
        result = self.run_with_instruction(tmp_path, "Remove the lamp. [gibberish-check]")
        assert result.counters["jobs_failed"] == 1

    def test_implausible_sources_rejected(self, tmp_path):
        spec = (("A desk. [implausible]", ["Remove the desk."]),)
        result, _, _ = mine(tmp_path, spec=spec)
        assert result.counters["plausibility_rejected"] == 1
        assert result.counters["jobs_enumerated"] == 0


class TestCheckpointResume:
    def test_resume_replays_without_new_requests(self, tmp_path):
        ckpt = tmp_path / "run.jsonl"
        pair = make_sim_gateway(tmp_path, seed=3)
        full, gateway, backend = mine(tmp_path, gateway_pair=pair, checkpoint=ckpt)
        served_after_full = backend.requests_served

        resumed, _, _ = mine(tmp_path, gateway_pair=pair, checkpoint=ckpt, resume=True)
        assert backend.requests_served == served_after_full  # pure replay
        assert [c.edited.image_id for c in resumed.pool] == [
            c.edited.image_id for c in full.pool
        ]
        assert resumed.counters == full.counters

    def test_interrupted_run_resumes_to_reference_result(self, tmp_path):
        reference, _, _ = mine(tmp_path / "ref", seeds_per_prompt=2)

        ckpt = tmp_path / "run.jsonl"
        pair = make_sim_gateway(tmp_path / "main", seed=3)
        partial, _, _ = mine(
            tmp_path / "main",
            gateway_pair=pair,
            checkpoint=ckpt,
            seeds_per_prompt=2,
            budget_gpu_hours=0.4,
        )
        assert partial.budget_stopped
        assert partial.counters["jobs_drawn"] < reference.counters["jobs_drawn"]

        resumed, _, _ = mine(
            tmp_path / "main",
            gateway_pair=pair,
            checkpoint=ckpt,
            resume=True,
            seeds_per_prompt=2,
        )
        assert not resumed.budget_stopped
        assert [c.edited.image_id for c in resumed.pool] == [
            c.edited.image_id for c in reference.pool
        ]
        assert resumed.counters == reference.counters

    def test_header_mismatch_refused(self, tmp_path):
        ckpt = tmp_path / "run.jsonl"
        mine(tmp_path, checkpoint=ckpt, master_seed=1)
        with pytest.raises(ValueError):
            mine(tmp_path, checkpoint=ckpt, resume=True, master_seed=2)

    def test_fresh_run_overwrites_stale_checkpoint(self, tmp_path):
        ckpt = tmp_path / "run.jsonl"
        mine(tmp_path / "a", checkpoint=ckpt, master_seed=1)
        # without resume, a new run rewrites the checkpoint for its own config
        result, _, _ = mine(tmp_path / "b", checkpoint=ckpt, master_seed=2)
        assert result.counters["jobs_drawn"] > 0
        header = ckpt.read_text().splitlines()[0]
        assert '"master_seed": 2' in header


class TestProgressHook:
    def test_on_progress_sees_monotone_counts(self, tmp_path):
        gateway, _ = make_sim_gateway(tmp_path, seed=3)
        bundles = [mark_composites(make_bundle(p, e)) for p, e in DEFAULT_SPEC]
        seen = []
        run_mining(
            PipelineConfig(seeds_per_prompt=1, retries_per_edit=2, master_seed=11),
            bundles,
            gateway,
            on_progress=lambda c: seen.append(c["jobs_drawn"]),
        )
        assert seen
        assert seen == sorted(seen)
