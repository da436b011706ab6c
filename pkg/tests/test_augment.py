"""Dataset expansion: inversion, bootstrap composition, backward filtering."""

import pytest

from tripletmine.augment import (
    AugmentConfig,
    apply_bootstraps,
    apply_inversions,
    backward_consistency_filter,
    compose_instruction,
    run_augmentation,
    validate_lineage,
)
from tripletmine.gateway import Role
from tripletmine.scores import ScorePair
from tripletmine.store import BlobStore, Derivation, make_record

from .conftest import make_sim_gateway, solid_image


class RecordFactory:
    """Forward/inverted/composed records backed by real blobs in one store."""

    def __init__(self, blob_store):
        self.store = blob_store
        self._next_color = 0

    def ref(self):
        self._next_color += 1
        c = self._next_color
        return self.store.put_pixels(solid_image(24, 24, (c % 256, (c * 7) % 256, (c * 13) % 256)))

    def forward(self, instruction, source=None, bundle_id="b1", edit_index=0, t2i_prompt="A desk scene."):
        return make_record(
            source_image=source if source is not None else self.ref(),
            instruction=instruction,
            edited_image=self.ref(),
            derivation=Derivation.forward(),
            bundle_id=bundle_id,
            edit_index=edit_index,
            t2i_prompt=t2i_prompt,
            hard_scores=ScorePair(4.8, 4.8),
            seeds=(1, 2),
        )

    def inverse_of(self, parent, instruction):
        return make_record(
            source_image=parent.edited_image,
            instruction=instruction,
            edited_image=parent.source_image,
            derivation=Derivation.inverted(parent.record_id),
            bundle_id=parent.bundle_id,
            edit_index=parent.edit_index,
            t2i_prompt=parent.t2i_prompt,
            seeds=parent.seeds,
        )

    def composite_of(self, first, second, instruction):
        return make_record(
            source_image=first.edited_image,
            instruction=instruction,
            edited_image=second.edited_image,
            derivation=Derivation.composed(first.record_id, second.record_id),
            bundle_id=first.bundle_id,
            edit_index=second.edit_index,
            t2i_prompt=first.t2i_prompt,
        )


@pytest.fixture
def rig(tmp_path):
    gateway, backend = make_sim_gateway(tmp_path, seed=5, profile="high")
    return gateway, RecordFactory(BlobStore(tmp_path))


class TestConfig:
    def test_negative_cap_rejected(self):
        with pytest.raises(ValueError):
            AugmentConfig(max_compositions_per_source=-1)

    def test_uncapped_is_allowed(self):
        assert AugmentConfig(max_compositions_per_source=None).max_compositions_per_source is None

    @pytest.mark.parametrize("field", ["t_inv_adherence", "t_inv_aesthetic"])
    def test_thresholds_must_be_on_scale(self, field):
        with pytest.raises(ValueError):
            AugmentConfig(**{field: 5.5})


class TestInversion:
    def test_one_inverse_per_forward_record(self, rig):
        gateway, factory = rig
        forwards = [factory.forward(f"Add a {noun} to the desk.") for noun in ("mug", "lamp", "plant", "book")]
        inverted, counters = apply_inversions(forwards, gateway)
        assert len(inverted) == len(forwards)
        assert counters == {"attempted": 4, "inverted": 4, "refused": 0, "failed": 0}

    def test_inverse_swaps_images_and_links_parent(self, rig):
        gateway, factory = rig
        parent = factory.forward("Add a red mug to the desk.")
        (record,), _ = apply_inversions([parent], gateway)
        assert record.source_image == parent.edited_image
        assert record.edited_image == parent.source_image
        assert record.derivation == Derivation.inverted(parent.record_id)
        assert record.bundle_id == parent.bundle_id
        assert record.edit_index == parent.edit_index
        assert record.t2i_prompt == parent.t2i_prompt
        assert record.seeds == parent.seeds
        assert record.hard_scores is None

    def test_inverse_text_negates_the_edit(self, rig):
        gateway, factory = rig
        (record,), _ = apply_inversions([factory.forward("Add a red mug to the desk.")], gateway)
        assert record.instruction.startswith("Remove")

    def test_non_forward_inputs_are_ignored(self, rig):
        gateway, factory = rig
        parent = factory.forward("Add a vase.")
        existing_inverse = factory.inverse_of(parent, "Remove the vase.")
        inverted, counters = apply_inversions([parent, existing_inverse], gateway)
        assert len(inverted) == 1
        assert counters["attempted"] == 1

    def test_refused_inversion_is_dropped_and_counted(self, rig):
        gateway, factory = rig
        forwards = [factory.forward("Add a mug."), factory.forward("Tint the wall blue. [refuse-invert]")]
        inverted, counters = apply_inversions(forwards, gateway)
        assert len(inverted) == 1
        assert counters == {"attempted": 2, "inverted": 1, "refused": 1, "failed": 0}


class TestComposeInstruction:
    def test_joins_with_sentence_break(self):
        assert compose_instruction("Remove the mug", "Add a hat.") == "Remove the mug. Add a hat."

    def test_existing_terminator_kept(self):
        assert compose_instruction("Remove the mug!", "Add a hat.") == "Remove the mug! Add a hat."

    def test_whitespace_trimmed(self):
        assert compose_instruction("  Remove the mug. ", " Add a hat. ") == "Remove the mug. Add a hat."


def three_edit_source(factory):
    source = factory.ref()
    forwards = [
        factory.forward(f"Add a {noun}.", source=source, edit_index=i)
        for i, noun in enumerate(("mug", "lamp", "plant"))
    ]
    inverses = [factory.inverse_of(f, f"Remove the {noun}.") for f, noun in zip(forwards, ("mug", "lamp", "plant"))]
    return forwards, inverses


class TestBootstrapComposition:
    def test_uncapped_three_edits_give_six_ordered_pairs(self, rig):
        _, factory = rig
        forwards, inverses = three_edit_source(factory)
        cfg = AugmentConfig(max_compositions_per_source=None)
        composed, counters = apply_bootstraps(forwards + inverses, cfg)
        assert len(composed) == 6
        assert counters["pairs_considered"] == 6
        assert counters["composed"] == 6
        pairs = {c.derivation.parent_ids for c in composed}
        ids = [f.record_id for f in forwards]
        assert pairs == {(a, b) for a in ids for b in ids if a != b}

    def test_composed_record_bridges_edited_images(self, rig):
        _, factory = rig
        forwards, inverses = three_edit_source(factory)
        cfg = AugmentConfig(max_compositions_per_source=None)
        composed, _ = apply_bootstraps(forwards + inverses, cfg)
        by_parents = {c.derivation.parent_ids: c for c in composed}
        first, second = forwards[0], forwards[2]
        record = by_parents[(first.record_id, second.record_id)]
        assert record.source_image == first.edited_image
        assert record.edited_image == second.edited_image
        assert record.instruction == "Remove the mug. Add a plant."
        assert record.hard_scores is None

    def test_cap_limits_pairs_per_source(self, rig):
        _, factory = rig
        groups = [three_edit_source(factory) for _ in range(2)]
        records = [r for forwards, inverses in groups for r in forwards + inverses]
        composed, counters = apply_bootstraps(records, AugmentConfig(max_compositions_per_source=1))
        assert len(composed) == 2
        assert counters["sources_with_pairs"] == 2
        sources = {c.derivation.parent_ids[0] for c in composed}
        assert len(sources) == 2

    def test_zero_cap_disables_composition(self, rig):
        _, factory = rig
        forwards, inverses = three_edit_source(factory)
        composed, _ = apply_bootstraps(forwards + inverses, AugmentConfig(max_compositions_per_source=0))
        assert composed == []

    def test_cap_sampling_is_seed_deterministic(self, rig):
        _, factory = rig
        forwards, inverses = three_edit_source(factory)
        records = forwards + inverses
        first, _ = apply_bootstraps(records, AugmentConfig(max_compositions_per_source=2, seed=9))
        second, _ = apply_bootstraps(records, AugmentConfig(max_compositions_per_source=2, seed=9))
        assert first == second

    def test_single_edit_sources_produce_nothing(self, rig):
        _, factory = rig
        records = [factory.forward("Add a mug."), factory.forward("Add a lamp.")]
        composed, counters = apply_bootstraps(records, AugmentConfig(max_compositions_per_source=None))
        assert composed == []
        assert counters["sources_with_pairs"] == 0

    def test_pair_without_surviving_inverse_is_skipped(self, rig):
        _, factory = rig
        forwards, inverses = three_edit_source(factory)
        cfg = AugmentConfig(max_compositions_per_source=None)
        composed, counters = apply_bootstraps(forwards + inverses[1:], cfg)
        assert counters["skipped_no_inverse"] == 2
        assert len(composed) == 4
        assert all(c.derivation.parent_ids[0] != forwards[0].record_id for c in composed)

    def test_identical_edited_images_are_degenerate(self, rig):
        _, factory = rig
        source = factory.ref()
        edited = factory.ref()
        a = make_record(
            source_image=source, instruction="Brighten the lamp.", edited_image=edited,
            derivation=Derivation.forward(), bundle_id="b1", edit_index=0,
            t2i_prompt="A desk.", hard_scores=ScorePair(4.8, 4.8), seeds=(1, 2),
        )
        b = make_record(
            source_image=source, instruction="Make the lamp brighter.", edited_image=edited,
            derivation=Derivation.forward(), bundle_id="b1", edit_index=1,
            t2i_prompt="A desk.", hard_scores=ScorePair(4.8, 4.8), seeds=(1, 3),
        )
        inverses = [factory.inverse_of(r, "Dim the lamp.") for r in (a, b)]
        composed, counters = apply_bootstraps([a, b] + inverses, AugmentConfig(max_compositions_per_source=None))
        assert composed == []
        assert counters["skipped_degenerate"] == 2

    def test_rewrite_mode_collapses_to_single_line(self, rig):
        gateway, factory = rig
        forwards, inverses = three_edit_source(factory)
        cfg = AugmentConfig(max_compositions_per_source=None, rewrite_composites=True)
        composed, counters = apply_bootstraps(forwards + inverses, cfg, gateway)
        assert len(composed) == 6
        assert counters["rewrites_refused"] == 0
        for record in composed:
            assert record.instruction.startswith("In one step:")
            assert "\n" not in record.instruction


class TestBackwardFilter:
    def test_all_passing_inverses_are_kept_and_rescored(self, rig):
        gateway, factory = rig
        forwards, inverses = three_edit_source(factory)
        kept, removed, counters = backward_consistency_filter(forwards + inverses, gateway)
        assert removed == set()
        assert counters["inverted_checked"] == 3
        assert counters["inverted_failed"] == 0
        kept_by_id = {r.record_id: r for r in kept}
        for original in inverses:
            rescored = kept_by_id[original.record_id]
            assert rescored.hard_scores is not None
            assert rescored.record_id == original.record_id
        for original in forwards:
            assert kept_by_id[original.record_id] == original

    def test_unscorable_inverse_removes_both_directions_and_cascades(self, rig):
        gateway, factory = rig
        forwards, inverses = three_edit_source(factory)
        bad = factory.inverse_of(forwards[1], "Remove the lamp. [faulty-score]")
        inverses[1] = bad
        composites = [
            factory.composite_of(forwards[0], forwards[1], "Remove the mug. Add a lamp."),
            factory.composite_of(forwards[1], forwards[2], "Remove the lamp. Add a plant."),
            factory.composite_of(forwards[2], forwards[0], "Remove the plant. Add a mug."),
        ]
        records = forwards + inverses + composites
        kept, removed, counters = backward_consistency_filter(records, gateway)
        assert removed == {
            bad.record_id,
            forwards[1].record_id,
            composites[0].record_id,
            composites[1].record_id,
        }
        assert counters["score_unavailable"] == 1
        assert counters["inverted_failed"] == 1
        assert counters["forward_removed"] == 1
        assert counters["composed_cascaded"] == 2
        kept_ids = {r.record_id for r in kept}
        assert forwards[0].record_id in kept_ids
        assert composites[2].record_id in kept_ids
        assert len(kept) == len(records) - len(removed)

    def test_threshold_failures_match_directly_queried_scores(self, tmp_path):
        gateway, _ = make_sim_gateway(tmp_path, seed=12, profile="mixed")
        factory = RecordFactory(BlobStore(tmp_path))
        forwards = [factory.forward(f"Repaint wall {i} green.", bundle_id=f"b{i}") for i in range(10)]
        inverses = [factory.inverse_of(f, f"Repaint wall {i} white.") for i, f in enumerate(forwards)]
        expected_removed = set()
        for forward, inverse in zip(forwards, inverses):
            scores = gateway.score(
                inverse.source_image, inverse.instruction, inverse.edited_image, Role.HARD_VALIDATOR
            )
            if scores.adherence < 4.7 or scores.aesthetic < 4.7:
                expected_removed |= {inverse.record_id, forward.record_id}
        kept, removed, counters = backward_consistency_filter(forwards + inverses, gateway)
        assert 0 < counters["inverted_failed"] < len(inverses)
        assert removed == expected_removed
        assert {r.record_id for r in kept} == {
            r.record_id for r in forwards + inverses
        } - expected_removed


class TestValidateLineage:
    def test_consistent_graph_passes(self, rig):
        _, factory = rig
        forwards, inverses = three_edit_source(factory)
        composite = factory.composite_of(forwards[0], forwards[1], "Remove the mug. Add a lamp.")
        validate_lineage(forwards + inverses + [composite])

    def test_missing_parent_rejected(self, rig):
        _, factory = rig
        parent = factory.forward("Add a mug.")
        orphan = factory.inverse_of(parent, "Remove the mug.")
        with pytest.raises(ValueError, match="missing parent"):
            validate_lineage([orphan])

    def test_inverse_must_swap_parent_images(self, rig):
        _, factory = rig
        parent = factory.forward("Add a mug.")
        wrong = make_record(
            source_image=parent.source_image, instruction="Remove the mug.",
            edited_image=parent.edited_image, derivation=Derivation.inverted(parent.record_id),
            bundle_id=parent.bundle_id, edit_index=0, t2i_prompt=parent.t2i_prompt,
        )
        with pytest.raises(ValueError, match="swap"):
            validate_lineage([parent, wrong])

    def test_composed_parents_must_share_a_source(self, rig):
        _, factory = rig
        a = factory.forward("Add a mug.")
        b = factory.forward("Add a lamp.")
        bridge = factory.composite_of(a, b, "Remove the mug. Add a lamp.")
        with pytest.raises(ValueError, match="different sources"):
            validate_lineage([a, b, bridge])

    def test_parents_must_be_forward_records(self, rig):
        _, factory = rig
        parent = factory.forward("Add a mug.")
        inverse = factory.inverse_of(parent, "Remove the mug.")
        nested = make_record(
            source_image=inverse.edited_image, instruction="Add the mug back differently.",
            edited_image=inverse.source_image, derivation=Derivation.inverted(inverse.record_id),
            bundle_id="b1", edit_index=0, t2i_prompt="A desk.",
        )
        with pytest.raises(ValueError, match="non-forward parent"):
            validate_lineage([parent, inverse, nested])


class TestRunAugmentation:
    def build_corpus(self, factory):
        shared = factory.ref()
        return [
            factory.forward("Add a mug.", source=shared, edit_index=0),
            factory.forward("Add a lamp.", source=shared, edit_index=1),
            factory.forward("Add a rug."),
        ]

    def test_full_pipeline_counts(self, rig):
        gateway, factory = rig
        forwards = self.build_corpus(factory)
        cfg = AugmentConfig(max_compositions_per_source=None)
        kept, report = run_augmentation(forwards, gateway, cfg)
        kinds = {"forward": 0, "inverted": 0, "composed": 0}
        for record in kept:
            kinds[record.derivation.kind] += 1
        assert kinds == {"forward": 3, "inverted": 3, "composed": 2}
        assert report["inversion"]["inverted"] == 3
        assert report["bootstrap"]["composed"] == 2
        assert report["backward_filter"]["removed_total"] == 0
        for record in kept:
            if record.derivation.kind == "inverted":
                assert record.hard_scores is not None

    def test_two_runs_are_identical(self, tmp_path):
        results = []
        for run in range(2):
            root = tmp_path / str(run)
            root.mkdir()
            gateway, _ = make_sim_gateway(root, seed=5, profile="high")
            factory = RecordFactory(BlobStore(root))
            kept, report = run_augmentation(
                self.build_corpus(factory), gateway, AugmentConfig(max_compositions_per_source=None)
            )
            results.append((kept, report))
        assert results[0] == results[1]

    def test_refusal_suppresses_dependent_compositions(self, rig):
        gateway, factory = rig
        shared = factory.ref()
        forwards = [
            factory.forward("Add a mug. [refuse-invert]", source=shared, edit_index=0),
            factory.forward("Add a lamp.", source=shared, edit_index=1),
        ]
        kept, report = run_augmentation(forwards, gateway, AugmentConfig(max_compositions_per_source=None))
        assert report["inversion"]["refused"] == 1
        assert report["bootstrap"]["skipped_no_inverse"] == 1
        composed = [r for r in kept if r.derivation.kind == "composed"]
        assert len(composed) == 1
        assert composed[0].derivation.parent_ids[0] == forwards[1].record_id
