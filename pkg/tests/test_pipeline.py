import math

import pytest

from ovdkit.dataset import Dataset, ImageRecord, ObjectRecord
from ovdkit.foreground import ForegroundEstimator, WeibullParams
from ovdkit.geometry import Box, iou, max_iou
from ovdkit.harness import ScenarioConfig, synth_dataset
from ovdkit.pipeline import (
    AnnotationStore,
    FileProposalSource,
    FilterConfig,
    OracleProposalSource,
    filter_proposals,
    novel_recall,
    run_iteration,
    run_pipeline,
)

CFG = FilterConfig()
# fg=(4,1), bg=(1,1) has density ratio 3 at this eta, so the likelihood is 0.75.
ETA_075 = -math.log(1 - 0.75 ** (1 / 3))
FE = ForegroundEstimator(WeibullParams(4, 1), WeibullParams(1, 1), gamma=0.5)


class EmptySource:
    def proposals(self, image_id, iteration):
        return []


class FixedSource:
    def __init__(self, props):
        self.props = props

    def proposals(self, image_id, iteration):
        return list(self.props)


def one_image_dataset(novel_boxes=(), gt_boxes=()):
    img = ImageRecord(
        0,
        gt=[ObjectRecord(b, "cat") for b in gt_boxes],
        novel_heldout=[ObjectRecord(b, "zebra") for b in novel_boxes],
    )
    return Dataset(["cat"], ["zebra"], [img])


@pytest.fixture(scope="module")
def small_world():
    dataset, _ = synth_dataset(ScenarioConfig(images=40, seed=3))
    fe = ForegroundEstimator(WeibullParams(3, 2), WeibullParams(1, 1))
    src = OracleProposalSource(dataset, seed=3)
    return dataset, fe, src


class TestFilter:
    def test_drops_gt_overlap(self):
        gt = [Box(0.5, 0.5, 0.2, 0.2)]
        assert filter_proposals([(Box(0.5, 0.5, 0.2, 0.2), 0.9)], gt, CFG) == []

    def test_quality_and_area(self):
        props = [
            (Box(0.2, 0.2, 0.1, 0.1), 0.2),  # low quality
            (Box(0.5, 0.5, 0.01, 0.01), 0.9),  # too small
            (Box(0.5, 0.5, 0.99, 0.99), 0.9),  # too large
            (Box(0.8, 0.8, 0.1, 0.1), 0.5),
        ]
        assert filter_proposals(props, [], CFG) == [props[3]]

    def test_dedup_keeps_best(self):
        a = Box(0.5, 0.5, 0.2, 0.2)
        b = Box(0.5, 0.5, 0.2, 0.18)  # IoU 0.9 with a
        assert iou(a, b) == pytest.approx(0.9)
        assert filter_proposals([(a, 0.5), (b, 0.8)], [], CFG) == [(b, 0.8)]

    def test_cap(self):
        props = [(Box(0.05 + 0.1 * i, 0.5, 0.05, 0.05), 0.5 + 0.01 * i) for i in range(9)]
        out = filter_proposals(props, [], FilterConfig(per_image_cap=3))
        assert [s for _, s in out] == pytest.approx([0.58, 0.57, 0.56])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FilterConfig(max_iou_vs_gt=1.5)
        with pytest.raises(ValueError):
            FilterConfig(min_area=0.5, max_area=0.4)
        assert FilterConfig.from_dict({"dedup_iou": 0.6, "unknown": 1}).dedup_iou == 0.6


class TestIteration:
    def test_empty_source(self):
        store = AnnotationStore.from_dataset(one_image_dataset())
        out = run_iteration(store, EmptySource(), FE, lambda i, b: 1.0, CFG)
        assert out.images[0].pseudo == []
        assert out.iteration == 1 and out.history == [0]

    def test_stored_weight(self):
        box = Box(0.3, 0.3, 0.1, 0.1)
        store = AnnotationStore.from_dataset(one_image_dataset())
        out = run_iteration(store, FixedSource([(box, 0.7)]), FE, lambda i, b: ETA_075, CFG)
        (u,) = out.images[0].pseudo
        assert u.o == box and u.s == 0.7
        assert u.w == pytest.approx(math.sqrt(0.75), abs=1e-12)
        assert u.w == pytest.approx(0.8660, abs=1e-4)

    def test_input_store_untouched(self):
        store = AnnotationStore.from_dataset(one_image_dataset())
        run_iteration(store, FixedSource([(Box(0.3, 0.3, 0.1, 0.1), 0.7)]), FE, lambda i, b: 1.0, CFG)
        assert store.images[0].pseudo == [] and store.iteration == 0

    def test_missing_eta(self):
        store = AnnotationStore.from_dataset(one_image_dataset())
        with pytest.raises(KeyError, match="missing reconstruction error"):
            run_iteration(store, FixedSource([(Box(0.3, 0.3, 0.1, 0.1), 0.7)]), FE, lambda i, b: None, CFG)

    def test_existing_pseudo_not_duplicated(self):
        box = Box(0.3, 0.3, 0.1, 0.1)
        store = AnnotationStore.from_dataset(one_image_dataset())
        src = FixedSource([(box, 0.7)])
        once = run_iteration(store, src, FE, lambda i, b: 1.0, CFG)
        twice = run_iteration(once, src, FE, lambda i, b: 1.0, CFG)
        assert len(twice.images[0].pseudo) == 1
        assert twice.history == [1, 0]


class TestPipeline:
    def test_zero_iterations(self, small_world):
        dataset, fe, src = small_world
        store, log = run_pipeline(dataset, src, 0, CFG, fe, src.eta)
        assert log == [0.0]
        assert all(not a.pseudo for a in store.images.values())

    def test_one_iteration_equals_run_iteration(self, small_world):
        dataset, fe, src = small_world
        store, log = run_pipeline(dataset, src, 1, CFG, fe, src.eta)
        direct = run_iteration(AnnotationStore.from_dataset(dataset), src, fe, src.eta, CFG)
        assert store.to_dict() == direct.to_dict()
        assert log[1] == novel_recall(direct, dataset)

    def test_deterministic(self, small_world):
        dataset, fe, src = small_world
        a = run_pipeline(dataset, src, 2, CFG, fe, src.eta)
        b = run_pipeline(dataset, OracleProposalSource(dataset, seed=3), 2, CFG, fe, src.eta)
        assert a[0].to_dict() == b[0].to_dict() and a[1] == b[1]

    def test_recall_non_decreasing_and_append_only(self, small_world):
        dataset, fe, src = small_world
        _, log = run_pipeline(dataset, src, 3, CFG, fe, src.eta)
        assert all(y >= x for x, y in zip(log, log[1:]))
        assert log[-1] > log[0]
        store = AnnotationStore.from_dataset(dataset)
        for _ in range(3):
            nxt = run_iteration(store, src, fe, src.eta, CFG)
            for k, ann in store.images.items():
                assert nxt.images[k].pseudo[: len(ann.pseudo)] == ann.pseudo
            store = nxt

    def test_stored_labels_respect_filters(self, small_world):
        dataset, fe, src = small_world
        store, _ = run_pipeline(dataset, src, 3, CFG, fe, src.eta)
        for ann in store.images.values():
            gt = [b for b, _ in ann.gt]
            assert len(ann.pseudo) <= CFG.per_image_cap
            for k, u in enumerate(ann.pseudo):
                assert u.s >= CFG.min_quality
                assert CFG.min_area <= u.o.area <= CFG.max_area
                assert max_iou(u.o, gt) <= CFG.max_iou_vs_gt
                assert 0.0 <= u.w <= 1.0
                assert all(iou(u.o, v.o) <= CFG.dedup_iou for v in ann.pseudo[:k])

    def test_negative_iterations(self, small_world):
        dataset, fe, src = small_world
        with pytest.raises(ValueError):
            run_pipeline(dataset, src, -1, CFG, fe, src.eta)


class TestStoreAndSources:
    def test_store_round_trip(self, small_world):
        dataset, fe, src = small_world
        store, _ = run_pipeline(dataset, src, 2, CFG, fe, src.eta)
        fresh = AnnotationStore.from_dataset(dataset)
        fresh.load_pseudo(store.to_dict())
        assert fresh.to_dict() == store.to_dict()

    def test_file_source(self):
        box = [0.3, 0.3, 0.1, 0.1]
        doc = {"images": [{"id": 0, "proposals": [{"box": box, "s": 0.7, "eta": ETA_075}]}]}
        src = FileProposalSource(doc)
        assert src.proposals(0, 5) == [(Box(*box), 0.7)]
        assert src.proposals(9, 0) == []
        assert src.eta(0, Box(*box)) == ETA_075
        out = run_iteration(AnnotationStore.from_dataset(one_image_dataset()), src, FE, src.eta, CFG)
        assert out.images[0].pseudo[0].w == pytest.approx(math.sqrt(0.75))

    def test_oracle_emissions_cumulative(self, small_world):
        dataset, _, src = small_world
        for img in dataset.images[:10]:
            prev = set(src.proposals(img.id, 0))
            for t in range(1, 4):
                cur = set(src.proposals(img.id, t))
                assert prev <= cur
                prev = cur

    def test_novel_recall_counts_pseudo(self):
        novel = Box(0.3, 0.3, 0.1, 0.1)
        ds = one_image_dataset(novel_boxes=[novel])
        store = AnnotationStore.from_dataset(ds)
        assert novel_recall(store, ds) == 0.0
        out = run_iteration(store, FixedSource([(novel, 0.7)]), FE, lambda i, b: 1.0, CFG)
        assert novel_recall(out, ds) == 1.0
