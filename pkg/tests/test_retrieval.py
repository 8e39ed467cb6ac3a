"""Retrieval ranking/grounding and open-world detection protocols."""

import numpy as np
import pytest

from regioncap import autodiff as ad
from regioncap import datasynth as ds
from regioncap import evaluation as ev
from regioncap.errors import DataError
from regioncap.model import DenseCaptioner

from conftest import make_tiny_cfg


@pytest.fixture(scope="module")
def tiny_world(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("retrieval")
    cfg = make_tiny_cfg(seed=21)
    cfg.data.min_objects = 2
    cfg.data.max_objects = 4
    ds.write_dataset(tmp / "d", cfg, 10)
    bundle = ds.read_dataset(tmp / "d")
    model = DenseCaptioner.build(cfg, bundle.vocab, np.random.default_rng(2))
    return cfg, bundle, model


class TestRetrievalEval:
    def test_pool_of_one(self, tiny_world):
        cfg, bundle, model = tiny_world
        records = [r for r in bundle.records if len(r.regions) >= 2][:1]
        report = ev.retrieval_eval(model, bundle, records, n_queries=1,
                                   captions_per_query=2, top_p=5,
                                   rng=np.random.default_rng(0))
        assert report.recall_at[1] == 1.0
        assert report.median_rank == 1.0

    def test_metric_bounds(self, tiny_world):
        cfg, bundle, model = tiny_world
        records = [r for r in bundle.records if len(r.regions) >= 2][:6]
        report = ev.retrieval_eval(model, bundle, records, n_queries=4,
                                   captions_per_query=2, top_p=6,
                                   rng=np.random.default_rng(1))
        for k, v in report.recall_at.items():
            assert 0.0 <= v <= 1.0
        assert 1 <= report.median_rank <= len(records)
        for v in report.iou_recall_at.values():
            assert 0.0 <= v <= 1.0
        for q in report.per_query:
            assert 1 <= q.rank <= len(records)
            assert all(0.0 <= i <= 1.0 for i in q.caption_ious)

    def test_deterministic_given_rng(self, tiny_world):
        cfg, bundle, model = tiny_world
        records = [r for r in bundle.records if len(r.regions) >= 2][:5]
        r1 = ev.retrieval_eval(model, bundle, records, 3, 2, 5,
                               np.random.default_rng(42))
        r2 = ev.retrieval_eval(model, bundle, records, 3, 2, 5,
                               np.random.default_rng(42))
        assert r1.to_dict() == r2.to_dict()

    def test_no_eligible_source_rejected(self, tiny_world):
        cfg, bundle, model = tiny_world
        records = bundle.records[:3]
        with pytest.raises(DataError):
            ev.retrieval_eval(model, bundle, records, n_queries=2,
                              captions_per_query=50, top_p=5,
                              rng=np.random.default_rng(0))

    def test_random_scorer_recall_matches_chance(self, tiny_world):
        # Monte-Carlo oracle for the ranking logic: a random scorer on a
        # pool of N must land R@1 near 1/N
        cfg, bundle, model = tiny_world

        class FakeCaptioner:
            def __init__(self):
                self.rng = np.random.default_rng(777)

            def logprob_matrix(self, codes, caps, length_normalized=False):
                return self.rng.normal(size=(len(caps), codes.shape[0]))

        class FakeModel:
            vocab = model.vocab
            captioner = FakeCaptioner()

            def proposal_codes(self, image, top_p, nms_iou=None):
                boxes = np.tile(np.array([[8.0, 8.0, 6.0, 6.0]]), (top_p, 1))
                return boxes, np.zeros(top_p), ad.Tensor(np.zeros((top_p, 4)))

        records = [r for r in bundle.records if len(r.regions) >= 2]
        n = len(records)
        report = ev.retrieval_eval(FakeModel(), bundle, records, n_queries=240,
                                   captions_per_query=2, top_p=3,
                                   rng=np.random.default_rng(3))
        chance = 1.0 / n
        sigma = np.sqrt(chance * (1 - chance) / 240)
        assert abs(report.recall_at[1] - chance) < 4.5 * sigma


class TestOpenWorldDetect:
    def test_top_n_larger_than_pool_returns_all_sorted(self, tiny_world):
        cfg, bundle, model = tiny_world
        records = bundle.records[:3]
        hits = ev.open_world_detect(model, bundle, records,
                                    ["red", "circle"], top_n=1000, top_p=4)
        assert len(hits) == 3 * 4
        scores = [s for _, _, s in hits]
        assert scores == sorted(scores, reverse=True)

    def test_duplicated_image_duplicates_detections(self, tiny_world):
        cfg, bundle, model = tiny_world
        rec = bundle.records[0]
        hits = ev.open_world_detect(model, bundle, [rec, rec],
                                    ["red", "circle"], top_n=6, top_p=3)
        by_prop = {}
        for ii, box, score in hits:
            by_prop.setdefault(tuple(np.round(box, 9)), []).append(score)
        for scores in by_prop.values():
            assert len(scores) == 2
            assert scores[0] == scores[1]

    def test_zero_top_n_empty(self, tiny_world):
        cfg, bundle, model = tiny_world
        hits = ev.open_world_detect(model, bundle, bundle.records[:2],
                                    ["red"], top_n=0, top_p=3)
        assert hits == []

    def test_out_of_vocab_query_rejected(self, tiny_world):
        cfg, bundle, model = tiny_world
        with pytest.raises(DataError):
            ev.open_world_detect(model, bundle, bundle.records[:2],
                                 ["zebra", "unicorn"], top_n=3, top_p=3)
