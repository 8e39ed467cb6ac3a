"""Model assembly: backbone contract, anchor head, localization, checkpoints."""

import numpy as np
import pytest

from regioncap import autodiff as ad
from regioncap import geometry as geo
from regioncap.datasynth import build_vocabulary
from regioncap.errors import ContractViolation, DataError
from regioncap.model import DenseCaptioner, image_to_input, read_checkpoint, write_checkpoint

from conftest import make_tiny_cfg
from helpers import central_difference, max_rel_error

VOCAB_TOKENS = [["red", "circle"], ["blue", "square"], ["green", "triangle"]] * 3


def build_model(cfg=None, seed=1):
    cfg = cfg or make_tiny_cfg()
    vocab = build_vocabulary(VOCAB_TOKENS, 1)
    return DenseCaptioner.build(cfg, vocab, np.random.default_rng(seed))


def random_image(rng, size=32):
    return rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)


class TestBackbone:
    def test_shape_contract_exact(self, rng):
        m = build_model()
        u = m.vision.features(image_to_input(random_image(rng), np.float64))
        assert u.shape == (16, 8, 8)  # 32/4

    def test_shape_contract_floor(self, rng):
        m = build_model()
        img = rng.integers(0, 256, size=(34, 34, 3), dtype=np.uint8)
        u = m.vision.features(image_to_input(img, np.float64))
        assert u.shape == (16, 34 // 4, 34 // 4)

    def test_undersized_image_rejected(self, rng):
        m = build_model()
        img = rng.integers(0, 256, size=(3, 3, 3), dtype=np.uint8)
        with pytest.raises(ContractViolation):
            m.vision.features(image_to_input(img, np.float64))

    def test_output_finite(self, rng):
        m = build_model()
        u = m.vision.features(image_to_input(random_image(rng), np.float64))
        assert np.all(np.isfinite(u.data))  # checked mode is on anyway


class TestRPNHead:
    def test_output_shapes(self, rng):
        m = build_model()
        u = m.vision.features(image_to_input(random_image(rng), np.float64))
        scores, deltas = m.vision.rpn.forward(u)
        k = m.vision.rpn.k
        assert k == 9
        assert scores.shape == (8 * 8 * k,)
        assert deltas.shape == (8 * 8 * k, 4)

    def test_zero_weights_zero_logits(self, rng):
        m = build_model()
        for t in (m.vision.rpn.conv_w, m.vision.rpn.conv_b,
                  m.vision.rpn.out_w, m.vision.rpn.out_b):
            t.data = np.zeros_like(t.data)
        u = m.vision.features(image_to_input(random_image(rng), np.float64))
        scores, deltas = m.vision.rpn.forward(u)
        assert np.array_equal(scores.data, np.zeros_like(scores.data))
        assert np.array_equal(deltas.data, np.zeros_like(deltas.data))

    def test_anchor_ordering_matches_generate_anchors(self, rng):
        # bias trick: set the 1x1 conv bias so every delta equals its channel
        # id; decoding zero-delta anchors then identifies the layout
        m = build_model()
        k = m.vision.rpn.k
        u = m.vision.features(image_to_input(random_image(rng), np.float64))
        m.vision.rpn.conv_w.data = np.zeros_like(m.vision.rpn.conv_w.data)
        m.vision.rpn.out_w.data = np.zeros_like(m.vision.rpn.out_w.data)
        bias = np.zeros(5 * k)
        bias[:k] = np.arange(k)  # score channel a carries value a
        m.vision.rpn.out_b.data = bias
        scores, _ = m.vision.rpn.forward(u)
        expect = np.tile(np.arange(k), 8 * 8)  # anchors fastest
        assert np.array_equal(scores.data, expect)

    def test_translation_covariance(self, rng):
        m = build_model()
        u0 = rng.normal(size=(16, 8, 8))
        u1 = np.roll(u0, shift=1, axis=2)  # translate one cell in x
        s0, d0 = m.vision.rpn.forward(ad.Tensor(u0))
        s1, d1 = m.vision.rpn.forward(ad.Tensor(u1))
        k = m.vision.rpn.k
        g0 = s0.data.reshape(8, 8, k)
        g1 = s1.data.reshape(8, 8, k)
        # interior columns (zero-pad boundary excluded)
        assert np.allclose(g1[:, 2:7], g0[:, 1:6], atol=1e-12)

    def test_gradient_through_both_convs(self, rng):
        m = build_model()
        u0 = rng.normal(size=(16, 4, 4))

        def f_np(arr):
            s, d = m.vision.rpn.forward(ad.Tensor(arr))
            return float((s.data ** 2).sum() + d.data.sum())

        t = ad.Tensor(u0, requires_grad=True)
        with ad.Tape() as tape:
            s, d = m.vision.rpn.forward(t)
            loss = ad.add(ad.sum_(ad.mul(s, s)), ad.sum_(d))
        g = tape.backward(loss)[t]
        assert max_rel_error(g, central_difference(f_np, u0)) < 1e-5


class TestLocalization:
    def test_train_batch_caps(self, rng):
        cfg = make_tiny_cfg()
        m = build_model(cfg)
        u = m.vision.features(image_to_input(random_image(rng), np.float64))
        gts = np.array([[16.0, 16.0, 12.0, 12.0], [8.0, 8.0, 6.0, 6.0]])
        rb = m.vision.localize_train(u, gts, rng, region_batch=32)
        assert rb.boxes.shape[0] <= 32
        assert rb.n_pos <= 16
        assert rb.provenance == "train-sampled"
        assert rb.features.shape[1:] == (16, 3, 3)

    def test_anchor_on_gt_is_positive(self, rng):
        cfg = make_tiny_cfg()
        m = build_model(cfg)
        u = m.vision.features(image_to_input(random_image(rng), np.float64))
        # ground truth placed exactly on an anchor: cell center (2+0.5)*4 = 10,
        # anchor shape 12x12 at ratio 1.0
        gts = np.array([[10.0, 10.0, 12.0, 12.0]])
        rb = m.vision.localize_train(u, gts, rng, region_batch=32)
        pos_boxes = rb.proposals_np[:rb.n_pos]
        ious = geo.iou_matrix(pos_boxes, gts)
        assert ious.max() > 0.8  # deltas ~0 at init: proposal ~ anchor ~ gt

    def test_test_mode_nms_keep(self, rng):
        m = build_model()
        u = m.vision.features(image_to_input(random_image(rng), np.float64))
        rb = m.vision.localize_test(u, keep=10, nms_iou=0.7)
        assert rb.boxes.shape[0] <= 10
        assert rb.provenance == "nms-selected"

    def test_test_mode_deterministic(self, rng):
        m = build_model()
        img = random_image(rng)
        out1 = m.describe(img, keep=8)
        out2 = m.describe(img, keep=8)
        assert len(out1) == len(out2)
        for (b1, t1, c1), (b2, t2, c2) in zip(out1, out2):
            assert np.array_equal(b1, b2) and t1 == t2 and c1 == c2

    def test_end_to_end_coordinate_gradients_nonzero(self, rng):
        # the core differentiability property: a loss on region features
        # reaches the proposal-delta head through the sampling grid
        m = build_model()
        gts = np.array([[16.0, 16.0, 12.0, 12.0]])
        with ad.Tape() as tape:
            u = m.vision.features(image_to_input(random_image(rng), np.float64))
            rb = m.vision.localize_train(u, gts, rng, region_batch=16)
            loss = ad.sum_(ad.mul(rb.features, rb.features))
        grads = tape.backward(loss)
        g_head = grads[m.vision.rpn.out_w]
        k = m.vision.rpn.k
        assert np.abs(g_head[k:]).max() > 0  # delta channels receive gradient
        g_backbone = grads[m.vision.backbone.weights[0]]
        assert np.abs(g_backbone).max() > 0

    def test_gt_box_mode(self, rng):
        m = build_model()
        u = m.vision.features(image_to_input(random_image(rng), np.float64))
        gts = np.array([[16.0, 16.0, 12.0, 12.0], [8.0, 24.0, 6.0, 6.0]])
        rb = m.vision.localize_gt(u, gts)
        assert rb.provenance == "gt-boxes"
        assert rb.n_pos == 2
        assert np.allclose(rb.boxes.data, gts)


class TestRecognition:
    def test_zero_weights_identity_refinement(self, rng):
        m = build_model()
        for t in m.vision.recog.named().values():
            t.data = np.zeros_like(t.data)
        feats = ad.Tensor(rng.normal(size=(4, 16, 3, 3)))
        code, score, delta = m.vision.recog.forward(feats, train=False)
        assert np.array_equal(code.data, np.zeros((4, 32)))
        assert np.array_equal(score.data, np.zeros(4))
        # zero deltas decode to the identity transform
        props = np.array([[10.0, 10, 8, 8]] * 4)
        assert np.allclose(geo.decode(props, delta.data), props)

    def test_code_dimension(self, rng):
        cfg = make_tiny_cfg()
        cfg.model.code_dim = 48
        m = build_model(cfg)
        feats = ad.Tensor(rng.normal(size=(2, 16, 3, 3)))
        code, _, _ = m.vision.recog.forward(feats, train=False)
        assert code.shape == (2, 48)

    def test_full_pipeline_gradient_reaches_backbone(self, rng):
        m = build_model()
        img = random_image(rng)
        gts = np.array([[16.0, 16.0, 12.0, 12.0]])
        with ad.Tape() as tape:
            u = m.vision.features(image_to_input(img, np.float64))
            rb = m.vision.localize_train(u, gts, rng, region_batch=16)
            code, score, delta = m.vision.recog.forward(rb.features, train=False)
            loss = ad.add(ad.sum_(ad.mul(delta, delta)), ad.sum_(ad.mul(code, code)))
        grads = tape.backward(loss)
        g = grads[m.vision.backbone.weights[0]]
        assert np.abs(g).max() > 0


class TestCheckpoint:
    def test_container_roundtrip(self, tmp_path):
        path = tmp_path / "test.rcpk"
        arrays = {"a.w": np.arange(6, dtype=np.float32).reshape(2, 3),
                  "b": np.array([1.5], dtype=np.float64)}
        write_checkpoint(path, {"config": {"x": 1}, "note": "hi"}, arrays)
        meta, loaded = read_checkpoint(path)
        assert meta["note"] == "hi"
        assert np.array_equal(loaded["a.w"], arrays["a.w"])
        assert loaded["a.w"].dtype == np.float32
        assert np.array_equal(loaded["b"], arrays["b"])

    def test_model_roundtrip_bitexact(self, tmp_path, rng):
        m = build_model()
        img = random_image(rng)
        before = m.describe(img, keep=5)
        path = tmp_path / "model.rcpk"
        m.save(path, extra_meta={"iteration": 3})
        m2, meta, _ = DenseCaptioner.load(path)
        assert meta["iteration"] == 3
        after = m2.describe(img, keep=5)
        for (b1, t1, c1), (b2, t2, c2) in zip(before, after):
            assert np.array_equal(b1, b2) and t1 == t2 and c1 == c2

    def test_save_is_deterministic_bytes(self, tmp_path):
        m = build_model()
        p1, p2 = tmp_path / "a.rcpk", tmp_path / "b.rcpk"
        m.save(p1)
        m.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_config_mismatch_rejected(self, tmp_path):
        m = build_model()
        path = tmp_path / "model.rcpk"
        m.save(path)
        other = make_tiny_cfg()
        other.model.code_dim = 99
        with pytest.raises(DataError):
            DenseCaptioner.load(path, expect_cfg=other)

    def test_not_a_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "junk.rcpk"
        path.write_bytes(b"definitely not a checkpoint")
        with pytest.raises(DataError):
            read_checkpoint(path)
