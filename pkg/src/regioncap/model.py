"""Model assembly: backbone -> localization layer -> recognition network.

The backbone is a small configurable convnet honoring the contract that a
3 x W x H image maps to C x floor(W/s) x floor(H/s) features (odd extents are
cropped before each pooling stage, which reproduces the floor).  The
localization layer regresses boxes from translation-invariant anchors,
samples a training minibatch (or applies test-time NMS), and extracts
fixed-size region features by bilinear sampling, keeping the whole path on
the autodiff tape so box-coordinate gradients reach the proposal head.

Checkpoints are a custom little-endian binary container (see docs/formats.md)
holding a JSON config echo plus named parameter tensors; the format carries
no timestamps so identical runs produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import sampler
from .config import ModelConfig, RunConfig, config_from_dict, config_to_dict
from .errors import ContractViolation, DataError
from .langmodel import CaptionModel, Vocabulary


def _np_dtype(name: str):
    return np.float32 if name == "float32" else np.float64


def image_to_input(image: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 (H,W,3) RGB -> centered float (3,H,W) in [-0.5, 0.5]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractViolation(f"expected (H,W,3) image, got {image.shape}")
    return (image.astype(dtype) / 255.0 - 0.5).transpose(2, 0, 1)


class Backbone:
    """Stack of 3x3 conv + relu blocks with interleaved 2x2 max pooling."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.weights: List[ad.Tensor] = []
        self.biases: List[ad.Tensor] = []

    def init_params(self, rng: np.random.Generator, dtype) -> None:
        cin = 3
        for cout in self.cfg.backbone_channels:
            fan_in = cin * 9
            std = np.sqrt(2.0 / fan_in)  # relu-preserving scale; heads use 0.01
            w = rng.normal(0.0, std, size=(cout, cin, 3, 3)).astype(dtype)
            self.weights.append(ad.Tensor(w, requires_grad=True))
            self.biases.append(ad.Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))
            cin = cout

    def named(self) -> Dict[str, ad.Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"backbone.conv{i}.w"] = w
            out[f"backbone.conv{i}.b"] = b
        return out

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        s = self.cfg.stride
        if x.shape[1] < s or x.shape[2] < s:
            raise ContractViolation(
                f"image extents {x.shape[1:]} smaller than backbone stride {s}")
        for w, b, pool in zip(self.weights, self.biases, self.cfg.backbone_pools):
            x = ad.relu(ad.conv2d(x, w, b, stride=1, pad=1))
            if pool:
                _, h, wd = x.shape
                if h % 2 or wd % 2:  # crop odd extents so pooling floors
                    x = ad.getitem(x, (slice(None), slice(0, h - h % 2), slice(0, wd - wd % 2)))
                x = ad.maxpool2d(x, 2, 2)
        return x


class RPNHead:
    """3x3 conv + relu + 1x1 conv emitting one score and four deltas per anchor."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.k = len(cfg.anchor_scales) * len(cfg.anchor_ratios)
        self.conv_w = self.conv_b = self.out_w = self.out_b = None

    def init_params(self, rng: np.random.Generator, dtype) -> None:
        # interior conv is fan-in-scaled; the prediction head keeps the small
        # std so initial logits sit near zero (score loss ln 2, deltas ~0)
        c, mid, std = self.cfg.out_channels, self.cfg.rpn_channels, self.cfg.init_std
        mid_std = np.sqrt(2.0 / (c * 9))
        self.conv_w = ad.Tensor(rng.normal(0, mid_std, size=(mid, c, 3, 3)).astype(dtype),
                                requires_grad=True)
        self.conv_b = ad.Tensor(np.zeros(mid, dtype=dtype), requires_grad=True)
        self.out_w = ad.Tensor(rng.normal(0, std, size=(5 * self.k, mid, 1, 1)).astype(dtype),
                               requires_grad=True)
        self.out_b = ad.Tensor(np.zeros(5 * self.k, dtype=dtype), requires_grad=True)

    def named(self) -> Dict[str, ad.Tensor]:
        return {"rpn.conv.w": self.conv_w, "rpn.conv.b": self.conv_b,
                "rpn.out.w": self.out_w, "rpn.out.b": self.out_b}

    def forward(self, features: ad.Tensor) -> Tuple[ad.Tensor, ad.Tensor]:
        """Features (C,H',W') -> scores (A,) and deltas (A,4), anchor-ordered.

        The raw head is a (5k, H', W') map; channel blocks [0,k) are scores and
        [k,5k) are deltas.  Flattening is row-major over cells then anchor
        shape, matching ``geometry.generate_anchors``.
        """
        k = self.k
        hidden = ad.relu(ad.conv2d(features, self.conv_w, self.conv_b, stride=1, pad=1))
        raw = ad.conv2d(hidden, self.out_w, self.out_b, stride=1, pad=0)
        _, hp, wp = raw.shape
        score_map = ad.getitem(raw, (slice(0, k),))
        delta_map = ad.getitem(raw, (slice(k, 5 * k),))
        scores = ad.reshape(ad.permute(score_map, (1, 2, 0)), (hp * wp * k,))
        deltas = ad.reshape(
            ad.permute(ad.reshape(delta_map, (k, 4, hp, wp)), (2, 3, 0, 1)),
            (hp * wp * k, 4))
        return scores, deltas


class RecognitionNet:
    """Two FC+relu+dropout layers to a region code, plus a 5-way linear head."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.flat_dim = cfg.out_channels * cfg.roi_x * cfg.roi_y
        self.fc1_w = self.fc1_b = self.fc2_w = self.fc2_b = None
        self.head_w = self.head_b = None

    def init_params(self, rng: np.random.Generator, dtype) -> None:
        # fan-in scaling on the code path keeps region codes at unit scale at
        # toy widths; the 5-way head keeps the small std so the refinement
        # starts near the identity transform
        def he(shape):
            w = rng.normal(0, np.sqrt(2.0 / shape[0]), size=shape)
            return ad.Tensor(w.astype(dtype), requires_grad=True)

        def zeros(n):
            return ad.Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

        f, d = self.cfg.fc_dim, self.cfg.code_dim
        self.fc1_w, self.fc1_b = he((self.flat_dim, f)), zeros(f)
        self.fc2_w, self.fc2_b = he((f, d)), zeros(d)
        head = rng.normal(0, self.cfg.init_std, size=(d, 5))
        self.head_w, self.head_b = ad.Tensor(head.astype(dtype), requires_grad=True), zeros(5)

    def named(self) -> Dict[str, ad.Tensor]:
        return {"recog.fc1.w": self.fc1_w, "recog.fc1.b": self.fc1_b,
                "recog.fc2.w": self.fc2_w, "recog.fc2.b": self.fc2_b,
                "recog.head.w": self.head_w, "recog.head.b": self.head_b}

    def forward(self, features: ad.Tensor, train: bool,
                rng: Optional[np.random.Generator] = None):
        """(B,C,X,Y) -> code (B,D), refined score logits (B,), deltas (B,4)."""
        b = features.shape[0]
        p = self.cfg.dropout
        flat = ad.reshape(features, (b, self.flat_dim))
        h1 = ad.dropout(ad.relu(ad.linear(flat, self.fc1_w, self.fc1_b)), p, train, rng)
        code = ad.dropout(ad.relu(ad.linear(h1, self.fc2_w, self.fc2_b)), p, train, rng)
        head = ad.linear(code, self.head_w, self.head_b)
        score = ad.reshape(ad.getitem(head, (slice(None), slice(0, 1))), (b,))
        delta = ad.getitem(head, (slice(None), slice(1, 5)))
        return code, score, delta


@dataclass
class RegionBatch:
    """Localization-layer output: aligned coordinates, scores, and features.

    In train mode positives precede negatives and the sampling record is
    attached; in test mode the batch is NMS-selected in descending score.
    """

    boxes: ad.Tensor              # (B, 4) differentiable proposal coordinates
    scores: ad.Tensor             # (B,) confidence logits
    features: ad.Tensor           # (B, C, X, Y)
    provenance: str               # "train-sampled" | "nms-selected" | "gt-boxes"
    n_pos: int = 0
    minibatch: Optional[geo.SampledMinibatch] = None
    anchors_sel: Optional[np.ndarray] = None     # (B, 4) anchors of the batch
    proposals_np: Optional[np.ndarray] = None    # (B, 4) detached coordinates
    deltas_pos: Optional[ad.Tensor] = None       # (n_pos, 4) rpn deltas

    def __post_init__(self):
        b = self.boxes.shape[0]
        if self.scores.shape[0] != b or self.features.shape[0] != b:
            raise ContractViolation("RegionBatch tensors must share the leading extent")


class RegionVisionModel:
    """Vision side: backbone, anchor head, localization layer, recognition."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.rpn = RPNHead(cfg)
        self.recog = RecognitionNet(cfg)
        self._anchor_cache: Dict[Tuple[int, int], np.ndarray] = {}

    def init_params(self, rng: np.random.Generator) -> None:
        dtype = _np_dtype(self.cfg.dtype)
        self.backbone.init_params(rng, dtype)
        self.rpn.init_params(rng, dtype)
        self.recog.init_params(rng, dtype)

    def named_params(self) -> Dict[str, ad.Tensor]:
        out = {}
        out.update(self.backbone.named())
        out.update(self.rpn.named())
        out.update(self.recog.named())
        return out

    def features(self, image_chw: np.ndarray) -> ad.Tensor:
        return self.backbone.forward(ad.Tensor(np.asarray(image_chw)))

    def anchors_for(self, fh: int, fw: int) -> np.ndarray:
        key = (fh, fw)
        if key not in self._anchor_cache:
            shapes = geo.anchor_shapes(self.cfg.anchor_scales, self.cfg.anchor_ratios)
            grid = geo.AnchorGrid(stride=self.cfg.stride, width=fw, height=fh, shapes=shapes)
            self._anchor_cache[key] = geo.generate_anchors(grid)
        return self._anchor_cache[key]

    def propose(self, features: ad.Tensor):
        """Scores, deltas, and decoded proposals for every anchor."""
        _, fh, fw = features.shape
        anchors = self.anchors_for(fh, fw)
        scores, deltas = self.rpn.forward(features)
        proposals = geo.decode_op(anchors, deltas, max_log_scale=self.cfg.delta_clamp)
        return anchors, scores, deltas, proposals

    def localize_train(self, features: ad.Tensor, gt_boxes: np.ndarray,
                       rng: np.random.Generator, region_batch: int,
                       hi: float = 0.7, lo: float = 0.3,
                       fixed_minibatch: Optional[geo.SampledMinibatch] = None) -> RegionBatch:
        anchors, scores, deltas, proposals = self.propose(features)
        mb = fixed_minibatch
        if mb is None:
            mb = geo.sample_minibatch(proposals.data, gt_boxes, region_batch,
                                      hi=hi, lo=lo, rng=rng)
        sel = mb.all_indices()
        sel_boxes = ad.gather_rows(proposals, sel)
        v = sampler.extract_regions(features, sel_boxes, self.cfg.stride,
                                    self.cfg.roi_x, self.cfg.roi_y)
        return RegionBatch(
            boxes=sel_boxes,
            scores=ad.gather_rows(scores, sel),
            features=v,
            provenance="train-sampled",
            n_pos=len(mb.pos_indices),
            minibatch=mb,
            anchors_sel=anchors[sel],
            proposals_np=proposals.data[sel].copy(),
            deltas_pos=ad.gather_rows(deltas, mb.pos_indices) if len(mb.pos_indices) else None,
        )

    def localize_test(self, features: ad.Tensor, keep: int, nms_iou: float) -> RegionBatch:
        anchors, scores, deltas, proposals = self.propose(features)
        kept = geo.nms(proposals.data, scores.data, iou_threshold=nms_iou, keep=keep)
        sel_boxes = ad.gather_rows(proposals, kept)
        v = sampler.extract_regions(features, sel_boxes, self.cfg.stride,
                                    self.cfg.roi_x, self.cfg.roi_y)
        return RegionBatch(
            boxes=sel_boxes,
            scores=ad.gather_rows(scores, kept),
            features=v,
            provenance="nms-selected",
            anchors_sel=anchors[kept],
            proposals_np=proposals.data[kept].copy(),
        )

    def localize_gt(self, features: ad.Tensor, gt_boxes: np.ndarray) -> RegionBatch:
        """Degenerate mode: extract features at the ground-truth boxes."""
        gt = np.asarray(gt_boxes, dtype=_np_dtype(self.cfg.dtype))
        boxes = ad.Tensor(gt)
        v = sampler.extract_regions(features, boxes, self.cfg.stride,
                                    self.cfg.roi_x, self.cfg.roi_y)
        n = len(gt)
        mb = geo.SampledMinibatch(pos_indices=np.arange(n, dtype=np.intp),
                                  neg_indices=np.empty(0, dtype=np.intp),
                                  matched_gt=np.arange(n, dtype=np.intp))
        return RegionBatch(boxes=boxes, scores=ad.Tensor(np.zeros(n, dtype=gt.dtype)),
                           features=v, provenance="gt-boxes", n_pos=n, minibatch=mb,
                           anchors_sel=gt.copy(), proposals_np=gt.copy())


class DenseCaptioner:
    """Full system: vision model + caption model + vocabulary."""

    def __init__(self, cfg: RunConfig, vocab: Vocabulary):
        self.cfg = cfg
        self.vocab = vocab
        self.vision = RegionVisionModel(cfg.model)
        self.captioner = CaptionModel(vocab, cfg.model.code_dim,
                                      cfg.model.embed_dim, cfg.model.hidden_dim)

    @classmethod
    def build(cls, cfg: RunConfig, vocab: Vocabulary, rng: np.random.Generator) -> "DenseCaptioner":
        m = cls(cfg, vocab)
        m.vision.init_params(rng)
        m.captioner.init_params(rng, std=cfg.model.init_std, dtype=_np_dtype(cfg.model.dtype))
        return m

    # ------------------------------------------------------------------
    # Parameters

    def named_params(self) -> Dict[str, ad.Tensor]:
        out = self.vision.named_params()
        out.update(self.captioner.params.named())
        return out

    def param_groups(self) -> Dict[str, Dict[str, ad.Tensor]]:
        """Backbone weights train with SGD+momentum, everything else with Adam."""
        backbone = self.vision.backbone.named()
        other = {k: v for k, v in self.named_params().items() if k not in backbone}
        return {"backbone": backbone, "other": other}

    # ------------------------------------------------------------------
    # Inference

    def _prep(self, image: np.ndarray) -> np.ndarray:
        return image_to_input(image, dtype=_np_dtype(self.cfg.model.dtype))

    def describe(self, image: np.ndarray, keep: Optional[int] = None,
                 nms_iou: Optional[float] = None, max_len: Optional[int] = None):
        """Dense captioning of one image: refined boxes, captions, confidences.

        Returns a list of (box_center4, token_list, confidence) sorted by
        descending confidence.  Boxes are unclipped; output writers clip.
        """
        ec = self.cfg.eval
        keep = ec.test_keep if keep is None else keep
        nms_iou = ec.test_nms_iou if nms_iou is None else nms_iou
        max_len = ec.max_caption_len if max_len is None else max_len

        u = self.vision.features(self._prep(image))
        rb = self.vision.localize_test(u, keep=keep, nms_iou=nms_iou)
        code, score, delta = self.vision.recog.forward(rb.features, train=False)
        d = np.clip(delta.data, -self.cfg.model.delta_clamp, self.cfg.model.delta_clamp)
        final_boxes = geo.decode(rb.proposals_np, d)
        conf = 1.0 / (1.0 + np.exp(-score.data.astype(np.float64)))
        tokens = self.captioner.generate(code, max_len=max_len)
        order = np.lexsort((np.arange(len(conf)), -conf))
        return [(final_boxes[i], self.vocab.decode(tokens[i]), float(conf[i]))
                for i in order]

    def proposal_codes(self, image: np.ndarray, top_p: int,
                       nms_iou: Optional[float] = None):
        """Top proposals with recognition codes, for retrieval/detection.

        Returns (refined boxes (P,4), confidence (P,), codes Tensor (P,D)).
        """
        nms_iou = self.cfg.eval.test_nms_iou if nms_iou is None else nms_iou
        u = self.vision.features(self._prep(image))
        rb = self.vision.localize_test(u, keep=top_p, nms_iou=nms_iou)
        code, score, delta = self.vision.recog.forward(rb.features, train=False)
        d = np.clip(delta.data, -self.cfg.model.delta_clamp, self.cfg.model.delta_clamp)
        boxes = geo.decode(rb.proposals_np, d)
        conf = 1.0 / (1.0 + np.exp(-score.data.astype(np.float64)))
        return boxes, conf, code

    # ------------------------------------------------------------------
    # Checkpoints

    def save(self, path, extra_meta: Optional[dict] = None,
             opt_arrays: Optional[Dict[str, np.ndarray]] = None) -> None:
        arrays = {k: v.data for k, v in self.named_params().items()}
        if opt_arrays:
            arrays.update({f"opt.{k}": v for k, v in opt_arrays.items()})
        meta = {"config": config_to_dict(self.cfg),
                "vocab": self.vocab.words,
                "meta": extra_meta or {}}
        write_checkpoint(path, meta, arrays)

    @classmethod
    def load(cls, path, expect_cfg: Optional[RunConfig] = None):
        """Rebuild a system from a checkpoint; returns (model, meta, opt_arrays)."""
        meta, arrays = read_checkpoint(path)
        cfg = config_from_dict(meta["config"])
        if expect_cfg is not None and config_to_dict(expect_cfg.model) != config_to_dict(cfg.model):
            raise DataError("checkpoint model config does not match the requested config")
        vocab = Vocabulary(meta["vocab"])
        m = cls(cfg, vocab)
        m.vision.init_params(np.random.default_rng(0))
        m.captioner.init_params(np.random.default_rng(0), dtype=_np_dtype(cfg.model.dtype))
        params = m.named_params()
        opt_arrays = {}
        for name, arr in arrays.items():
            if name.startswith("opt."):
                opt_arrays[name[4:]] = arr
                continue
            if name not in params:
                raise DataError(f"checkpoint holds unknown parameter {name!r}")
            if params[name].data.shape != arr.shape:
                raise DataError(f"checkpoint parameter {name!r} has shape {arr.shape}, "
                                f"expected {params[name].data.shape}")
            params[name].data = arr.astype(params[name].data.dtype, copy=False)
        missing = set(params) - set(arrays)
        if missing:
            raise DataError(f"checkpoint missing parameters: {sorted(missing)}")
        return m, meta.get("meta", {}), opt_arrays


# ---------------------------------------------------------------------------
# Checkpoint container (documented in docs/formats.md)

_MAGIC = b"RCPK"
_VERSION = 1
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_checkpoint(path, meta: dict, arrays: Dict[str, np.ndarray]) -> None:
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            if arr.dtype not in _DTYPE_CODES:
                raise ContractViolation(f"checkpoint arrays must be float32/64, got {arr.dtype}")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            f.write(np.ascontiguousarray(le).tobytes())


def read_checkpoint(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:4] != _MAGIC:
        raise DataError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, 8)
    off = 12
    meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        dtype = _CODE_DTYPES[code]
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=off).reshape(shape)
        arrays[name] = arr.astype(dtype.newbyteorder("="))
        off += n * dtype.itemsize
    return meta, arrays
