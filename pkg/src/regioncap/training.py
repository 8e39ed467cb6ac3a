"""Five-term joint loss, SGD+momentum / Adam schedule, single-image training.

Loss terms (weights configurable, defaults 0.1/0.1/0.1/0.1/1.0):
  1. proposal score:   binary logistic on the sampled minibatch
  2. proposal box:     smooth L1 on deltas vs encode(anchor -> gt), positives
  3. refined score:    binary logistic on the recognition confidences
  4. refined box:      smooth L1 on refinement vs encode(proposal -> gt)
  5. captioning:       teacher-forced cross entropy on positive regions

A term whose weight is exactly 0 is skipped entirely, which yields the two
degenerate modes: caption weight 0 trains a pure detector, and box/score
weights 0 with ``use_gt_boxes`` trains a ground-truth-box captioner.

Determinism: the per-iteration RNG is derived from (seed, iteration) and the
epoch shuffle from (seed, epoch), so a resumed run replays the exact stream
of a straight run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .config import RunConfig, TrainConfig
from .errors import ContractViolation, DataError, NumericError
from .model import DenseCaptioner, RegionBatch


@dataclass
class LossBreakdown:
    rpn_score: float
    rpn_box: float
    rec_score: float
    rec_box: float
    caption: float
    total: float

    def terms(self):
        return (self.rpn_score, self.rpn_box, self.rec_score, self.rec_box, self.caption)

    def as_row(self) -> str:
        return "\t".join(f"{v:.6f}" for v in (*self.terms(), self.total))


def _zero_scalar(dtype) -> ad.Tensor:
    return ad.Tensor(np.zeros((), dtype=dtype))


def compute_loss(model: DenseCaptioner, rb: RegionBatch, gt_boxes: np.ndarray,
                 gt_captions: Sequence[Sequence[int]], rng: Optional[np.random.Generator],
                 weights: Sequence[float], train: bool = True):
    """Assemble the weighted five-term loss from a localization batch.

    Returns (total loss Tensor, LossBreakdown).  With zero positives the box
    and caption terms are zero with zero gradient; score terms stay active.
    """
    if rb.minibatch is None:
        raise ContractViolation("compute_loss requires a sampled RegionBatch")
    w_rpn_s, w_rpn_b, w_rec_s, w_rec_b, w_cap = [float(w) for w in weights]
    mb = rb.minibatch
    n_pos = rb.n_pos
    n_tot = rb.boxes.shape[0]
    dtype = rb.features.dtype
    labels = np.zeros(n_tot, dtype=dtype)
    labels[:n_pos] = 1.0

    zero = _zero_scalar(dtype)
    from_gt_boxes = rb.provenance == "gt-boxes"

    # stage 1: proposal confidences and box regression
    rpn_score = ad.binary_logistic_loss(rb.scores, labels) if w_rpn_s and not from_gt_boxes else zero
    if w_rpn_b and n_pos and rb.deltas_pos is not None:
        t1 = geo.encode(rb.anchors_sel[:n_pos], gt_boxes[mb.matched_gt]).astype(dtype)
        rpn_box = geo.smooth_l1(rb.deltas_pos, t1)
    else:
        rpn_box = zero

    # stage 2: recognition on the extracted region features
    code, rscore, rdelta = model.vision.recog.forward(rb.features, train=train, rng=rng)
    rec_score = ad.binary_logistic_loss(rscore, labels) if w_rec_s and not from_gt_boxes else zero
    if w_rec_b and n_pos and not from_gt_boxes:
        t2 = geo.encode(rb.proposals_np[:n_pos], gt_boxes[mb.matched_gt]).astype(dtype)
        rec_box = geo.smooth_l1(ad.getitem(rdelta, (slice(0, n_pos),)), t2)
    else:
        rec_box = zero

    if w_cap and n_pos:
        codes_pos = ad.getitem(code, (slice(0, n_pos),))
        caps = [list(gt_captions[m]) for m in mb.matched_gt]
        caption = model.captioner.caption_loss(codes_pos, caps)
    else:
        caption = zero

    total = ad.add(
        ad.add(ad.add(ad.scale(rpn_score, w_rpn_s), ad.scale(rpn_box, w_rpn_b)),
               ad.add(ad.scale(rec_score, w_rec_s), ad.scale(rec_box, w_rec_b))),
        ad.scale(caption, w_cap))
    breakdown = LossBreakdown(
        rpn_score=rpn_score.item(), rpn_box=rpn_box.item(),
        rec_score=rec_score.item(), rec_box=rec_box.item(),
        caption=caption.item(), total=total.item())
    return total, breakdown


def forward_and_loss(model: DenseCaptioner, image: np.ndarray, gt_boxes: np.ndarray,
                     gt_captions: Sequence[Sequence[int]], rng: np.random.Generator,
                     tc: TrainConfig, fixed_minibatch=None):
    """One training forward pass from a raw image to the weighted loss."""
    u = model.vision.features(model._prep(image))
    if tc.use_gt_boxes:
        rb = model.vision.localize_gt(u, gt_boxes)
    else:
        rb = model.vision.localize_train(u, np.asarray(gt_boxes, dtype=np.float64), rng,
                                         tc.region_batch, hi=tc.sample_hi, lo=tc.sample_lo,
                                         fixed_minibatch=fixed_minibatch)
    total, breakdown = compute_loss(model, rb, np.asarray(gt_boxes, dtype=np.float64),
                                    gt_captions, rng, tc.loss_weights, train=True)
    return total, breakdown, rb


# ---------------------------------------------------------------------------
# Optimizers


class SGDMomentum:
    """v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, params: Dict[str, ad.Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            g = grads[k]
            if g.shape != p.data.shape:
                raise ContractViolation(f"gradient shape mismatch for {k}")
            self.v[k] = self.momentum * self.v[k] + g
            p.data -= (self.lr * self.v[k]).astype(p.data.dtype, copy=False)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {f"sgd.v.{k}": v for k, v in self.v.items()}

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        for k in self.v:
            key = f"sgd.v.{k}"
            if key in arrays:
                self.v[k] = arrays[key].astype(self.v[k].dtype).reshape(self.v[k].shape)


class Adam:
    """Bias-corrected first/second moment update."""

    def __init__(self, params: Dict[str, ad.Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            if g.shape != p.data.shape:
                raise ContractViolation(f"gradient shape mismatch for {k}")
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mh = self.m[k] / b1c
            vh = self.v[k] / b2c
            p.data -= (self.lr * mh / (np.sqrt(vh) + self.eps)).astype(p.data.dtype, copy=False)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.t"] = np.array([float(self.t)])
        return out

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        for k in self.m:
            if f"adam.m.{k}" in arrays:
                self.m[k] = arrays[f"adam.m.{k}"].astype(self.m[k].dtype).reshape(self.m[k].shape)
            if f"adam.v.{k}" in arrays:
                self.v[k] = arrays[f"adam.v.{k}"].astype(self.v[k].dtype).reshape(self.v[k].shape)
        if "adam.t" in arrays:
            self.t = int(arrays["adam.t"][0])


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        for k in grads:
            grads[k] = grads[k] * s
    return total


# ---------------------------------------------------------------------------
# Training loop


def _iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 7, iteration]))


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 1000003, epoch])).permutation(n)


def train_loop(model: DenseCaptioner, dataset, cfg: RunConfig, out_dir,
               start_iteration: int = 0,
               sgd: Optional[SGDMomentum] = None, adam: Optional[Adam] = None,
               progress=None) -> dict:
    """Run single-image iterations; emit checkpoints and an append-only log.

    ``dataset`` is a ``datasynth.DatasetBundle``; training draws from its
    train split.  Non-finite losses abort with a NumericError carrying the
    per-term dump.  Returns a summary dict.
    """
    tc = cfg.train
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [r for r in dataset.records if r.split == "train" and len(r.regions) > 0]
    if not records:
        raise DataError("training split is empty")

    groups = model.param_groups()
    frozen = {f"backbone.conv{i}.{s}" for i in range(tc.freeze_blocks) for s in ("w", "b")}
    backbone_params = {k: v for k, v in groups["backbone"].items() if k not in frozen}
    if sgd is None:
        sgd = SGDMomentum(backbone_params, lr=tc.sgd_lr, momentum=tc.momentum)
    if adam is None:
        adam = Adam(groups["other"], lr=tc.adam_lr, beta1=tc.beta1,
                    beta2=tc.beta2, eps=tc.eps)

    log_path = out_dir / "metrics.tsv"
    if start_iteration == 0 and log_path.exists():
        log_path.unlink()
    if not log_path.exists():
        log_path.write_text("iteration\trpn_score\trpn_box\trec_score\trec_box"
                            "\tcaption\ttotal\twall_time\n")

    n = len(records)
    t0 = time.perf_counter()
    first_breakdown = last_breakdown = None
    with open(log_path, "a") as log:
        for it in range(start_iteration + 1, tc.iterations + 1):
            epoch = (it - 1) // n
            order = _epoch_order(cfg.seed, epoch, n)
            rec = records[order[(it - 1) % n]]
            rng = _iteration_rng(cfg.seed, it)

            image = dataset.load_image(rec)
            gt_boxes = np.stack([r.box for r in rec.regions])
            gt_caps = [model.vocab.encode(r.tokens) for r in rec.regions]

            with ad.Tape() as tape:
                total, breakdown, _ = forward_and_loss(model, image, gt_boxes,
                                                       gt_caps, rng, tc)
            if not np.isfinite(breakdown.total):
                raise NumericError(
                    f"non-finite loss at iteration {it}: "
                    f"rpn_score={breakdown.rpn_score} rpn_box={breakdown.rpn_box} "
                    f"rec_score={breakdown.rec_score} rec_box={breakdown.rec_box} "
                    f"caption={breakdown.caption}")
            grads_obj = tape.backward(total)
            params = model.named_params()
            grads = {k: grads_obj[p] for k, p in params.items()}
            clip_gradients(grads, tc.clip_norm)

            if it > tc.finetune_start and backbone_params:
                sgd.step({k: grads[k] for k in backbone_params})
            adam.step({k: grads[k] for k in groups["other"]})

            if first_breakdown is None:
                first_breakdown = breakdown
            last_breakdown = breakdown
            wall = time.perf_counter() - t0
            log.write(f"{it}\t{breakdown.as_row()}\t{wall:.3f}\n")
            if progress and (it % tc.log_interval == 0 or it == tc.iterations):
                progress(it, breakdown)
            if tc.checkpoint_interval and it % tc.checkpoint_interval == 0 \
                    and it != tc.iterations:
                _save(model, out_dir / f"checkpoint_{it:06d}.rcpk", it, sgd, adam)

    final_path = out_dir / "checkpoint_final.rcpk"
    _save(model, final_path, tc.iterations, sgd, adam)
    return {
        "iterations": tc.iterations,
        "first_total": first_breakdown.total if first_breakdown else None,
        "final_total": last_breakdown.total if last_breakdown else None,
        "checkpoint": str(final_path),
        "log": str(log_path),
    }


def _save(model: DenseCaptioner, path, iteration: int,
          sgd: SGDMomentum, adam: Adam) -> None:
    opt = {}
    opt.update(sgd.state_arrays())
    opt.update(adam.state_arrays())
    model.save(path, extra_meta={"iteration": iteration}, opt_arrays=opt)


def resume_training(checkpoint_path, dataset, cfg: RunConfig, out_dir, progress=None) -> dict:
    """Continue a run from a checkpoint, preserving iteration numbering."""
    model, meta, opt_arrays = DenseCaptioner.load(checkpoint_path)
    model.cfg = cfg
    start = int(meta.get("iteration", 0))
    groups = model.param_groups()
    frozen = {f"backbone.conv{i}.{s}" for i in range(cfg.train.freeze_blocks)
              for s in ("w", "b")}
    backbone_params = {k: v for k, v in groups["backbone"].items() if k not in frozen}
    sgd = SGDMomentum(backbone_params, lr=cfg.train.sgd_lr, momentum=cfg.train.momentum)
    adam = Adam(groups["other"], lr=cfg.train.adam_lr, beta1=cfg.train.beta1,
                beta2=cfg.train.beta2, eps=cfg.train.eps)
    sgd.load_state(opt_arrays)
    adam.load_state(opt_arrays)
    return train_loop(model, dataset, cfg, out_dir, start_iteration=start,
                      sgd=sgd, adam=adam, progress=progress)
