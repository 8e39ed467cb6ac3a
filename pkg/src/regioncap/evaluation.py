"""Measurement suite: exact-match METEOR core, reference merging, dense
captioning AP over the IoU x language threshold grid, localization-free
language scoring, caption-query retrieval, and open-world detection.

The language scorer is the METEOR core restricted to exact unigram matches
(no stemming/synonym/paraphrase resources): alignment maximizes matches and
then minimizes chunks, F = PR/(0.9P + 0.1R), penalty = 0.5*(chunks/m)^3,
score = F*(1 - penalty), maximized over references.  Absolute values are not
comparable to resource-backed METEOR; the thresholding machinery is.

AP matching is greedy in descending confidence: a prediction is a true
positive if some unmatched ground truth clears both thresholds (best IoU
wins, lower index on ties); each ground truth matches at most one
prediction.  AP uses all-points precision-recall interpolation, detections
pooled across images.  A language threshold of 0 accepts any score >= 0, so
that column is localization-only detection AP.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import geometry as geo
from .errors import ContractViolation, DataError
from .langmodel import Vocabulary

# ---------------------------------------------------------------------------
# METEOR-lite


def _min_chunks(cand: Sequence[str], ref: Sequence[str]) -> Tuple[int, int]:
    """(matches, minimal chunk count) over maximum exact-match alignments.

    A chunk is a maximal run of pairs contiguous and in order on both sides.
    Exhaustive search with a chunks-only-grow bound; candidate positions are
    scanned left to right and reference slots tried in ascending order, so
    the first optimum found is the leftmost alignment.
    """
    cand_counts: Dict[str, int] = {}
    ref_counts: Dict[str, int] = {}
    for t in cand:
        cand_counts[t] = cand_counts.get(t, 0) + 1
    for t in ref:
        ref_counts[t] = ref_counts.get(t, 0) + 1
    quota = {t: min(c, ref_counts.get(t, 0)) for t, c in cand_counts.items()}
    m = sum(quota.values())
    if m == 0:
        return 0, 0

    ref_positions: Dict[str, List[int]] = {}
    for j, t in enumerate(ref):
        ref_positions.setdefault(t, []).append(j)
    remaining_after = []  # candidate occurrences of cand[i] at positions > i
    seen: Dict[str, int] = {}
    for t in reversed(cand):
        remaining_after.append(seen.get(t, 0))
        seen[t] = seen.get(t, 0) + 1
    remaining_after.reverse()

    best = m + 1  # chunks can never exceed matches

    def dfs(i, quota, used, prev_i, prev_j, chunks):
        nonlocal best
        if chunks >= best:
            return
        if i == len(cand):
            if all(v == 0 for v in quota.values()):
                best = min(best, chunks)
            return
        t = cand[i]
        q = quota.get(t, 0)
        if q:
            for j in ref_positions[t]:
                if j in used:
                    continue
                contiguous = prev_i == i - 1 and prev_j == j - 1
                quota[t] = q - 1
                used.add(j)
                dfs(i + 1, quota, used, i, j, chunks + (0 if contiguous else 1))
                used.discard(j)
                quota[t] = q
        if remaining_after[i] >= q:
            # skipping position i still leaves enough occurrences for the quota
            dfs(i + 1, quota, used, prev_i, prev_j, chunks)

    dfs(0, dict(quota), set(), -10, -10, 0)
    return m, best


def meteor_lite(candidate: Sequence[str], references: Sequence[Sequence[str]],
                alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> float:
    """Exact-match METEOR score in [0, 1], maximized over references."""
    candidate = list(candidate)
    references = [list(r) for r in references]
    if not candidate:
        raise ContractViolation("meteor_lite requires a nonempty candidate")
    if not references:
        raise ContractViolation("meteor_lite requires at least one reference")
    best = 0.0
    for ref in references:
        if not ref:
            continue
        m, chunks = _min_chunks(candidate, ref)
        if m == 0:
            continue
        p = m / len(candidate)
        r = m / len(ref)
        f = p * r / (alpha * p + (1 - alpha) * r)
        penalty = gamma * (chunks / m) ** beta
        best = max(best, f * (1.0 - penalty))
    return best


# ---------------------------------------------------------------------------
# Ground-truth merging


@dataclass
class MergedGroundTruth:
    box: np.ndarray                  # center-form mean of the merged group
    references: List[List[str]]      # one or more reference token lists


def merge_references(boxes: np.ndarray, captions: Sequence[Sequence[str]],
                     iou_thresh: float = 0.7) -> List[MergedGroundTruth]:
    """Greedily merge heavily overlapping boxes into multi-reference records.

    Repeatedly select the box with the most partners at IoU >= threshold
    (ties to the lower original index), replace the group by its
    coordinate-wise mean carrying every member's caption, and remove it.
    The result partitions the input captions.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    if len(boxes) == 0:
        raise ContractViolation("merge_references requires at least one region")
    if len(boxes) != len(captions):
        raise ContractViolation(f"{len(boxes)} boxes vs {len(captions)} captions")
    ious = geo.iou_matrix(boxes, boxes)
    alive = list(range(len(boxes)))
    out: List[MergedGroundTruth] = []
    while alive:
        counts = [sum(1 for j in alive if j != i and ious[i, j] >= iou_thresh)
                  for i in alive]
        pick = alive[int(np.argmax(counts))]  # argmax ties -> lower index
        group = [j for j in alive if j == pick or ious[pick, j] >= iou_thresh]
        out.append(MergedGroundTruth(
            box=boxes[group].mean(axis=0),
            references=[list(captions[j]) for j in group]))
        alive = [j for j in alive if j not in group]
    return out


# ---------------------------------------------------------------------------
# Dense-captioning AP


@dataclass
class PredictedRegion:
    box: np.ndarray
    tokens: List[str]
    confidence: float


@dataclass
class EvalReport:
    iou_thresholds: Tuple[float, ...]
    lang_thresholds: Tuple[float, ...]
    ap: Dict[Tuple[float, float], float]
    mean_ap: float
    n_predictions: int
    n_gt: int
    language_only: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "iou_thresholds": list(self.iou_thresholds),
            "lang_thresholds": list(self.lang_thresholds),
            "ap_grid": [{"iou": ti, "lang": tl, "ap": self.ap[(ti, tl)]}
                        for ti in self.iou_thresholds for tl in self.lang_thresholds],
            "mean_ap": self.mean_ap,
            "language_only": self.language_only,
            "n_predictions": self.n_predictions,
            "n_gt": self.n_gt,
        }

    def table(self) -> str:
        head = "IoU\\lang | " + " ".join(f"{tl:>7.2f}" for tl in self.lang_thresholds)
        lines = [head, "-" * len(head)]
        for ti in self.iou_thresholds:
            row = " ".join(f"{self.ap[(ti, tl)]:7.4f}" for tl in self.lang_thresholds)
            lines.append(f"{ti:8.2f} | {row}")
        lines.append(f"mean AP = {self.mean_ap:.4f}  "
                     f"({self.n_predictions} predictions, {self.n_gt} ground truths)")
        if self.language_only is not None:
            lines.append(f"language-only score = {self.language_only:.4f}")
        return "\n".join(lines)


def _average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-points interpolated AP for confidence-ordered TP flags."""
    if n_gt == 0:
        raise ContractViolation("AP undefined with zero ground truths")
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(tp) + 1)
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, interp):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def dense_cap_ap(predictions: Sequence[Sequence[PredictedRegion]],
                 merged_gt: Sequence[Sequence[MergedGroundTruth]],
                 iou_thresholds: Sequence[float] = (0.3, 0.4, 0.5, 0.6, 0.7),
                 lang_thresholds: Sequence[float] = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25),
                 ) -> EvalReport:
    """AP per (IoU, language) threshold pair, detections pooled over images."""
    if len(predictions) != len(merged_gt):
        raise ContractViolation("predictions and ground truth must align per image")
    n_gt = sum(len(g) for g in merged_gt)
    if n_gt == 0:
        raise ContractViolation("dense_cap_ap requires at least one ground-truth region")

    # per image: confidence order, IoU and language-score matrices
    per_image = []
    pooled: List[Tuple[float, int, int]] = []  # (conf, image, rank-in-image)
    for ii, (preds, gts) in enumerate(zip(predictions, merged_gt)):
        order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
        preds = [preds[i] for i in order]
        if preds and gts:
            ious = geo.iou_matrix(np.stack([p.box for p in preds]),
                                  np.stack([g.box for g in gts]))
            lang = np.array([[meteor_lite(p.tokens, g.references) if p.tokens else 0.0
                              for g in gts] for p in preds])
        else:
            ious = np.zeros((len(preds), len(gts)))
            lang = np.zeros((len(preds), len(gts)))
        per_image.append((preds, gts, ious, lang))
        for rank, p in enumerate(preds):
            pooled.append((p.confidence, ii, rank))
    pooled.sort(key=lambda t: (-t[0], t[1], t[2]))

    ap: Dict[Tuple[float, float], float] = {}
    for ti in iou_thresholds:
        for tl in lang_thresholds:
            flags_per_image = []
            for preds, gts, ious, lang in per_image:
                matched = np.zeros(len(gts), dtype=bool)
                flags = np.zeros(len(preds))
                for r in range(len(preds)):
                    ok = (~matched) & (ious[r] >= ti) & (lang[r] >= tl)
                    if ok.any():
                        cand = np.flatnonzero(ok)
                        g = cand[np.argmax(ious[r][cand])]  # ties -> lower index
                        matched[g] = True
                        flags[r] = 1.0
                flags_per_image.append(flags)
            tp = np.array([flags_per_image[ii][rank] for _, ii, rank in pooled])
            ap[(float(ti), float(tl))] = _average_precision(tp, n_gt)

    mean_ap = float(np.mean(list(ap.values())))
    return EvalReport(iou_thresholds=tuple(float(t) for t in iou_thresholds),
                      lang_thresholds=tuple(float(t) for t in lang_thresholds),
                      ap=ap, mean_ap=mean_ap,
                      n_predictions=sum(len(p) for p in predictions), n_gt=n_gt)


def language_only_score(predictions: Sequence[Sequence[PredictedRegion]],
                        merged_gt: Sequence[Sequence[MergedGroundTruth]]) -> float:
    """Mean METEOR-lite of predictions against their image's reference bag."""
    n_pred = sum(len(p) for p in predictions)
    if n_pred == 0:
        raise ContractViolation("language_only_score requires at least one prediction")
    total = 0.0
    for preds, gts in zip(predictions, merged_gt):
        if not preds:
            continue
        bag = [ref for g in gts for ref in g.references]
        if not bag:
            raise ContractViolation("empty reference bag for an image with predictions")
        for p in preds:
            total += meteor_lite(p.tokens, bag) if p.tokens else 0.0
    return total / n_pred


# ---------------------------------------------------------------------------
# Retrieval and open-world detection


@dataclass
class QueryResult:
    source_index: int
    rank: int
    caption_ious: List[float]


@dataclass
class RetrievalReport:
    n_queries: int
    pool_size: int
    recall_at: Dict[int, float]
    median_rank: float
    iou_recall_at: Dict[float, float]
    median_iou: float
    median_iou_correct: Optional[float]
    per_query: List[QueryResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "pool_size": self.pool_size,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "median_rank": self.median_rank,
            "iou_recall_at": {str(k): v for k, v in self.iou_recall_at.items()},
            "median_iou": self.median_iou,
            "median_iou_correct": self.median_iou_correct,
            "per_query": [{"source": q.source_index, "rank": q.rank,
                           "caption_ious": q.caption_ious} for q in self.per_query],
        }


def _encode_query(vocab: Vocabulary, tokens: Sequence[str]) -> List[int]:
    idx = vocab.encode(tokens)
    if all(i == vocab.UNK for i in idx):
        raise DataError(f"caption {' '.join(tokens)!r} has no in-vocabulary tokens")
    return idx


def pool_proposals(model, dataset, records, top_p: int, nms_iou: float = 0.7):
    """Proposal boxes/codes for each pool image (cached model passes).

    The default 0.7 suppression keeps near-duplicate boxes around objects,
    which stabilizes the max-over-proposals caption scores.
    """
    pool = []
    for rec in records:
        boxes, conf, codes = model.proposal_codes(dataset.load_image(rec),
                                                  top_p=top_p, nms_iou=nms_iou)
        pool.append((boxes, conf, codes))
    return pool


def retrieval_eval(model, dataset, records, n_queries: int,
                   captions_per_query: int, top_p: int,
                   rng: np.random.Generator,
                   pool_cache=None, nms_iou: float = 0.7) -> RetrievalReport:
    """Rank pool images against caption-set queries; ground each caption.

    Queries sample ``captions_per_query`` distinct regions from one source
    image; images are scored by the mean over query captions of the best
    proposal log-probability, and groundings are the best-scoring proposals
    in the source image.
    """
    eligible = [i for i, r in enumerate(records) if len(r.regions) >= captions_per_query]
    if not records:
        raise DataError("retrieval pool is empty")
    if not eligible:
        raise DataError(f"no pool image has >= {captions_per_query} regions")
    if n_queries < 1:
        raise ContractViolation("n_queries must be >= 1")

    queries = []
    src_order = rng.permutation(eligible)
    for q in range(n_queries):
        src = int(src_order[q % len(eligible)])
        ridx = rng.choice(len(records[src].regions), size=captions_per_query,
                          replace=False)
        queries.append((src, [int(j) for j in ridx]))

    pool = pool_cache or pool_proposals(model, dataset, records, top_p, nms_iou)

    results: List[QueryResult] = []
    for src, ridx in queries:
        caps = [_encode_query(model.vocab, records[src].regions[j].tokens) for j in ridx]
        scores = np.empty(len(records))
        aligned_src = None
        for ii, (boxes, _conf, codes) in enumerate(pool):
            lp = model.captioner.logprob_matrix(codes, caps)  # (Q, P)
            scores[ii] = lp.max(axis=1).mean()
            if ii == src:
                aligned_src = lp.argmax(axis=1)
        order = np.lexsort((np.arange(len(records)), -scores))
        rank = int(np.flatnonzero(order == src)[0]) + 1
        src_boxes = pool[src][0]
        ious = [float(geo.iou(src_boxes[aligned_src[qi]], records[src].regions[j].box))
                for qi, j in enumerate(ridx)]
        results.append(QueryResult(source_index=src, rank=rank, caption_ious=ious))

    ranks = np.array([r.rank for r in results], dtype=np.float64)
    all_ious = np.array([v for r in results for v in r.caption_ious])
    correct = [r for r in results if r.rank == 1]
    correct_ious = np.array([v for r in correct for v in r.caption_ious])
    return RetrievalReport(
        n_queries=n_queries,
        pool_size=len(records),
        recall_at={k: float((ranks <= k).mean()) for k in (1, 5, 10)},
        median_rank=float(np.median(ranks)),
        iou_recall_at={t: float((all_ious > t).mean()) for t in (0.1, 0.3, 0.5)},
        median_iou=float(np.median(all_ious)),
        median_iou_correct=float(np.median(correct_ious)) if len(correct_ious) else None,
        per_query=results,
    )


def open_world_detect(model, dataset, records, query_tokens: Sequence[str],
                      top_n: int, top_p: int, pool_cache=None,
                      nms_iou: float = 0.7):
    """Rank every proposal in the pool by the query's length-normalized
    log-probability; returns [(record_index, box, score)] best first."""
    idx = _encode_query(model.vocab, query_tokens)
    pool = pool_cache or pool_proposals(model, dataset, records, top_p, nms_iou)
    entries = []
    for ii, (boxes, _conf, codes) in enumerate(pool):
        lp = model.captioner.logprob_matrix(codes, [idx], length_normalized=True)[0]
        for pi in range(len(boxes)):
            entries.append((float(lp[pi]), ii, pi, boxes[pi]))
    entries.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [(ii, box, score) for score, ii, pi, box in entries[:max(top_n, 0)]]


# ---------------------------------------------------------------------------
# Prediction / ground-truth files (JSONL, one image per line)


def write_predictions(path, entries: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps(e, sort_keys=True) + "\n")


def _parse_region(obj: dict, lineno: int, need_confidence: bool):
    try:
        x1, y1, x2, y2 = (float(v) for v in obj["box"])
        tokens = str(obj["caption"]).split()
        conf = float(obj["confidence"]) if need_confidence else 0.0
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"line {lineno}: malformed region record: {e}") from e
    if x2 <= x1 or y2 <= y1:
        raise DataError(f"line {lineno}: degenerate box {obj['box']}")
    box = np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1])
    return PredictedRegion(box=box, tokens=tokens, confidence=conf)


def read_prediction_file(path, need_confidence: bool = True):
    """-> (image keys, regions per image).  Schema errors carry line numbers."""
    keys, regions = [], []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"line {lineno}: not valid JSON: {e}") from e
        if "image" not in obj or "regions" not in obj:
            raise DataError(f"line {lineno}: record needs 'image' and 'regions'")
        keys.append(str(obj["image"]))
        regions.append([_parse_region(r, lineno, need_confidence)
                        for r in obj["regions"]])
    return keys, regions
