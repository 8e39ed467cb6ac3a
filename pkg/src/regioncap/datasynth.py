"""Synthetic shapes-and-captions dataset: generation, preprocessing, file io.

Scenes hold 2..8 non-overlapping colored shapes on a noisy gray background.
Each object's ground-truth box is the tight bounding box of its own raster
mask (pixel-area corner convention), so a raster scan of the mask recovers
the annotation exactly.  Captions come from an invertible grammar

    [size] color shape ["left" "of" color2 shape2 | "above" color2 shape2]

and are truthful by construction; ``caption_matches_scene`` re-checks any
caption against a scene spec.

Files: images as binary PPM (P6), annotations as JSONL (one image per line),
vocabulary as one token per line, manifest as JSON.  Layouts are documented
bit-exactly in docs/formats.md.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import DataConfig, RunConfig, config_to_dict
from .errors import ContractViolation, DataError
from .langmodel import Vocabulary

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 45, 45),
    "green": (45, 175, 70),
    "blue": (60, 95, 220),
    "yellow": (235, 215, 60),
}
SIZE_WORDS = ("small", "large")


@dataclass
class ObjectSpec:
    shape: str
    color: str
    size_class: str
    cx: float
    cy: float
    extent: float  # nominal diameter/side in pixels


@dataclass
class SceneSpec:
    width: int
    height: int
    objects: List[ObjectSpec]
    background: int
    noise_std: float
    noise_seed: int


@dataclass
class Region:
    box: np.ndarray          # center-form (xc, yc, w, h)
    tokens: List[str]

    @property
    def caption(self) -> str:
        return " ".join(self.tokens)


# ---------------------------------------------------------------------------
# Rasterization


def object_mask(obj: ObjectSpec, width: int, height: int) -> np.ndarray:
    """Boolean mask of the object alone, by pixel-center inclusion tests."""
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    if obj.shape == "circle":
        r = obj.extent / 2.0
        return (px - obj.cx) ** 2 + (py - obj.cy) ** 2 <= r * r
    if obj.shape == "square":
        h = obj.extent / 2.0
        return (np.abs(px - obj.cx) <= h) & (np.abs(py - obj.cy) <= h)
    if obj.shape == "triangle":
        # upward triangle: apex on top, base at the bottom of the extent box
        half = obj.extent / 2.0
        ax, ay = obj.cx, obj.cy - half
        bx, by = obj.cx - half, obj.cy + half
        cx2, cy2 = obj.cx + half, obj.cy + half

        def side(x1, y1, x2, y2):
            return (px - x1) * (y2 - y1) - (py - y1) * (x2 - x1)

        d1 = side(ax, ay, bx, by)
        d2 = side(bx, by, cx2, cy2)
        d3 = side(cx2, cy2, ax, ay)
        neg = (d1 <= 0) & (d2 <= 0) & (d3 <= 0)
        pos = (d1 >= 0) & (d2 >= 0) & (d3 >= 0)
        return neg | pos
    raise ContractViolation(f"unknown shape {obj.shape!r}")


def mask_to_box(mask: np.ndarray) -> Optional[np.ndarray]:
    """Tight center-form box of a mask; pixel-area corners. None if empty."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    x1, x2 = xs.min(), xs.max() + 1
    y1, y2 = ys.min(), ys.max() + 1
    return np.array([(x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1], dtype=np.float64)


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Deterministic uint8 (H,W,3) render of a scene spec."""
    img = np.full((spec.height, spec.width, 3), spec.background, dtype=np.float64)
    for obj in spec.objects:
        mask = object_mask(obj, spec.width, spec.height)
        img[mask] = COLORS[obj.color]
    if spec.noise_std > 0:
        noise_rng = np.random.default_rng(spec.noise_seed)
        img += noise_rng.normal(0.0, spec.noise_std, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Scene + caption sampling


def _corners(box: np.ndarray) -> Tuple[float, float, float, float]:
    return (box[0] - box[2] / 2, box[1] - box[3] / 2,
            box[0] + box[2] / 2, box[1] + box[3] / 2)


def _boxes_clear(a: np.ndarray, b: np.ndarray, margin: float = 2.0) -> bool:
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    return ax2 + margin <= bx1 or bx2 + margin <= ax1 \
        or ay2 + margin <= by1 or by2 + margin <= ay1


def generate_scene(rng: np.random.Generator, cfg: DataConfig):
    """Sample a scene and truthful captions: (spec, image, regions)."""
    size = cfg.image_size
    for _restart in range(40):
        n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        objects: List[ObjectSpec] = []
        boxes: List[np.ndarray] = []
        for _ in range(n_objects):
            placed = False
            for _try in range(80):
                size_class = "small" if rng.random() < 0.6 else "large"
                if size_class == "small":
                    extent = rng.uniform(0.12, 0.19) * size
                else:
                    extent = rng.uniform(0.25, 0.36) * size
                half = extent / 2.0
                cx = rng.uniform(half + 1.5, size - half - 1.5)
                cy = rng.uniform(half + 1.5, size - half - 1.5)
                obj = ObjectSpec(shape=SHAPES[rng.integers(len(SHAPES))],
                                 color=list(COLORS)[rng.integers(len(COLORS))],
                                 size_class=size_class, cx=cx, cy=cy, extent=extent)
                box = mask_to_box(object_mask(obj, size, size))
                if box is None:
                    continue
                if all(_boxes_clear(box, other) for other in boxes):
                    objects.append(obj)
                    boxes.append(box)
                    placed = True
                    break
            if not placed:
                break
        if len(objects) >= cfg.min_objects:
            break
    else:
        raise DataError("could not place a valid scene; relax the data config")

    spec = SceneSpec(width=size, height=size, objects=objects,
                     background=int(rng.integers(95, 165)),
                     noise_std=cfg.noise_std,
                     noise_seed=int(rng.integers(0, 2 ** 31)))
    image = render_scene(spec)

    regions = []
    for i, (obj, box) in enumerate(zip(objects, boxes)):
        tokens = []
        if rng.random() < cfg.size_word_prob:
            tokens.append(obj.size_class)
        tokens += [obj.color, obj.shape]
        refs = _relation_candidates(i, objects, boxes)
        if refs and rng.random() < cfg.relation_prob:
            rel, ref = refs[rng.integers(len(refs))]
            if rel == "left-of":
                tokens += ["left", "of", ref.color, ref.shape]
            else:
                tokens += ["above", ref.color, ref.shape]
        regions.append(Region(box=box, tokens=tokens))
    return spec, image, regions


def _relation_candidates(i: int, objects, boxes):
    out = []
    x1, y1, x2, y2 = _corners(boxes[i])
    for j, (obj, box) in enumerate(zip(objects, boxes)):
        if j == i:
            continue
        ox1, oy1, ox2, oy2 = _corners(box)
        if x2 < ox1:
            out.append(("left-of", obj))
        if y2 < oy1:
            out.append(("above", obj))
    return out


def caption_matches_scene(tokens: Sequence[str], spec: SceneSpec) -> bool:
    """Parse a grammar caption and verify it holds in the scene."""
    toks = list(tokens)
    size_class = None
    if toks and toks[0] in SIZE_WORDS:
        size_class = toks.pop(0)
    if len(toks) < 2 or toks[0] not in COLORS or toks[1] not in SHAPES:
        return False
    color, shape = toks[0], toks[1]
    rest = toks[2:]
    relation = ref_color = ref_shape = None
    if rest:
        if rest[:2] == ["left", "of"] and len(rest) == 4:
            relation, ref_color, ref_shape = "left-of", rest[2], rest[3]
        elif rest[0] == "above" and len(rest) == 3:
            relation, ref_color, ref_shape = "above", rest[1], rest[2]
        else:
            return False
        if ref_color not in COLORS or ref_shape not in SHAPES:
            return False

    boxes = [mask_to_box(object_mask(o, spec.width, spec.height)) for o in spec.objects]
    for obj, box in zip(spec.objects, boxes):
        if obj.color != color or obj.shape != shape:
            continue
        if size_class is not None and obj.size_class != size_class:
            continue
        if relation is None:
            return True
        x1, y1, x2, y2 = _corners(box)
        for other, obox in zip(spec.objects, boxes):
            if other is obj or other.color != ref_color or other.shape != ref_shape:
                continue
            ox1, oy1, ox2, oy2 = _corners(obox)
            if relation == "left-of" and x2 < ox1:
                return True
            if relation == "above" and y2 < oy1:
                return True
    return False


# ---------------------------------------------------------------------------
# Preprocessing


def build_vocabulary(token_lists: Sequence[Sequence[str]], min_count: int) -> Vocabulary:
    """Words below min_count collapse to UNK; order: count desc, token asc."""
    if min_count < 1:
        raise ContractViolation("min_count must be >= 1")
    counts: Dict[str, int] = {}
    total = 0
    for toks in token_lists:
        for t in toks:
            counts[t] = counts.get(t, 0) + 1
            total += 1
    if total == 0:
        raise DataError("empty caption corpus")
    words = [w for w, c in counts.items() if c >= min_count]
    words.sort(key=lambda w: (-counts[w], w))
    return Vocabulary(words)


def filter_annotations(records: List[dict], max_tokens: int = 10,
                       min_regions: int = 1, max_regions: int = 10 ** 9):
    """Drop over-long captions, then images with out-of-range region counts.

    Records are annotation dicts (see docs/formats.md).  Returns the kept
    records and a drop-statistics dict; idempotent.
    """
    kept = []
    dropped_captions = 0
    dropped_images = 0
    for rec in records:
        regions = [r for r in rec["regions"]
                   if len(r["caption"].split()) <= max_tokens]
        dropped_captions += len(rec["regions"]) - len(regions)
        if min_regions <= len(regions) <= max_regions:
            kept.append({**rec, "regions": regions})
        else:
            dropped_images += 1
    if not kept:
        raise DataError("all images were filtered out")
    stats = {"dropped_captions": dropped_captions, "dropped_images": dropped_images,
             "kept_images": len(kept)}
    return kept, stats


# ---------------------------------------------------------------------------
# PPM io


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ContractViolation("write_ppm expects a uint8 (H,W,3) array")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    if not raw.startswith(b"P6"):
        raise DataError(f"{path}: not a binary PPM (P6) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(x) for x in fields)
    except ValueError as e:
        raise DataError(f"{path}: malformed PPM header") from e
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    data = raw[pos:pos + w * h * 3]
    if len(data) != w * h * 3:
        raise DataError(f"{path}: truncated PPM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# Dataset directory


@dataclass
class ImageRecord:
    image_id: int
    path: str     # relative to the dataset root
    split: str
    width: int
    height: int
    regions: List[Region]


@dataclass
class DatasetBundle:
    root: Path
    records: List[ImageRecord]
    vocab: Vocabulary
    manifest: dict = field(default_factory=dict)

    def split(self, name: str) -> List[ImageRecord]:
        return [r for r in self.records if r.split == name]

    def load_image(self, record: ImageRecord) -> np.ndarray:
        return read_ppm(self.root / record.path)


def _region_to_json(region: Region) -> dict:
    x1, y1, x2, y2 = _corners(region.box)
    return {"box": [round(float(v), 4) for v in (x1, y1, x2, y2)],
            "caption": region.caption}


def region_from_json(obj: dict) -> Region:
    x1, y1, x2, y2 = (float(v) for v in obj["box"])
    box = np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1])
    return Region(box=box, tokens=obj["caption"].split())


def write_dataset(out_dir, cfg: RunConfig, n_images: int) -> dict:
    """Generate and write a full dataset directory; returns the manifest."""
    if n_images < 1:
        raise ContractViolation("n_images must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    dc = cfg.data

    raw_records = []
    for i in range(n_images):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11, i]))
        spec, image, regions = generate_scene(rng, dc)
        rel = f"images/{i:06d}.ppm"
        write_ppm(out / rel, image)
        raw_records.append({
            "id": i, "image": rel, "width": spec.width, "height": spec.height,
            "regions": [_region_to_json(r) for r in regions],
        })

    kept, drop_stats = filter_annotations(
        raw_records, max_tokens=dc.max_caption_tokens,
        min_regions=dc.min_regions, max_regions=dc.max_regions)

    split_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 13]))
    order = split_rng.permutation(len(kept))
    n_train = int(round(dc.train_frac * len(kept)))
    n_val = int(round(dc.val_frac * len(kept)))
    split_of = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            split_of[idx] = "train"
        elif rank < n_train + n_val:
            split_of[idx] = "val"
        else:
            split_of[idx] = "test"
    for idx, rec in enumerate(kept):
        rec["split"] = split_of[idx]

    train_tokens = [r["caption"].split() for rec in kept if rec["split"] == "train"
                    for r in rec["regions"]]
    vocab = build_vocabulary(train_tokens, dc.vocab_min_count)
    vocab.save(out / "vocab.txt")

    with open(out / "annotations.jsonl", "w", encoding="utf-8") as f:
        for rec in kept:
            f.write(json.dumps(rec, sort_keys=True) + "\n")

    manifest = {
        "n_images": len(kept),
        "splits": {s: sum(1 for r in kept if r["split"] == s)
                   for s in ("train", "val", "test")},
        "n_regions": sum(len(r["regions"]) for r in kept),
        "vocabulary": {"size": len(vocab), "min_count": dc.vocab_min_count},
        "drops": drop_stats,
        "config": config_to_dict(cfg),
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def read_dataset(root) -> DatasetBundle:
    root = Path(root)
    ann = root / "annotations.jsonl"
    if not ann.exists():
        raise DataError(f"{root} is not a dataset directory (missing annotations.jsonl)")
    records = []
    for lineno, line in enumerate(ann.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            records.append(ImageRecord(
                image_id=int(obj["id"]), path=obj["image"], split=obj["split"],
                width=int(obj["width"]), height=int(obj["height"]),
                regions=[region_from_json(r) for r in obj["regions"]]))
        except (KeyError, ValueError, TypeError) as e:
            raise DataError(f"{ann}:{lineno}: malformed annotation record: {e}") from e
    vocab = Vocabulary.load(root / "vocab.txt")
    manifest = {}
    mpath = root / "manifest.json"
    if mpath.exists():
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    return DatasetBundle(root=root, records=records, vocab=vocab, manifest=manifest)
