"""Synthetic referring-expression scenes.

Each scene is a small RGB image containing K disjoint colored shapes, one of
which is singled out by a (color, shape, size) attribute triple.  The triple
is the referring condition: it matches exactly one object, and every scene
forces at least one distractor to share an attribute with the referred object
so selection always requires actual discrimination.

All randomness flows from a single 64-bit dataset seed through per-scene
Philox streams keyed by (seed, scene index), so any scene can be regenerated
in isolation and full datasets are bit-reproducible.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
SHAPES = ("rectangle", "circle", "triangle")
SIZES = ("small", "large")
QUADRANTS = ("nw", "ne", "sw", "se")

PALETTE = np.array([
    [0.85, 0.15, 0.15],   # red
    [0.15, 0.80, 0.20],   # green
    [0.20, 0.30, 0.85],   # blue
    [0.90, 0.85, 0.20],   # yellow
    [0.85, 0.20, 0.80],   # magenta
    [0.20, 0.80, 0.85],   # cyan
])

# global condition-token layout: [6 colors][3 shapes][2 sizes]
VOCAB_SIZE = len(COLORS) + len(SHAPES) + len(SIZES)
_SHAPE_BASE = len(COLORS)
_SIZE_BASE = len(COLORS) + len(SHAPES)

_BG_LEVEL = 0.12
_NOISE_STD = 0.02
_MAX_ATTEMPTS = 1000


class GenerationError(RuntimeError):
    """Rejection sampling exhausted its attempt budget."""


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 48
    min_objects: int = 2
    max_objects: int = 5
    small_extent: tuple[int, int] = (8, 11)
    large_extent: tuple[int, int] = (14, 18)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["small_extent"] = list(d["small_extent"])
        d["large_extent"] = list(d["large_extent"])
        return d

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        return SceneSpec(
            image_size=int(d["image_size"]),
            min_objects=int(d["min_objects"]),
            max_objects=int(d["max_objects"]),
            small_extent=tuple(d["small_extent"]),
            large_extent=tuple(d["large_extent"]),
        )


@dataclass
class ObjectAttrs:
    color: int
    shape: int
    size: int
    quadrant: int

    def triple(self) -> tuple[int, int, int]:
        return (self.color, self.shape, self.size)


@dataclass
class SceneSample:
    index: int
    image: np.ndarray            # (3, H, W) float32 in [0, 1]
    masks: np.ndarray            # (K, H, W) float32 binary, pairwise disjoint
    attrs: list[ObjectAttrs]
    referred: int                # index into masks/attrs
    condition: list[int]         # T=3 vocabulary token ids

    @property
    def num_objects(self) -> int:
        return self.masks.shape[0]


def condition_tokens(attrs: ObjectAttrs) -> list[int]:
    """Vocabulary ids for the (color, shape, size) triple, in that order."""
    return [attrs.color, _SHAPE_BASE + attrs.shape, _SIZE_BASE + attrs.size]


def scene_rng(seed: int, index: int) -> np.random.Generator:
    key = np.array([np.uint64(seed), np.uint64(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# rasterization


def _raster(shape: int, extent: int, cy: int, cx: int, size_hw: int) -> np.ndarray:
    """Binary mask of one shape whose bounding box is extent x extent at
    top-left (cy - extent//2, cx - extent//2)."""
    H = W = size_hw
    top, left = cy - extent // 2, cx - extent // 2
    m = np.zeros((H, W), dtype=bool)
    if shape == 0:  # rectangle
        m[top : top + extent, left : left + extent] = True
    elif shape == 1:  # circle
        r = extent / 2.0
        yy, xx = np.mgrid[0:H, 0:W]
        m = (yy - (top + r - 0.5)) ** 2 + (xx - (left + r - 0.5)) ** 2 <= r * r
    elif shape == 2:  # isoceles triangle, apex up
        for i in range(extent):
            hw = 0.5 + (extent / 2.0 - 0.5) * (i / max(extent - 1, 1))
            c0 = int(np.ceil(left + extent / 2.0 - 0.5 - hw))
            c1 = int(np.floor(left + extent / 2.0 - 0.5 + hw))
            m[top + i, c0 : c1 + 1] = True
    else:
        raise ValueError(f"unknown shape id {shape}")
    return m


def _quadrant_box(q: int, H: int) -> tuple[int, int, int, int]:
    half = H // 2
    r0, c0 = (0 if q in (0, 1) else half), (0 if q in (0, 2) else half)
    return r0, r0 + half, c0, c0 + half


def _dilate(m: np.ndarray) -> np.ndarray:
    from .tensor import pool3
    return pool3("max", m.astype(np.float64)) > 0.5


# ---------------------------------------------------------------------------
# attribute sampling


def _sample_attrs(rng: np.random.Generator, k: int) -> tuple[list[ObjectAttrs], int]:
    """Draw K attribute tuples: a referred object, one forced partial-match
    distractor, and K-2 free distractors, none duplicating the referred
    (color, shape, size) triple.  Quadrants are dealt round-robin from a
    shuffled deck so placement rarely has to fight for space."""
    ref = ObjectAttrs(
        color=int(rng.integers(len(COLORS))),
        shape=int(rng.integers(len(SHAPES))),
        size=int(rng.integers(len(SIZES))),
        quadrant=0,  # assigned below
    )
    objs = [ref]

    # forced distractor: shares a random nonempty proper subset of the triple
    while True:
        share = [bool(rng.integers(2)) for _ in range(3)]
        if any(share) and not all(share):
            break
    pools = (len(COLORS), len(SHAPES), len(SIZES))
    vals = []
    for j, (shared, pool, ref_v) in enumerate(zip(share, pools, ref.triple())):
        if shared:
            vals.append(ref_v)
        else:
            v = int(rng.integers(pool - 1))
            vals.append(v if v < ref_v else v + 1)  # uniform over the others
    objs.append(ObjectAttrs(color=vals[0], shape=vals[1], size=vals[2], quadrant=0))

    for _ in range(k - 2):
        while True:
            cand = ObjectAttrs(
                color=int(rng.integers(len(COLORS))),
                shape=int(rng.integers(len(SHAPES))),
                size=int(rng.integers(len(SIZES))),
                quadrant=0,
            )
            if cand.triple() != ref.triple():
                break
        objs.append(cand)

    # quadrants: shuffled deck, round-robin for k > 4
    deck = list(rng.permutation(len(QUADRANTS)))
    for i, o in enumerate(objs):
        o.quadrant = int(deck[i % len(deck)])

    # shuffle object order; track where the referred lands
    order = list(rng.permutation(k))
    shuffled = [objs[i] for i in order]
    referred = order.index(0)
    return shuffled, referred


# ---------------------------------------------------------------------------
# scene assembly


def generate_scene(spec: SceneSpec, seed: int, index: int) -> SceneSample:
    rng = scene_rng(seed, index)
    H = spec.image_size
    k = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    attrs, referred = _sample_attrs(rng, k)

    masks = None
    for _attempt in range(_MAX_ATTEMPTS):
        placed: list[np.ndarray] = []
        blocked = np.zeros((H, H), dtype=bool)
        ok = True
        for o in attrs:
            lo, hi = spec.small_extent if o.size == 0 else spec.large_extent
            extent = int(rng.integers(lo, hi + 1))
            r0, r1, c0, c1 = _quadrant_box(o.quadrant, H)
            # center inside the quadrant, bounding box inside the image with margin 1
            cy_lo = max(r0, extent // 2 + 1)
            cy_hi = min(r1 - 1, H - 1 - (extent - extent // 2))
            cx_lo = max(c0, extent // 2 + 1)
            cx_hi = min(c1 - 1, H - 1 - (extent - extent // 2))
            if cy_lo > cy_hi or cx_lo > cx_hi:
                ok = False
                break
            placed_this = None
            for _try in range(50):
                cy = int(rng.integers(cy_lo, cy_hi + 1))
                cx = int(rng.integers(cx_lo, cx_hi + 1))
                m = _raster(o.shape, extent, cy, cx, H)
                if not np.any(m & blocked):
                    placed_this = m
                    break
            if placed_this is None:
                ok = False
                break
            placed.append(placed_this)
            blocked |= _dilate(placed_this)  # enforce a 1-pixel gap between objects
        if ok:
            masks = np.stack(placed)
            break
    if masks is None:
        raise GenerationError(f"could not place {k} objects for scene {index} (seed {seed})")

    img = np.full((3, H, H), _BG_LEVEL) + rng.normal(0.0, _NOISE_STD, size=(3, H, H))
    for m, o in zip(masks, attrs):
        fill = PALETTE[o.color][:, None] + rng.normal(0.0, _NOISE_STD, size=(3, int(m.sum())))
        img[:, m] = fill
    img = np.clip(img, 0.0, 1.0)

    sample = SceneSample(
        index=index,
        image=img.astype(np.float32),
        masks=masks.astype(np.float32),
        attrs=attrs,
        referred=referred,
        condition=condition_tokens(attrs[referred]),
    )
    _validate(sample)
    return sample


def _validate(s: SceneSample) -> None:
    overlap = s.masks.sum(axis=0)
    if overlap.max() > 1.0:
        raise GenerationError(f"scene {s.index}: masks overlap")
    areas = s.masks.sum(axis=(1, 2))
    if areas.min() < 9:
        raise GenerationError(f"scene {s.index}: mask smaller than 9 px")
    matches = [i for i, o in enumerate(s.attrs) if o.triple() == s.attrs[s.referred].triple()]
    if matches != [s.referred]:
        raise GenerationError(f"scene {s.index}: condition triple is not unique")


def generate_dataset(spec: SceneSpec, seed: int, count: int) -> list[SceneSample]:
    return [generate_scene(spec, seed, i) for i in range(count)]


# ---------------------------------------------------------------------------
# ground-truth downsampling (to the decoder's mask resolution)


def downsample_masks(masks: np.ndarray, factor: int) -> np.ndarray:
    """Area-majority downsample of disjoint binary masks.

    Each factor x factor block votes among background and the K object
    labels; ties go to the earliest label in [background, 0..K-1] order, so
    background wins a split block.  Output masks stay pairwise disjoint.
    """
    K, H, W = masks.shape
    if H % factor or W % factor:
        raise ValueError(f"mask size {H}x{W} not divisible by factor {factor}")
    Hd, Wd = H // factor, W // factor
    counts = np.empty((K + 1, Hd, Wd))
    obj = masks.reshape(K, Hd, factor, Wd, factor).sum(axis=(2, 4))
    counts[1:] = obj
    counts[0] = factor * factor - obj.sum(axis=0)
    winner = np.argmax(counts, axis=0)  # first max wins -> background favored on ties
    out = np.zeros((K, Hd, Wd), dtype=np.float64)
    for k in range(K):
        out[k] = winner == k + 1
    return out


# ---------------------------------------------------------------------------
# dataset on disk: dataset.json + manifest.jsonl + per-sample FSTN files


def write_dataset(path, samples: list[SceneSample], spec: SceneSpec, seed: int) -> None:
    from . import fstn
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    head = {"spec": spec.to_dict(), "seed": int(seed), "count": len(samples)}
    (root / "dataset.json").write_text(json.dumps(head, sort_keys=True, indent=1) + "\n")
    lines = []
    for s in samples:
        stem = f"sample_{s.index:05d}"
        fstn.write(root / f"{stem}.image.fstn", s.image)
        fstn.write(root / f"{stem}.masks.fstn", s.masks)
        lines.append(json.dumps({
            "index": s.index,
            "image": f"{stem}.image.fstn",
            "masks": f"{stem}.masks.fstn",
            "attrs": [[o.color, o.shape, o.size, o.quadrant] for o in s.attrs],
            "referred": s.referred,
            "condition": s.condition,
        }, sort_keys=True))
    (root / "manifest.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))


def read_dataset(path) -> tuple[SceneSpec, int, list[SceneSample]]:
    from . import fstn
    root = Path(path)
    head = json.loads((root / "dataset.json").read_text())
    spec = SceneSpec.from_dict(head["spec"])
    samples = []
    manifest = (root / "manifest.jsonl").read_text().splitlines()
    if len(manifest) != head["count"]:
        raise ValueError(
            f"manifest count mismatch: header says {head['count']}, found {len(manifest)} lines")
    for line in manifest:
        rec = json.loads(line)
        image = fstn.read(root / rec["image"])
        masks = fstn.read(root / rec["masks"])
        attrs = [ObjectAttrs(color=a[0], shape=a[1], size=a[2], quadrant=a[3]) for a in rec["attrs"]]
        samples.append(SceneSample(
            index=rec["index"], image=image, masks=masks, attrs=attrs,
            referred=rec["referred"], condition=list(rec["condition"]),
        ))
    return spec, head["seed"], samples
