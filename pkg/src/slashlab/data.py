"""Procedural sprite scenes: generation, rasterization, weak annotation, disk IO.

Scenes hold 3..6 colored sprites (circle / square / triangle) over a background
whose complexity is the experimental knob: flat, noise, stripes, or texture.
Every byte of a dataset is a pure function of (seed, config); per-sample
randomness derives from (dataset seed, sample index) so generation can be
parallelized or resumed without drift.
"""

import dataclasses
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, GenerationError

DATASET_VERSION = 1
DIFFICULTIES = ("flat", "noise", "stripes", "texture")
SHAPES = ("circle", "square", "triangle")

MIN_OBJECTS = 3
MAX_OBJECTS = 6
CENTER_LO = 0.1
CENTER_HI = 0.9
MIN_CENTER_DISTANCE = 0.15
MAX_SPACING_RETRIES = 1000

_counter_lock = threading.Lock()
counters = {"fully_occluded_dropped": 0}


def reset_counters():
    with _counter_lock:
        for key in counters:
            counters[key] = 0


def _bump(key, amount=1):
    with _counter_lock:
        counters[key] += amount


def round_half_up(x: float) -> int:
    """round(2.5) -> 3, unlike banker's rounding. Used for annotation counts."""
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: tuple  # RGB in [0,1]
    size: float   # pixels: radius / half-side / circumradius-ish
    center: tuple  # (x, y) normalized to [0,1]


@dataclass(frozen=True)
class SceneSpec:
    objects: list
    background: dict  # {"kind": ..., plus kind-specific params}
    seed: object

    def validate(self):
        """Generator invariants; hand-built specs (tests, demos) may skip these."""
        n = len(self.objects)
        if not MIN_OBJECTS <= n <= MAX_OBJECTS:
            raise GenerationError(f"object count {n} outside [{MIN_OBJECTS}, {MAX_OBJECTS}]")
        for obj in self.objects:
            x, y = obj.center
            if not (CENTER_LO <= x <= CENTER_HI and CENTER_LO <= y <= CENTER_HI):
                raise GenerationError(f"center {obj.center} outside [{CENTER_LO}, {CENTER_HI}]^2")
            if obj.shape not in SHAPES:
                raise GenerationError(f"unknown shape {obj.shape!r}")
        for i in range(n):
            for j in range(i + 1, n):
                a = np.asarray(self.objects[i].center)
                b = np.asarray(self.objects[j].center)
                if np.linalg.norm(a - b) < MIN_CENTER_DISTANCE - 1e-12:
                    raise GenerationError(f"objects {i} and {j} closer than {MIN_CENTER_DISTANCE}")
        if self.background.get("kind") not in DIFFICULTIES:
            raise GenerationError(f"unknown background kind {self.background.get('kind')!r}")


@dataclass
class RenderedSample:
    image: np.ndarray            # H x W x 3 float32 in [0,1], quantized to 8-bit levels
    gt_segmentation: np.ndarray  # H x W int, 0 = background, 1..n = visible objects
    gt_points: np.ndarray        # n x 2 float64, normalized visible-bbox centers
    annotated: bool = False
    annotated_object_indices: list = field(default_factory=list)


@dataclass(frozen=True)
class AnnotationPolicy:
    image_fraction: float = 0.10
    object_fraction: float = 0.75
    seed: int = 0

    def __post_init__(self):
        for name in ("image_fraction", "object_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name} must lie in [0,1], got {v}")


@dataclass
class Dataset:
    samples: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)


def _sample_background(rng, difficulty: str) -> dict:
    if difficulty == "flat":
        return {"kind": "flat", "color": rng.uniform(0.0, 0.45, size=3).tolist()}
    if difficulty == "noise":
        return {"kind": "noise",
                "base": rng.uniform(0.1, 0.5, size=3).tolist(),
                "amplitude": float(rng.uniform(0.1, 0.3)),
                "noise_seed": int(rng.integers(0, 2 ** 31))}
    if difficulty == "stripes":
        return {"kind": "stripes",
                "color_a": rng.uniform(0.0, 0.5, size=3).tolist(),
                "color_b": rng.uniform(0.3, 0.9, size=3).tolist(),
                "period": int(rng.integers(4, 13)),
                "orientation": str(rng.choice(["h", "v", "d"]))}
    if difficulty == "texture":
        return {"kind": "texture",
                "color_a": rng.uniform(0.0, 0.5, size=3).tolist(),
                "color_b": rng.uniform(0.3, 0.9, size=3).tolist(),
                "grid": int(rng.integers(4, 9)),
                "texture_seed": int(rng.integers(0, 2 ** 31))}
    raise DataError(f"unknown difficulty {difficulty!r}; choose from {DIFFICULTIES}")


def generate_scene(seed, difficulty: str,
                   min_center_distance: float = MIN_CENTER_DISTANCE) -> SceneSpec:
    """Deterministic scene sampling; seed may be an int or a tuple of ints."""
    if difficulty not in DIFFICULTIES:
        raise DataError(f"unknown difficulty {difficulty!r}; choose from {DIFFICULTIES}")
    rng = np.random.default_rng(seed)
    background = _sample_background(rng, difficulty)
    count = int(rng.integers(MIN_OBJECTS, MAX_OBJECTS + 1))

    centers = []
    retries = 0
    while len(centers) < count:
        cand = rng.uniform(CENTER_LO, CENTER_HI, size=2)
        if all(np.linalg.norm(cand - c) >= min_center_distance for c in centers):
            centers.append(cand)
            continue
        retries += 1
        if retries > MAX_SPACING_RETRIES:
            raise GenerationError(
                f"center spacing >= {min_center_distance} unsatisfiable after "
                f"{MAX_SPACING_RETRIES} retries (seed {seed!r})")

    objects = []
    for center in centers:
        objects.append(ObjectSpec(
            shape=str(rng.choice(SHAPES)),
            color=tuple(rng.uniform(0.15, 1.0, size=3).tolist()),
            size=float(rng.uniform(5.0, 11.0)),
            center=(float(center[0]), float(center[1]))))
    spec = SceneSpec(objects=objects, background=background, seed=seed)
    spec.validate()
    return spec


def _bilinear_upsample(grid: np.ndarray, H: int, W: int) -> np.ndarray:
    g = grid.shape[0]
    ys = np.linspace(0.0, g - 1.0, H)
    xs = np.linspace(0.0, g - 1.0, W)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, g - 1)
    x1 = np.minimum(x0 + 1, g - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x1)] * fx
    bot = grid[np.ix_(y1, x0)] * (1 - fx) + grid[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def _render_background(bg: dict, H: int, W: int) -> np.ndarray:
    kind = bg["kind"]
    if kind == "flat":
        return np.broadcast_to(np.asarray(bg["color"]), (H, W, 3)).copy()
    if kind == "noise":
        rng = np.random.default_rng(bg["noise_seed"])
        img = np.asarray(bg["base"]) + bg["amplitude"] * rng.uniform(-1, 1, size=(H, W, 3))
        return np.clip(img, 0.0, 1.0)
    if kind == "stripes":
        rows = np.arange(H)[:, None]
        cols = np.arange(W)[None, :]
        phase = {"h": np.broadcast_to(rows, (H, W)),
                 "v": np.broadcast_to(cols, (H, W)),
                 "d": rows + cols}[bg["orientation"]]
        band = (phase // bg["period"]) % 2
        a = np.asarray(bg["color_a"])
        b = np.asarray(bg["color_b"])
        return np.where(band[..., None] == 0, a, b)
    if kind == "texture":
        rng = np.random.default_rng(bg["texture_seed"])
        grid = rng.uniform(size=(bg["grid"], bg["grid"]))
        t = _bilinear_upsample(grid, H, W)[..., None]
        a = np.asarray(bg["color_a"])
        b = np.asarray(bg["color_b"])
        return a + t * (b - a)
    raise DataError(f"unknown background kind {kind!r}")


def _shape_mask(obj: ObjectSpec, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5  # pixel centers
    cx = obj.center[0] * W
    cy = obj.center[1] * H
    s = obj.size
    if obj.shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= s ** 2
    if obj.shape == "square":
        return (np.abs(xx - cx) <= s) & (np.abs(yy - cy) <= s)
    if obj.shape == "triangle":
        verts = [(cx, cy - s), (cx - 0.866 * s, cy + 0.5 * s), (cx + 0.866 * s, cy + 0.5 * s)]
        edges = []
        for (px, py), (qx, qy) in zip(verts, verts[1:] + verts[:1]):
            edges.append((qx - px) * (yy - py) - (qy - py) * (xx - px))
        pos = (edges[0] >= 0) & (edges[1] >= 0) & (edges[2] >= 0)
        neg = (edges[0] <= 0) & (edges[1] <= 0) & (edges[2] <= 0)
        return pos | neg
    raise DataError(f"unknown shape {obj.shape!r}")


def quantize_image(arr: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PNG round trips are bit-exact."""
    u8 = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    return u8.astype(np.float32) / np.float32(255.0)


def render(spec: SceneSpec, H: int, W: int) -> RenderedSample:
    """Painter's-order rasterization; later objects occlude earlier ones.

    Objects whose every pixel is occluded (or off-frame) are dropped from the
    ground truth, with counters["fully_occluded_dropped"] recording each drop;
    remaining ids are compacted to stay contiguous from 1.
    """
    if H < 1 or W < 1:
        raise DataError(f"bad raster size {H}x{W}")
    canvas = _render_background(spec.background, H, W)
    seg = np.zeros((H, W), dtype=np.int64)
    for idx, obj in enumerate(spec.objects, start=1):
        mask = _shape_mask(obj, H, W)
        canvas[mask] = obj.color
        seg[mask] = idx

    visible = [i for i in range(1, len(spec.objects) + 1) if (seg == i).any()]
    dropped = len(spec.objects) - len(visible)
    if dropped:
        _bump("fully_occluded_dropped", dropped)
    compact = np.zeros(len(spec.objects) + 1, dtype=np.int64)
    for new_id, old_id in enumerate(visible, start=1):
        compact[old_id] = new_id
    seg = compact[seg]

    points = np.zeros((len(visible), 2), dtype=np.float64)
    for new_id in range(1, len(visible) + 1):
        rows, cols = np.nonzero(seg == new_id)
        points[new_id - 1, 0] = ((cols.min() + cols.max()) / 2.0 + 0.5) / W
        points[new_id - 1, 1] = ((rows.min() + rows.max()) / 2.0 + 0.5) / H

    return RenderedSample(image=quantize_image(canvas), gt_segmentation=seg, gt_points=points)


def apply_annotation_policy(dataset: Dataset, policy: AnnotationPolicy) -> Dataset:
    """Mark round(image_fraction * N) samples; in each, max(1, round(0.75 * n)) objects.

    Counts are exact by construction, not in expectation. round() is
    half-up. A selected sample with no visible objects stays unannotated
    (nothing to point at).
    """
    samples = dataset.samples
    if not samples:
        raise DataError("cannot annotate an empty dataset")
    rng = np.random.default_rng(policy.seed)
    n_annotated = round_half_up(policy.image_fraction * len(samples))
    chosen = set(rng.choice(len(samples), size=n_annotated, replace=False).tolist()) \
        if n_annotated else set()

    out = []
    for i, sample in enumerate(samples):
        n_obj = len(sample.gt_points)
        if i in chosen and n_obj > 0:
            k = max(1, round_half_up(policy.object_fraction * n_obj))
            ids = sorted((rng.choice(n_obj, size=k, replace=False) + 1).tolist())
            out.append(dataclasses.replace(sample, annotated=True,
                                           annotated_object_indices=ids))
        else:
            out.append(dataclasses.replace(sample, annotated=False,
                                           annotated_object_indices=[]))
    meta = dict(dataset.meta)
    meta["annotation_policy"] = dataclasses.asdict(policy)
    return Dataset(samples=out, meta=meta)


def build_dataset(num_samples: int, seed: int, difficulty: str, H: int, W: int,
                  policy: AnnotationPolicy = None) -> Dataset:
    """Generate, render, and (optionally) annotate a full dataset."""
    samples = [render(generate_scene((seed, i), difficulty), H, W)
               for i in range(num_samples)]
    meta = {"seed": seed, "difficulty": difficulty, "height": H, "width": W,
            "num_samples": num_samples}
    ds = Dataset(samples=samples, meta=meta)
    if policy is not None:
        ds = apply_annotation_policy(ds, policy)
    return ds


# ------------------------------------------------------------------ disk IO

def _rle_encode(flat: np.ndarray) -> list:
    """[value, run, value, run, ...] over the row-major flattening."""
    boundaries = np.nonzero(np.diff(flat))[0] + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(flat)]])
    out = []
    for s, e in zip(starts, ends):
        out.extend([int(flat[s]), int(e - s)])
    return out


def _rle_decode(pairs: list, size: int) -> np.ndarray:
    vals = np.asarray(pairs[0::2], dtype=np.int64)
    runs = np.asarray(pairs[1::2], dtype=np.int64)
    if runs.sum() != size:
        raise DataError(f"run-length data covers {runs.sum()} pixels, expected {size}")
    return np.repeat(vals, runs)


def save_dataset(dataset: Dataset, path) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(dataset.samples):
        stem = f"{i:05d}"
        u8 = np.rint(sample.image * 255.0).astype(np.uint8)
        Image.fromarray(u8, mode="RGB").save(root / "images" / f"{stem}.png")
        H, W = sample.gt_segmentation.shape
        record = {
            "segmentation": {"shape": [H, W],
                             "rle": _rle_encode(sample.gt_segmentation.ravel())},
            "points": sample.gt_points.tolist(),
            "annotated": bool(sample.annotated),
            "annotated_object_indices": [int(v) for v in sample.annotated_object_indices],
        }
        (root / "labels" / f"{stem}.json").write_text(json.dumps(record))
    manifest = {"version": DATASET_VERSION, "num_samples": len(dataset.samples),
                "meta": dataset.meta}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest {manifest_path}: {exc}") from exc
    version = manifest.get("version")
    if version != DATASET_VERSION:
        raise DataError(
            f"dataset version {version!r} incompatible with expected {DATASET_VERSION}")

    samples = []
    for i in range(manifest["num_samples"]):
        stem = f"{i:05d}"
        img_path = root / "images" / f"{stem}.png"
        lbl_path = root / "labels" / f"{stem}.json"
        for p in (img_path, lbl_path):
            if not p.exists():
                raise DataError(f"manifest lists sample {stem} but {p} is missing")
        u8 = np.asarray(Image.open(img_path).convert("RGB"))
        try:
            record = json.loads(lbl_path.read_text())
            H, W = record["segmentation"]["shape"]
            seg = _rle_decode(record["segmentation"]["rle"], H * W).reshape(H, W)
            points = np.asarray(record["points"], dtype=np.float64).reshape(-1, 2)
            samples.append(RenderedSample(
                image=u8.astype(np.float32) / np.float32(255.0),
                gt_segmentation=seg,
                gt_points=points,
                annotated=bool(record["annotated"]),
                annotated_object_indices=[int(v) for v in record["annotated_object_indices"]]))
        except (KeyError, json.JSONDecodeError, ValueError, DataError) as exc:
            raise DataError(f"corrupt label record {lbl_path}: {exc}") from exc
    return Dataset(samples=samples, meta=manifest.get("meta", {}))
