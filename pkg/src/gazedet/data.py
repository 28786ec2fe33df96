"""Scene sources: a procedural synthetic generator and annotation-file loaders.

The synthetic generator renders scenes whose ground truth is exact by
construction: "heads" are filled discs carrying a bright orientation notch,
"targets" are filled squares. Each in-frame person's notch lies on the segment
from the head center to its assigned target, so gaze direction is recoverable
from pixels alone. Out-of-frame persons point at a location outside the image.

Loaded datasets use a JSON-lines normal form, one record per head-target
instance:

    {"image_path": ..., "head_box": [x0, y0, x1, y1],
     "gaze": [x, y] or null, "out_of_frame": bool}

with all coordinates normalized to [0, 1]^2. Converters from tabular
(gazefollow-style CSV) annotations to this form live alongside the loader but
are not invoked by it.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .gtgen import Annotation, Point

logger = logging.getLogger(__name__)

# Geometry of rendered entities, in normalized units.
HEAD_RADIUS_RANGE = (0.055, 0.085)
OBJECT_HALF_RANGE = (0.035, 0.060)
NOTCH_OFFSET_FRAC = 1.0  # notch sits on the disc rim, in head radii
NOTCH_RADIUS_FRAC = 0.34
PLACEMENT_MARGIN = 0.02
CORRIDOR_CLEARANCE = 0.015
GAZE_SENTINEL = -1.0  # (-1, -1) gaze in CSV rows marks out-of-frame


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 128
    max_people: int = 2
    p_out_of_frame: float = 0.15
    object_count_range: tuple[int, int] = (1, 3)
    rng_seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p_out_of_frame <= 1.0):
            raise ValueError("p_out_of_frame must be a probability")
        if self.image_size <= 0 or self.max_people < 0:
            raise ValueError("sizes and counts must be non-negative")
        lo, hi = self.object_count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad object_count_range {self.object_count_range}")


@dataclass
class SceneSample:
    """One scene image with its ground-truth head-target annotations."""

    image: np.ndarray  # (S, S, 3) float32 in [0, 1]
    annotations: list[Annotation]
    scene_id: str


@dataclass
class SceneRecord:
    """Lazily loadable scene: annotation rows grouped by image path."""

    image_path: str
    annotations: list[Annotation] = field(default_factory=list)

    @property
    def scene_id(self) -> str:
        return self.image_path


class AnnotationFormatError(ValueError):
    """Malformed annotation row; message carries the 1-based line number."""


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Independent, platform-stable RNG stream for one scene."""
    return np.random.default_rng([seed, index])


def _place(rng, existing, radius, tries=200):
    # Rejection-sample a center keeping clearance from borders and neighbors.
    for _ in range(tries):
        c = rng.uniform(radius + PLACEMENT_MARGIN, 1.0 - radius - PLACEMENT_MARGIN, size=2)
        ok = all(
            np.hypot(c[0] - ex, c[1] - ey) > radius + er + PLACEMENT_MARGIN
            for ex, ey, er in existing
        )
        if ok:
            return float(c[0]), float(c[1])
    raise RuntimeError("could not place entity without overlap; scene too crowded")


def _corridor_hits(head: Point, direction: np.ndarray, objects) -> list[tuple[float, int]]:
    # Objects whose center lies close to the ray head + t * direction, t > 0.
    hits = []
    for idx, (cx, cy, half) in enumerate(objects):
        rel = np.array([cx - head[0], cy - head[1]])
        along = float(rel @ direction)
        if along <= 0:
            continue
        perp = float(np.linalg.norm(rel - along * direction))
        if perp < half + CORRIDOR_CLEARANCE:
            hits.append((along, idx))
    return sorted(hits)


def _outward_direction(rng, head: Point, objects, tries=64) -> np.ndarray:
    # A ray that exits the frame without brushing any target on the way out.
    for _ in range(tries):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        d = np.array([math.cos(theta), math.sin(theta)])
        t_exit = _exit_distance(head, d)
        hits = _corridor_hits(head, d, objects)
        if not hits or hits[0][0] > t_exit:
            return d
    return d  # crowded corner case: accept the last candidate


def _exit_distance(head: Point, d: np.ndarray) -> float:
    ts = []
    for coord, dc in zip(head, d):
        if dc > 1e-12:
            ts.append((1.0 - coord) / dc)
        elif dc < -1e-12:
            ts.append(-coord / dc)
    return min(ts) if ts else math.inf


def generate_scene(rng: np.random.Generator, config: SynthConfig) -> SceneSample:
    """Render one scene and return it with exact annotations.

    People count is uniform on {1..max_people} (0 when max_people is 0). Each
    person is out-of-frame with probability p_out_of_frame; in-frame persons
    look at the nearest target square along their notch ray. Scenes without
    targets force everyone out-of-frame.
    """
    size = config.image_size
    n_people = 0 if config.max_people == 0 else int(rng.integers(1, config.max_people + 1))
    lo, hi = config.object_count_range
    n_objects = int(rng.integers(lo, hi + 1))

    placed: list[tuple[float, float, float]] = []
    objects = []
    for _ in range(n_objects):
        half = float(rng.uniform(*OBJECT_HALF_RANGE))
        cx, cy = _place(rng, placed, half * math.sqrt(2.0))
        placed.append((cx, cy, half * math.sqrt(2.0)))
        objects.append((cx, cy, half))
    heads = []
    for _ in range(n_people):
        radius = float(rng.uniform(*HEAD_RADIUS_RANGE))
        # reserve the notch's reach so orientation markers never occlude
        # each other or leave the frame
        reach = radius * (NOTCH_OFFSET_FRAC + NOTCH_RADIUS_FRAC)
        cx, cy = _place(rng, placed, reach)
        placed.append((cx, cy, reach))
        heads.append((cx, cy, radius))

    annotations: list[Annotation] = []
    notches = []
    for cx, cy, radius in heads:
        oof = bool(rng.random() < config.p_out_of_frame) or n_objects == 0
        if oof:
            d = _outward_direction(rng, (cx, cy), objects)
            gaze = None
        else:
            # aim at a target; if another object sits nearer along that ray,
            # re-aim at it, so the notch ray always hits the annotated center
            target = int(rng.integers(0, n_objects))
            for _ in range(8):
                tx, ty, _ = objects[target]
                d = np.array([tx - cx, ty - cy])
                d = d / np.linalg.norm(d)
                nearest = _corridor_hits((cx, cy), d, objects)[0][1]
                if nearest == target:
                    break
                target = nearest
            gaze = (objects[target][0], objects[target][1])
        notches.append((cx + d[0] * radius * NOTCH_OFFSET_FRAC, cy + d[1] * radius * NOTCH_OFFSET_FRAC, radius * NOTCH_RADIUS_FRAC))
        annotations.append(
            Annotation(
                head_box=(cx - radius, cy - radius, cx + radius, cy + radius),
                gaze_point=gaze,
                out_of_frame=oof,
            )
        )

    image = _render(rng, size, objects, heads, notches)
    return SceneSample(image=image, annotations=annotations, scene_id="")


def _blend(image, coverage, color):
    a = coverage[..., None].astype(np.float32)
    image *= 1.0 - a
    image += a * np.asarray(color, dtype=np.float32)


def _render(rng, size, objects, heads, notches) -> np.ndarray:
    # shapes are drawn with one-pixel-wide coverage anti-aliasing, which keeps
    # sub-pixel geometry (notch direction) recoverable from the raster
    xs = (np.arange(size, dtype=np.float32) + 0.5) / size
    gx, gy = np.meshgrid(xs, xs)  # gx varies along columns, gy along rows
    bg = rng.uniform(0.75, 0.9)
    image = np.full((size, size, 3), bg, dtype=np.float32)
    image += rng.normal(0.0, 0.01, size=image.shape).astype(np.float32)

    def disc_coverage(cx, cy, radius):
        d = np.hypot(gx - cx, gy - cy)
        return np.clip((radius - d) * size + 0.5, 0.0, 1.0)

    for cx, cy, half in objects:
        d = np.maximum(np.abs(gx - cx), np.abs(gy - cy))
        coverage = np.clip((half - d) * size + 0.5, 0.0, 1.0)
        color = (rng.uniform(0.75, 0.95), rng.uniform(0.05, 0.2), rng.uniform(0.05, 0.2))
        _blend(image, coverage, color)
    for cx, cy, radius in heads:
        color = (rng.uniform(0.05, 0.2), rng.uniform(0.1, 0.3), rng.uniform(0.55, 0.8))
        _blend(image, disc_coverage(cx, cy, radius), color)
    for cx, cy, radius in notches:
        _blend(image, disc_coverage(cx, cy, radius), (1.0, rng.uniform(0.8, 0.95), 0.1))
    return np.clip(image, 0.0, 1.0)


def generate_dataset(config: SynthConfig, n_scenes: int, start_index: int = 0) -> list[SceneSample]:
    """Deterministic scene list; scene i draws from stream (rng_seed, i)."""
    samples = []
    for i in range(start_index, start_index + n_scenes):
        sample = generate_scene(scene_rng(config.rng_seed, i), config)
        sample.scene_id = f"synth-{config.rng_seed}-{i:05d}"
        samples.append(sample)
    return samples


# ---------------------------------------------------------------------------
# Annotation files (JSON-lines normal form)


def _annotation_rows(ann: Annotation, image_path: str):
    points = ann.gaze_candidates if ann.gaze_candidates else (None,)
    for p in points:
        yield {
            "image_path": image_path,
            "head_box": [round(v, 6) for v in ann.head_box],
            "gaze": None if p is None else [round(p[0], 6), round(p[1], 6)],
            "out_of_frame": ann.out_of_frame,
        }


def write_annotations(records: list[SceneRecord], path: str | Path) -> int:
    """Write records to JSON-lines, one row per (instance, gaze candidate)."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            for ann in rec.annotations:
                for row in _annotation_rows(ann, rec.image_path):
                    fh.write(json.dumps(row) + "\n")
                    n += 1
    return n


def load_annotations(path: str | Path) -> list[SceneRecord]:
    """Parse a JSON-lines annotation file into per-image records.

    Rows sharing an image path merge into one record; rows that additionally
    share a head box merge into one instance whose ``gaze_candidates`` holds
    every annotated point. Malformed rows raise AnnotationFormatError with
    their line number. An empty file yields an empty dataset.
    """
    by_image: dict[str, dict] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                image_path = row["image_path"]
                head_box = tuple(float(v) for v in row["head_box"])
                gaze = row.get("gaze")
                oof = bool(row.get("out_of_frame", gaze is None))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise AnnotationFormatError(f"{path}: line {lineno}: {exc}") from exc
            entry = by_image.setdefault(image_path, {})
            key = tuple(round(v, 6) for v in head_box)
            inst = entry.setdefault(key, {"head_box": head_box, "oof": oof, "points": []})
            if gaze is not None:
                try:
                    inst["points"].append((float(gaze[0]), float(gaze[1])))
                except (TypeError, ValueError, IndexError) as exc:
                    raise AnnotationFormatError(f"{path}: line {lineno}: bad gaze {gaze!r}") from exc
                inst["oof"] = False

    records = []
    for image_path, instances in by_image.items():
        anns = []
        for lineno_free in instances.values():
            points = lineno_free["points"]
            try:
                anns.append(
                    Annotation(
                        head_box=lineno_free["head_box"],
                        gaze_point=points[0] if points else None,
                        out_of_frame=not points,
                        gaze_candidates=tuple(points),
                    )
                )
            except ValueError as exc:
                raise AnnotationFormatError(f"{path}: {image_path}: {exc}") from exc
        records.append(SceneRecord(image_path=image_path, annotations=anns))
    return records


def save_image(image: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path: str | Path, target_size: int | None = None) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if target_size is not None and img.size != (target_size, target_size):
        img = img.resize((target_size, target_size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def materialize(
    records: list[SceneRecord],
    image_root: str | Path = ".",
    target_size: int | None = None,
) -> list[SceneSample]:
    """Load record images from disk; missing files are skipped with a warning."""
    root = Path(image_root)
    samples = []
    for rec in records:
        path = root / rec.image_path
        try:
            image = load_image(path, target_size)
        except (FileNotFoundError, OSError) as exc:
            logger.warning("skipping scene %s: %s", rec.image_path, exc)
            continue
        samples.append(SceneSample(image=image, annotations=list(rec.annotations), scene_id=rec.image_path))
    return samples


def write_synthetic_dataset(config: SynthConfig, n_scenes: int, out_dir: str | Path) -> tuple[int, int]:
    """Render scenes to PNG + annotations.jsonl; returns (scenes, instances)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    records = []
    n_instances = 0
    for sample in generate_dataset(config, n_scenes):
        rel = f"images/{sample.scene_id}.png"
        save_image(sample.image, out / rel)
        records.append(SceneRecord(image_path=rel, annotations=sample.annotations))
        n_instances += len(sample.annotations)
    write_annotations(records, out / "annotations.jsonl")
    return len(records), n_instances


# ---------------------------------------------------------------------------
# Tabular converter (gazefollow-style CSV)

CSV_COLUMNS = ("image_path", "head_x0", "head_y0", "head_x1", "head_y1", "gaze_x", "gaze_y")


def convert_gazefollow_csv(
    src: str | Path,
    dst: str | Path,
    stride: int = 1,
    image_size: tuple[float, float] | None = None,
) -> int:
    """Convert gazefollow-style CSV rows to the JSON-lines normal form.

    Expected columns: image_path, head_x0, head_y0, head_x1, head_y1, gaze_x,
    gaze_y, with an optional trailing in_frame column (0 marks out-of-frame).
    A gaze of (-1, -1) is the out-of-frame sentinel. Pixel-valued coordinates
    require ``image_size`` = (width, height) for normalization. ``stride``
    keeps every stride-th distinct image in order of first appearance, the
    frame-subsampling policy for video datasets.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    groups: dict[str, list[Annotation]] = {}
    with open(src, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or row[0].strip().lower() == "image_path":
                continue
            if len(row) < len(CSV_COLUMNS):
                raise AnnotationFormatError(
                    f"{src}: line {lineno}: expected >= {len(CSV_COLUMNS)} columns, got {len(row)}"
                )
            try:
                vals = [float(v) for v in row[1:7]]
                in_frame = float(row[7]) != 0.0 if len(row) > 7 and row[7].strip() else True
            except ValueError as exc:
                raise AnnotationFormatError(f"{src}: line {lineno}: {exc}") from exc
            if image_size is not None:
                w, h = image_size
                vals = [vals[0] / w, vals[1] / h, vals[2] / w, vals[3] / h,
                        vals[4] / w if vals[4] >= 0 else vals[4],
                        vals[5] / h if vals[5] >= 0 else vals[5]]
            x0, y0, x1, y1, gx, gy = vals
            oof = (gx == GAZE_SENTINEL and gy == GAZE_SENTINEL) or not in_frame
            try:
                ann = Annotation(
                    head_box=(x0, y0, x1, y1),
                    gaze_point=None if oof else (gx, gy),
                    out_of_frame=oof,
                )
            except ValueError as exc:
                raise AnnotationFormatError(f"{src}: line {lineno}: {exc}") from exc
            groups.setdefault(row[0], []).append(ann)

    kept = [
        SceneRecord(image_path=path, annotations=anns)
        for i, (path, anns) in enumerate(groups.items())
        if i % stride == 0
    ]
    return write_annotations(kept, dst)
