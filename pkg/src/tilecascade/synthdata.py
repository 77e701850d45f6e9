"""Procedural multi-magnification image corpus and its on-disk pyramid store.

gen_pyramid draws a tissue-like slide at the finest level — white background,
smooth tinted blob regions from thresholded low-frequency noise, dark speckle
inside the blobs — and area-downsamples it to the coarser levels, so the
cross-magnification consistency invariant holds by construction. Pyramids are
stored as 256-sized lossless PNG tiles per level plus a small text manifest.
"""

import os
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import imageops, tiler
from .cascade import center_context_crop
from .errors import DatasetError
from .rng import NoiseStream, stable_hash

DEFAULT_SIZES = (32, 200, 1376)
TILE_SIZE = 256
STAGES = ("low", "mid", "high")
MANIFEST_NAME = "manifest.txt"

# measured over seeds 0..99 at the default sizes; see the band test
BACKGROUND_FRACTION_RANGE = (0.20, 0.60)


@dataclass
class ImagePyramid:
    slide_id: str
    levels: list          # three (C, W, W) float arrays in [0, 1]
    seed: int
    tile_size: int = TILE_SIZE

    @property
    def channels(self) -> int:
        return self.levels[0].shape[0]

    @property
    def sizes(self) -> tuple:
        return tuple(lvl.shape[1] for lvl in self.levels)


@dataclass
class TrainingExample:
    target: np.ndarray              # (C, P, P) in [0, 1]
    context: np.ndarray | None      # (C, 32, 32) window from the coarser level
    level: int                      # magnification tag 0/1/2
    slide_id: str = ""
    rect: tuple = ()

    def __post_init__(self):
        if (self.context is not None) != (self.level > 0):
            raise DatasetError(f"context presence does not match level "
                               f"{self.level}")


def _octave_field(stream: NoiseStream, size: int, grids=(5, 9, 17),
                  weights=(1.0, 0.5, 0.25)) -> np.ndarray:
    """Smooth scalar field in roughly [0,1): weighted sum of bilinearly
    upsampled coarse uniform-noise grids."""
    total = np.zeros((size, size))
    for g, w in zip(grids, weights):
        coarse = stream.uniform((1, g, g))
        total += w * imageops.resize_bilinear(coarse, size, size)[0]
    return total / sum(weights)


def gen_pyramid(seed: int, sizes=DEFAULT_SIZES) -> ImagePyramid:
    """Deterministic tissue-like pyramid; finest level drawn, others
    area-averaged down from it."""
    stream = NoiseStream(stable_hash(seed, "pyramid"))
    size = sizes[-1]
    blob = _octave_field(stream.split("blob"), size)
    background_target = stream.uniform((), 0.28, 0.52).item()
    threshold = np.quantile(blob, background_target)
    # smooth tissue coverage in [0,1]; 0 = background (white), 1 = tissue
    edge = 0.02
    cover = np.clip((blob - threshold) / edge, 0.0, 1.0)

    tint = _octave_field(stream.split("tint"), size, grids=(9, 33), weights=(1.0, 0.5))
    # pink-to-purple palette driven by the tint field
    red = 0.95 - 0.15 * tint
    green = 0.62 - 0.12 * tint
    blue = 0.86 - 0.08 * tint
    tissue = np.stack([red, green, blue])

    speckle_field = _octave_field(stream.split("nuclei"), size,
                                  grids=(size // 6, size // 3), weights=(1.0, 0.7))
    spots = np.clip((speckle_field - np.quantile(speckle_field, 0.92)) / 0.01,
                    0.0, 1.0) * (cover > 0.5)
    nucleus = np.array([0.38, 0.22, 0.52])
    tissue = tissue * (1 - spots)[None] + nucleus[:, None, None] * spots[None]

    img = 1.0 * (1 - cover)[None] + tissue * cover[None]
    img = np.clip(img, 0.0, 1.0)

    levels = [img]
    for lower in reversed(sizes[:-1]):
        # area averaging can overshoot the endpoints by float epsilon
        down = np.clip(imageops.resize_box(levels[0], lower, lower), 0.0, 1.0)
        levels.insert(0, down)
    return ImagePyramid(slide_id=f"synth_{seed:06d}", levels=levels, seed=seed)


def background_fraction(pyramid: ImagePyramid) -> float:
    """Fraction of finest-level pixels that are effectively white."""
    fine = pyramid.levels[-1]
    return float(np.mean(fine.min(axis=0) > tiler.WHITE_MIN_CHANNEL))


# ---- pyramid store ---------------------------------------------------------

def _tile_path(root: str, level: int, row: int, col: int) -> str:
    return os.path.join(root, f"tile_{level}_{row}_{col}.png")


def save_pyramid(root: str, pyramid: ImagePyramid) -> None:
    os.makedirs(root, exist_ok=True)
    ts = pyramid.tile_size
    for level, img in enumerate(pyramid.levels):
        size = img.shape[1]
        n = -(-size // ts)  # ceil
        for row in range(n):
            for col in range(n):
                y0, x0 = row * ts, col * ts
                piece = img[:, y0:min(y0 + ts, size), x0:min(x0 + ts, size)]
                Image.fromarray(imageops.to_uint8(piece)).save(
                    _tile_path(root, level, row, col))
    lines = [
        f"slide_id: {pyramid.slide_id}",
        f"seed: {pyramid.seed}",
        f"channels: {pyramid.channels}",
        f"tile_size: {ts}",
        "levels: " + ",".join(str(s) for s in pyramid.sizes),
    ]
    with open(os.path.join(root, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_manifest(text: str) -> dict:
    """Strict key-value manifest parse; errors name the offending field."""
    fields = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        m = re.match(r"^([a-z_]+):\s*(.*)$", line)
        if not m:
            raise DatasetError(f"malformed manifest line: {line!r}")
        fields[m.group(1)] = m.group(2).strip()
    out = {}
    for key in ("slide_id", "seed", "channels", "tile_size", "levels"):
        if key not in fields:
            raise DatasetError(f"manifest missing field '{key}'")
    out["slide_id"] = fields["slide_id"]
    for key in ("seed", "channels", "tile_size"):
        try:
            out[key] = int(fields[key])
        except ValueError:
            raise DatasetError(f"manifest field '{key}' is not an integer: "
                               f"{fields[key]!r}") from None
    try:
        out["levels"] = tuple(int(v) for v in fields["levels"].split(","))
    except ValueError:
        raise DatasetError(f"manifest field 'levels' is not a comma list of "
                           f"integers: {fields['levels']!r}") from None
    if len(out["levels"]) != 3 or any(v <= 0 for v in out["levels"]):
        raise DatasetError(f"manifest field 'levels' must hold three positive "
                           f"sizes, got {out['levels']}")
    return out


def load_pyramid(root: str) -> ImagePyramid:
    manifest_path = os.path.join(root, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise DatasetError(f"no manifest at {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        meta = parse_manifest(fh.read())
    ts = meta["tile_size"]
    levels = []
    for level, size in enumerate(meta["levels"]):
        img = np.zeros((meta["channels"], size, size))
        n = -(-size // ts)
        for row in range(n):
            for col in range(n):
                path = _tile_path(root, level, row, col)
                if not os.path.exists(path):
                    raise DatasetError(f"missing tile file {path}")
                piece = imageops.from_uint8(np.asarray(Image.open(path)))
                y0, x0 = row * ts, col * ts
                want = (meta["channels"], min(ts, size - y0), min(ts, size - x0))
                if piece.shape != want:
                    raise DatasetError(f"tile {path} has shape {piece.shape}, "
                                       f"manifest implies {want}")
                img[:, y0:y0 + piece.shape[1], x0:x0 + piece.shape[2]] = piece
        levels.append(img)
    return ImagePyramid(slide_id=meta["slide_id"], levels=levels,
                        seed=meta["seed"], tile_size=ts)


def list_pyramids(root: str) -> list[str]:
    """Sorted pyramid directories under root (those holding a manifest).

    A root that is itself a pyramid directory yields just itself, so corpus
    directories and single-sample outputs are interchangeable as inputs.
    """
    if not os.path.isdir(root):
        raise DatasetError(f"dataset root {root} is not a directory")
    if os.path.exists(os.path.join(root, MANIFEST_NAME)):
        return [root]
    out = []
    for name in sorted(os.listdir(root)):
        if os.path.exists(os.path.join(root, name, MANIFEST_NAME)):
            out.append(os.path.join(root, name))
    return out


# ---- training-set extraction ------------------------------------------------

MAX_CROP_ATTEMPTS = 40


def extract_training_set(pyramids: list, stage: str, count: int | None = None,
                         seed: int = 0, patch: int = 32,
                         context_window: int = 32) -> list[TrainingExample]:
    """Deterministic training examples for one cascade stage.

    low: whole coarsest-level images, no context. mid/high: `count` patch
    crops from level 1/2 paired with center-context windows from the level
    below, sampled from per-slide substreams; white patches are rejected.
    """
    if stage not in STAGES:
        raise DatasetError(f"unknown stage '{stage}'")
    if not pyramids:
        raise DatasetError("no pyramids supplied")
    out = []
    if stage == "low":
        for pyr in pyramids:
            img = pyr.levels[0]
            if tiler.is_white_patch(img):
                continue
            out.append(TrainingExample(target=img, context=None, level=0,
                                       slide_id=pyr.slide_id,
                                       rect=(0, 0, img.shape[1], img.shape[2])))
            if count is not None and len(out) >= count:
                break
    else:
        level = 1 if stage == "mid" else 2
        if count is None:
            count = 16 * len(pyramids)
        per_slide = -(-count // len(pyramids))
        for pyr in pyramids:
            img = pyr.levels[level]
            coarser = pyr.levels[level - 1]
            scale = img.shape[1] / coarser.shape[1]
            stream = NoiseStream(stable_hash(seed, stage, pyr.slide_id))
            limit = img.shape[1] - patch + 1
            if limit < 1:
                raise DatasetError(f"level {level} of {pyr.slide_id} is "
                                   f"{img.shape[1]}, smaller than the {patch} "
                                   "patch")
            for _ in range(per_slide):
                if len(out) >= count:
                    break
                for _attempt in range(MAX_CROP_ATTEMPTS):
                    y0 = int(stream.integers(0, limit))
                    x0 = int(stream.integers(0, limit))
                    target = img[:, y0:y0 + patch, x0:x0 + patch]
                    if not tiler.is_white_patch(target):
                        fp = (y0 / scale, x0 / scale, patch / scale, patch / scale)
                        ctx = center_context_crop(coarser, fp, window=context_window)
                        out.append(TrainingExample(
                            target=target.copy(), context=ctx, level=level,
                            slide_id=pyr.slide_id, rect=(y0, x0, patch, patch)))
                        break
    if not out:
        raise DatasetError(f"stage '{stage}' yielded no non-white examples")
    return out


# re-exported preprocessing op used by the CLI pipelines
crop_or_pad = imageops.crop_or_pad
