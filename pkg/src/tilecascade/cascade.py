"""Cascaded generation: a three-model patch cascade, and three such cascades
chained through the overlapping tiler into a full multi-resolution image.

One patch cascade (CDM) runs a base model at r0 and two super-resolution
models at r1 and r2; each SR model conditions on the bilinear upsampling of
the previous output, plus an optional context image, plus (at r2, when the
model was built with mask channels) an inpainting constraint. The full
pipeline (URCDM) generates the lowest level in one cascade call, then tiles
the next two levels, conditioning every tile on a fixed-size context window
cropped around its footprint in the level below.
"""

from dataclasses import dataclass

import numpy as np

from . import imageops, tiler
from .diffusion import (KnownRegionConstraint, sample_chain, to_image_space,
                        to_model_space)
from .errors import GeometryError, ValidationError
from .rng import NoiseStream, stable_hash
from .scorenet import Conditioning

CONTEXT_WINDOW = 32


@dataclass
class CDMSpec:
    """Base + two SR models with their native resolutions r0 < r1 < r2."""

    base: object
    sr1: object
    sr2: object
    r0: int
    r1: int
    r2: int

    def __post_init__(self):
        if not self.r0 < self.r1 < self.r2:
            raise ValidationError(f"resolutions must increase: "
                                  f"{self.r0}, {self.r1}, {self.r2}")
        if self.r1 % self.r0 or self.r2 % self.r1:
            raise ValidationError(f"resolution ratios must be integers: "
                                  f"{self.r0} -> {self.r1} -> {self.r2}")
        for model, res in ((self.base, self.r0), (self.sr1, self.r1),
                           (self.sr2, self.r2)):
            cfg = getattr(model, "config", None)
            if cfg is not None and cfg.resolution != res:
                raise ValidationError(f"model resolution {cfg.resolution} "
                                      f"does not match cascade slot {res}")


def center_context_crop(image: np.ndarray, rect, window: int = CONTEXT_WINDOW,
                        fill: float = 1.0) -> np.ndarray:
    """Fixed-size window centered on a (possibly fractional) footprint rect.

    The window start is the footprint center minus half the window, rounded
    to the nearest integer pixel; parts outside the image are padded with
    white. The footprint may be larger or smaller than the window.
    """
    y0, x0, h, w = rect
    if h <= 0 or w <= 0:
        raise GeometryError(f"empty footprint rect {rect}")
    cy = y0 + h / 2.0
    cx = x0 + w / 2.0
    top = int(np.floor(cy - window / 2.0 + 0.5))
    left = int(np.floor(cx - window / 2.0 + 0.5))
    return imageops.crop_padded(image, top, left, window, window, fill=fill)


def _downscale_mask(mask: np.ndarray, out: int) -> np.ndarray:
    """Conservative mask reduction: a low-res pixel is known only when its
    entire footprint is known."""
    size = mask.shape[0]
    avg = imageops.box_rect(mask[None].astype(np.float64),
                            (0.0, 0.0, float(size), float(size)), out, out)[0]
    return avg >= 1.0 - 1e-9


def _known_at(known: tiler.KnownRegion | None, res: int, full: int):
    """Image-space (mask, values) for one sub-resolution, or None."""
    if known is None or known.empty:
        return None
    if res == full:
        mask, values = known.mask, known.values.copy()
    else:
        mask = _downscale_mask(known.mask, res)
        values = imageops.resize_box(known.values, res, res)
        values[:, ~mask] = 0.0
    if not mask.any():
        return None
    return mask, values


def _build_cond(model, prev_up, context, known_pair):
    """Conditioning bundle in training order: upsampled previous output
    first, then the context window; mask/known channels when configured."""
    cfg = getattr(model, "config", None)
    if cfg is None:
        return None  # oracle models in tests take no conditioning
    images = []
    if prev_up is not None:
        images.append(prev_up)
    if context is not None:
        images.append(context)
    if len(images) != cfg.cond_images:
        raise ValidationError(f"model expects {cfg.cond_images} conditioning "
                              f"images, got {len(images)}")
    mask = known = None
    if cfg.mask_channels:
        res = cfg.resolution
        if known_pair is None:
            mask = np.zeros((res, res), dtype=bool)
            known = np.zeros((cfg.channels, res, res), dtype=np.float64)
        else:
            mask, known = known_pair
    return Conditioning(images=images, mask=mask, known=known)


def run_cdm(spec: CDMSpec, stream: NoiseStream, channels: int = 3,
            context: np.ndarray | None = None,
            known: tiler.KnownRegion | None = None,
            clip_x0=(-1.0, 1.0)) -> np.ndarray:
    """Sample one patch through base -> SR1 -> SR2; returns (C, r2, r2) in
    [0, 1]. `context` is a full-resolution [0,1] conditioning window resized
    to each model's input; `known` is an inpainting constraint at r2, applied
    at every resolution via conservative downscaling."""
    out = None
    for stage, (model, res) in enumerate(((spec.base, spec.r0),
                                          (spec.sr1, spec.r1),
                                          (spec.sr2, spec.r2))):
        prev_up = None if out is None else imageops.resize_bilinear(out, res, res)
        ctx = None if context is None else imageops.resize_bilinear(context, res, res)
        known_pair = _known_at(known, res, spec.r2)
        cond = _build_cond(model, prev_up, ctx, known_pair)
        constraint = None
        if known_pair is not None:
            mask, values = known_pair
            constraint = KnownRegionConstraint(mask, to_model_space(values))
        sub = stream.split("cdm", stage)
        x = sample_chain(model, (channels, res, res), sub, cond=cond,
                         constraint=constraint, clip_x0=clip_x0)
        out = to_image_space(x)
        if known_pair is not None:
            # write the known pixels back in image space so constrained
            # output bits equal the canvas bits they came from
            mask, values = known_pair
            out[:, mask] = values[:, mask]
    return out


@dataclass
class URCDMSpec:
    """Three chained cascades and the stage canvas sizes they must tile."""

    low: CDMSpec
    mid: CDMSpec
    high: CDMSpec
    sizes: tuple[int, int, int]
    overlap: float = 0.125

    def __post_init__(self):
        w1, w2, w3 = self.sizes
        if w1 != self.low.r2:
            raise GeometryError(f"stage-1 size {w1} must equal the low "
                                f"cascade output {self.low.r2}")
        patch = self.mid.r2
        if self.high.r2 != patch:
            raise GeometryError(f"mid and high cascades must share patch size "
                                f"({patch} vs {self.high.r2})")
        if not w1 < w2 < w3:
            raise GeometryError(f"stage sizes must increase: {self.sizes}")
        stride_f = patch * (1.0 - self.overlap)
        stride = int(round(stride_f))
        if abs(stride_f - stride) > 1e-9 or stride <= 0:
            raise GeometryError(f"stride P*(1-omega) = {stride_f} is not a "
                                "positive integer")
        for w in (w2, w3):
            if (w - patch) % stride:
                raise GeometryError(f"(W - P) = {w - patch} does not divide "
                                    f"by stride {stride}")

    @property
    def patch(self) -> int:
        return self.mid.r2


def make_tile_fn(cdm: CDMSpec, prev_canvas: np.ndarray, canvas_size: int,
                 substitute_white: bool, clip_x0):
    """Build the tiler callback for one super-resolution stage.

    Each tile's footprint in the previous stage is its rect mapped down by
    the canvas-size ratio; the white rule is evaluated on (and, when it
    fires, the tile is replaced by) the bilinear upscale of that footprint,
    sampled at global canvas positions so overlapping substitutes agree
    bit-for-bit.
    """
    scale = canvas_size / prev_canvas.shape[1]

    def tile_fn(tile: tiler.TileSpec, known: tiler.KnownRegion):
        y0, x0, h, w = tile.rect
        fp_rect = (y0 / scale, x0 / scale, h / scale, w / scale)
        footprint_up = imageops.bilinear_window(prev_canvas, y0, x0,
                                                tile.size, canvas_size)
        if substitute_white and tiler.is_white_patch(footprint_up):
            img = footprint_up
            if not known.empty:
                # the known strip stays canvas-exact even for skipped tiles
                img = np.where(known.mask[None], known.values, img)
            return img, True
        context = center_context_crop(prev_canvas, fp_rect)
        stream = NoiseStream(tile.seed)
        img = run_cdm(cdm, stream, channels=prev_canvas.shape[0],
                      context=context, known=known, clip_x0=clip_x0)
        return img, False

    return tile_fn


@dataclass
class WSIResult:
    stages: list          # three (C, W, W) arrays in [0, 1]
    grids: dict           # stage number (2, 3) -> TileGrid with final statuses

    def skipped_counts(self) -> dict:
        out = {}
        for stage_no, grid in self.grids.items():
            out[stage_no] = sum(t.status == tiler.SKIPPED_WHITE
                                for t in grid.tiles)
        return out


def generate_wsi(spec: URCDMSpec, seed: int, channels: int = 3, workers: int = 1,
                 substitute_white: bool = True, clip_x0=(-1.0, 1.0),
                 event_log_paths: dict | None = None) -> WSIResult:
    """Run the full three-stage pipeline; stage canvases are [0,1] float
    arrays of sizes spec.sizes. event_log_paths maps stage number (2, 3) to
    a file that receives that stage's event log."""
    w1, w2, w3 = spec.sizes
    stream1 = NoiseStream(stable_hash(seed, 1, 0, 0))
    stage1 = run_cdm(spec.low, stream1, channels=channels, clip_x0=clip_x0)

    canvases = [stage1]
    grids = {}
    for stage_no, (cdm, size) in enumerate(((spec.mid, w2), (spec.high, w3)),
                                           start=2):
        prev = canvases[-1]
        grid = tiler.plan_grid(size, spec.patch, spec.overlap,
                               stage=stage_no, global_seed=seed)
        grids[stage_no] = grid
        log = None
        if event_log_paths and event_log_paths.get(stage_no):
            log = tiler.StageEventLog(event_log_paths[stage_no])
        fn = make_tile_fn(cdm, prev, size, substitute_white, clip_x0)
        canvas = tiler.run_stage(grid, channels, fn, workers=workers,
                                 event_log=log)
        canvases.append(canvas.values)
    return WSIResult(stages=canvases, grids=grids)
