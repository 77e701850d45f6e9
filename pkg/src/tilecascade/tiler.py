"""Overlapping-tile planning, wavefront execution, and seam-exact assembly.

A stage canvas of side W is covered by P-sized tiles at stride S = P(1-omega)
in raster order. Tile (i,j) depends on its left and top neighbors; everything
it overlaps with earlier tiles is exactly the union of its top and left
strips, which the left/top neighbors have already written (the diagonal
neighbor's contribution is a subset of the top neighbor's), so those strips
are handed to the tile generator as a hard known-region constraint and then
overwritten exactly. Overlap writes therefore always carry identical bytes
and the canvas is independent of execution interleaving; the writer-count
map double-checks this at write time.

Execution is a ready-queue over the dependency DAG with at most k tiles in
flight; with k=1 it degenerates to raster order. Every state transition is
appended to an event log (one line: timestamp, tile, transition, seed).
"""

import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, StateError, TileError, ValidationError
from .rng import stable_hash

WHITE_MIN_CHANNEL = 0.85
WHITE_PIXEL_FRACTION = 0.95
WHITE_MEAN = 0.90

PENDING = "Pending"
READY = "Ready"
RUNNING = "Running"
DONE = "Done"
SKIPPED_WHITE = "Skipped-White"


@dataclass
class TileSpec:
    i: int
    j: int
    y0: int
    x0: int
    size: int
    seed: int
    status: str = PENDING

    @property
    def index(self):
        return (self.i, self.j)

    @property
    def rect(self):
        return (self.y0, self.x0, self.size, self.size)


class TileGrid:
    def __init__(self, canvas: int, patch: int, stride: int, n: int,
                 tiles: list[TileSpec]):
        self.canvas = canvas
        self.patch = patch
        self.stride = stride
        self.n = n
        self.tiles = tiles

    def tile(self, i: int, j: int) -> TileSpec:
        return self.tiles[i * self.n + j]

    def deps(self, i: int, j: int) -> list[tuple[int, int]]:
        out = []
        if i > 0:
            out.append((i - 1, j))
        if j > 0:
            out.append((i, j - 1))
        return out

    def wavefront_level(self, i: int, j: int) -> int:
        return i + j

    def wavefront_count(self) -> int:
        return 2 * self.n - 1

    def wavefront_width(self, level: int) -> int:
        return min(level + 1, self.n, 2 * self.n - 1 - level)


def plan_grid(canvas: int, patch: int, overlap: float,
              stage: int = 0, global_seed: int = 0) -> TileGrid:
    """Lay out the overlapping grid; rejects geometry that does not tile.

    Per-tile seeds are stable hashes of (global_seed, stage, i, j).
    """
    if patch <= 0 or canvas < patch:
        raise GeometryError(f"canvas {canvas} cannot hold patch {patch}")
    if not 0.0 < overlap < 1.0:
        raise GeometryError(f"overlap fraction {overlap} outside (0, 1)")
    stride_f = patch * (1.0 - overlap)
    stride = int(round(stride_f))
    if abs(stride_f - stride) > 1e-9 or stride <= 0:
        raise GeometryError(f"stride P*(1-omega) = {stride_f} is not a "
                            "positive integer")
    if (canvas - patch) % stride:
        raise GeometryError(f"(W - P) = {canvas - patch} leaves remainder "
                            f"{(canvas - patch) % stride} under stride {stride}")
    n = (canvas - patch) // stride + 1
    tiles = []
    for i in range(n):
        for j in range(n):
            tiles.append(TileSpec(i, j, i * stride, j * stride, patch,
                                  stable_hash(global_seed, stage, i, j)))
    return TileGrid(canvas, patch, stride, n, tiles)


def is_white_patch(values: np.ndarray) -> bool:
    """Mostly-white test: >=95% of pixels have min channel > 0.85 and the
    overall mean exceeds 0.90."""
    if values.ndim != 3:
        raise ValidationError(f"expected (C, H, W) values, got {values.shape}")
    min_channel = values.min(axis=0)
    frac = float(np.mean(min_channel > WHITE_MIN_CHANNEL))
    return frac >= WHITE_PIXEL_FRACTION and float(values.mean()) > WHITE_MEAN


@dataclass
class KnownRegion:
    mask: np.ndarray    # (P, P) bool
    values: np.ndarray  # (C, P, P), zeros outside the mask

    @property
    def empty(self) -> bool:
        return not self.mask.any()

    @property
    def full(self) -> bool:
        return bool(self.mask.all())


class CanvasAssembly:
    """Stage canvas plus per-pixel writer counts and a seam check.

    Writers must deliver identical bytes wherever rects overlap; write()
    asserts that before counting the new writer.
    """

    def __init__(self, canvas: int, channels: int):
        self.canvas = canvas
        self.values = np.zeros((channels, canvas, canvas), dtype=np.float64)
        self.writers = np.zeros((canvas, canvas), dtype=np.uint16)
        self.lock = threading.Lock()

    def write(self, rect, img: np.ndarray) -> None:
        y0, x0, h, w = rect
        if img.shape[1:] != (h, w):
            raise ValidationError(f"tile image {img.shape} does not fit rect {rect}")
        with self.lock:
            sub = (slice(None), slice(y0, y0 + h), slice(x0, x0 + w))
            seen = self.writers[y0:y0 + h, x0:x0 + w] > 0
            if seen.any():
                if not np.array_equal(self.values[sub][:, seen], img[:, seen]):
                    raise StateError(f"seam mismatch writing rect {rect}: "
                                     "overlap bytes differ from prior writer")
            self.values[sub] = img
            self.writers[y0:y0 + h, x0:x0 + w] += 1

    def read_known(self, rect) -> KnownRegion:
        y0, x0, h, w = rect
        with self.lock:
            mask = self.writers[y0:y0 + h, x0:x0 + w] > 0
            values = self.values[:, y0:y0 + h, x0:x0 + w].copy()
        values[:, ~mask] = 0.0
        return KnownRegion(mask=mask, values=values)

    def complete(self) -> bool:
        return bool((self.writers > 0).all())


def known_region(grid: TileGrid, tile: TileSpec, canvas: CanvasAssembly) -> KnownRegion:
    """Already-written pixels of this tile's rect, from the writer map."""
    for (di, dj) in grid.deps(tile.i, tile.j):
        dep = grid.tile(di, dj)
        if dep.status not in (DONE, SKIPPED_WHITE):
            raise StateError(f"known_region for {tile.index} before dependency "
                             f"{dep.index} completed")
    return canvas.read_known(tile.rect)


class StageEventLog:
    """Append-only, thread-safe event record; optionally mirrored to a file."""

    def __init__(self, path=None):
        self.path = path
        self.lines: list[str] = []
        self._lock = threading.Lock()
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def append(self, tile: TileSpec, transition: str) -> None:
        stamp = f"{time.time():.6f}"
        line = f"{stamp}\t{tile.i},{tile.j}\t{transition}\t{tile.seed}"
        with self._lock:
            self.lines.append(line)
            if self._fh:
                self._fh.write(line + "\n")
                self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None

    @staticmethod
    def parse(lines) -> list[dict]:
        out = []
        for line in lines:
            if not line.strip():
                continue
            stamp, index, transition, seed = line.strip().split("\t")
            i, j = (int(v) for v in index.split(","))
            out.append({"time": float(stamp), "tile": (i, j),
                        "transition": transition, "seed": int(seed)})
        return out


def run_stage(grid: TileGrid, channels: int, tile_fn, workers: int = 1,
              event_log: StageEventLog | None = None,
              canvas: CanvasAssembly | None = None) -> CanvasAssembly:
    """Execute the grid over its wavefront DAG with at most `workers` tiles
    in flight.

    tile_fn(tile, known: KnownRegion) -> (image (C,P,P), skipped_white: bool)
    runs outside all locks. Any tile failure aborts the stage (pending tiles
    are not started; running ones finish) and raises TileError carrying the
    failing index; the partial canvas is preserved on the returned object
    attached to the error.
    """
    if workers < 1:
        raise ValidationError(f"worker count {workers} < 1")
    log = event_log or StageEventLog()
    canvas = canvas or CanvasAssembly(grid.canvas, channels)
    n = grid.n
    remaining = {}
    for tile in grid.tiles:
        tile.status = PENDING
        remaining[tile.index] = len(grid.deps(tile.i, tile.j))
    ready = [grid.tile(0, 0)]
    grid.tile(0, 0).status = READY
    log.append(grid.tile(0, 0), READY)
    failure: TileError | None = None

    def finish(tile: TileSpec, result) -> None:
        nonlocal failure
        img, skipped = result
        canvas.write(tile.rect, img)
        tile.status = SKIPPED_WHITE if skipped else DONE
        log.append(tile, tile.status)
        for (ni, nj) in ((tile.i + 1, tile.j), (tile.i, tile.j + 1)):
            if ni < n and nj < n:
                remaining[(ni, nj)] -= 1
                if remaining[(ni, nj)] == 0:
                    nxt = grid.tile(ni, nj)
                    nxt.status = READY
                    log.append(nxt, READY)
                    ready.append(nxt)

    def job(tile: TileSpec, known: KnownRegion):
        return tile_fn(tile, known)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        in_flight = {}
        while (ready or in_flight) and failure is None:
            while ready and len(in_flight) < workers:
                # raster-order start among ready tiles keeps logs stable
                ready.sort(key=lambda t: t.index)
                tile = ready.pop(0)
                known = known_region(grid, tile, canvas)
                tile.status = RUNNING
                log.append(tile, RUNNING)
                in_flight[pool.submit(job, tile, known)] = tile
            done, _ = wait(in_flight, return_when=FIRST_COMPLETED)
            for fut in done:
                tile = in_flight.pop(fut)
                try:
                    finish(tile, fut.result())
                except TileError as exc:
                    failure = exc
                except Exception as exc:  # noqa: BLE001 - re-tagged with index
                    failure = TileError(tile.index, str(exc))
        # drain anything still running after a failure
        for fut, tile in in_flight.items():
            try:
                finish(tile, fut.result())
            except Exception:
                pass
    log.close()
    if failure is not None:
        failure.partial_canvas = canvas
        raise failure
    if not canvas.complete():
        raise StateError("stage finished with unwritten canvas pixels")
    return canvas
