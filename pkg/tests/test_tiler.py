"""Grid planning, dependency/known-region contracts, wavefront scheduling,
seam-exact assembly, and the white-patch rule."""

import threading
import time

import numpy as np
import pytest

from tilecascade import tiler
from tilecascade.errors import GeometryError, StateError, TileError
from tilecascade.rng import NoiseStream, stable_hash


def checker_tile_fn(channels=3):
    """Deterministic mock generator honoring the known-region contract."""

    def fn(tile, known):
        stream = NoiseStream(tile.seed)
        img = stream.uniform((channels, tile.size, tile.size))
        if not known.empty:
            img = np.where(known.mask[None], known.values, img)
        return img, False

    return fn


def brute_force_known_mask(grid, i, j):
    """Union of all raster-earlier tile rects, intersected with (i,j)."""
    mask = np.zeros((grid.canvas, grid.canvas), dtype=bool)
    for tile in grid.tiles:
        if (tile.i, tile.j) >= (i, j):
            continue
        y0, x0, h, w = tile.rect
        mask[y0:y0 + h, x0:x0 + w] = True
    t = grid.tile(i, j)
    return mask[t.y0:t.y0 + t.size, t.x0:t.x0 + t.size]


# ---- planning ------------------------------------------------------------

def test_plan_grid_desk_scale():
    grid = tiler.plan_grid(200, 32, 0.125)
    assert (grid.n, grid.stride) == (7, 28)
    grid = tiler.plan_grid(1376, 32, 0.125)
    assert grid.n == 49


def test_plan_grid_published_sizes():
    assert tiler.plan_grid(6400, 1024, 0.125).n == 7
    assert tiler.plan_grid(41344, 1024, 0.125).n == 46


def test_plan_grid_rejects_bad_geometry():
    with pytest.raises(GeometryError):
        tiler.plan_grid(201, 32, 0.125)   # (W - P) % S != 0
    with pytest.raises(GeometryError):
        tiler.plan_grid(200, 32, 0.13)    # non-integer stride
    with pytest.raises(GeometryError):
        tiler.plan_grid(16, 32, 0.125)    # canvas smaller than patch
    with pytest.raises(GeometryError):
        tiler.plan_grid(200, 32, 0.0)


def test_tile_seeds_are_stable_hashes():
    grid = tiler.plan_grid(88, 32, 0.125, stage=2, global_seed=17)
    assert grid.tile(1, 2).seed == stable_hash(17, 2, 1, 2)
    seeds = {t.seed for t in grid.tiles}
    assert len(seeds) == len(grid.tiles)


def test_dependency_lists():
    grid = tiler.plan_grid(116, 32, 0.125)
    assert grid.deps(0, 0) == []
    assert grid.deps(0, 2) == [(0, 1)]
    assert grid.deps(2, 0) == [(1, 0)]
    assert set(grid.deps(2, 3)) == {(1, 3), (2, 2)}


def test_wavefront_shape():
    grid = tiler.plan_grid(200, 32, 0.125)
    n = grid.n
    assert grid.wavefront_count() == 2 * n - 1
    widths = [grid.wavefront_width(v) for v in range(grid.wavefront_count())]
    assert sum(widths) == n * n
    assert max(widths) == n
    assert widths == widths[::-1]
    # each tile's level exceeds all of its dependencies' levels by one
    for tile in grid.tiles:
        for (di, dj) in grid.deps(tile.i, tile.j):
            assert grid.wavefront_level(di, dj) == grid.wavefront_level(tile.i, tile.j) - 1


# ---- known region --------------------------------------------------------

def test_known_region_is_l_shaped_strip():
    grid = tiler.plan_grid(116, 32, 0.125)  # 4x4 tiles
    canvas = tiler.CanvasAssembly(116, 3)
    masks = {}

    def fn(tile, known):
        masks[tile.index] = known.mask.copy()
        img = NoiseStream(tile.seed).uniform((3, tile.size, tile.size))
        if not known.empty:
            img = np.where(known.mask[None], known.values, img)
        return img, False

    tiler.run_stage(grid, 3, fn, workers=1, canvas=canvas)
    p, s = grid.patch, grid.stride
    ov = p - s
    assert masks[(0, 0)].sum() == 0
    assert masks[(0, 1)].sum() == p * ov          # left strip only
    assert masks[(1, 0)].sum() == p * ov          # top strip only
    assert masks[(1, 1)].sum() == 2 * p * ov - ov * ov
    # left strip occupies the first (P - S) columns
    assert masks[(0, 1)][:, :ov].all() and not masks[(0, 1)][:, ov:].any()
    assert masks[(1, 0)][:ov, :].all() and not masks[(1, 0)][ov:, :].any()


def test_known_region_matches_brute_force_over_grid():
    grid = tiler.plan_grid(116, 32, 0.125)
    masks = {}

    def fn(tile, known):
        masks[tile.index] = known.mask.copy()
        img = NoiseStream(tile.seed).uniform((2, tile.size, tile.size))
        if not known.empty:
            img = np.where(known.mask[None], known.values, img)
        return img, False

    tiler.run_stage(grid, 2, fn, workers=1)
    for tile in grid.tiles:
        expect = brute_force_known_mask(grid, tile.i, tile.j)
        assert np.array_equal(masks[tile.index], expect), tile.index


def test_known_region_requires_completed_deps():
    grid = tiler.plan_grid(88, 32, 0.125)
    canvas = tiler.CanvasAssembly(88, 3)
    with pytest.raises(StateError):
        tiler.known_region(grid, grid.tile(1, 1), canvas)


# ---- canvas assembly -----------------------------------------------------

def test_canvas_seam_assertion_fires_on_mismatch():
    canvas = tiler.CanvasAssembly(64, 1)
    canvas.write((0, 0, 32, 32), np.ones((1, 32, 32)))
    with pytest.raises(StateError):
        canvas.write((0, 28, 32, 32), np.zeros((1, 32, 32)))


def test_canvas_overlap_write_with_identical_bytes_passes():
    canvas = tiler.CanvasAssembly(60, 1)
    base = NoiseStream(5).uniform((1, 60, 60))
    canvas.write((0, 0, 32, 32), base[:, :32, :32])
    canvas.write((0, 28, 32, 32), base[:, :32, 28:60])
    assert canvas.writers.max() == 2
    assert np.array_equal(canvas.values[:, :32, :60], base[:, :32, :])


# ---- execution -----------------------------------------------------------

def test_run_stage_sequential_completes_and_logs():
    grid = tiler.plan_grid(88, 32, 0.125)  # 3x3
    log = tiler.StageEventLog()
    canvas = tiler.run_stage(grid, 3, checker_tile_fn(), workers=1, event_log=log)
    assert canvas.complete()
    assert all(t.status == tiler.DONE for t in grid.tiles)
    events = tiler.StageEventLog.parse(log.lines)
    # every tile goes Ready -> Running -> Done exactly once
    for tile in grid.tiles:
        kinds = [e["transition"] for e in events if e["tile"] == tile.index]
        assert kinds == [tiler.READY, tiler.RUNNING, tiler.DONE]
        seeds = {e["seed"] for e in events if e["tile"] == tile.index}
        assert seeds == {tile.seed}
    # schedule soundness: no tile starts before its dependencies finish
    position = {(e["tile"], e["transition"]): k for k, e in enumerate(events)}
    for tile in grid.tiles:
        for dep in grid.deps(tile.i, tile.j):
            assert position[(dep, tiler.DONE)] < position[(tile.index, tiler.RUNNING)]


def test_run_stage_parallel_matches_sequential_bytes():
    def jittery_fn(tile, known):
        # random-ish sleep forces out-of-order completions under k=4
        time.sleep((tile.seed % 7) * 0.002)
        img = NoiseStream(tile.seed).uniform((3, tile.size, tile.size))
        if not known.empty:
            img = np.where(known.mask[None], known.values, img)
        return img, False

    grid1 = tiler.plan_grid(116, 32, 0.125)
    seq = tiler.run_stage(grid1, 3, jittery_fn, workers=1)
    grid4 = tiler.plan_grid(116, 32, 0.125)
    par = tiler.run_stage(grid4, 3, jittery_fn, workers=4)
    assert seq.values.tobytes() == par.values.tobytes()


def test_run_stage_obeys_worker_cap():
    running = []
    peak = []
    lock = threading.Lock()

    def fn(tile, known):
        with lock:
            running.append(tile.index)
            peak.append(len(running))
        time.sleep(0.005)
        img = np.zeros((1, tile.size, tile.size))
        if not known.empty:
            img = np.where(known.mask[None], known.values, img)
        with lock:
            running.remove(tile.index)
        return img, False

    grid = tiler.plan_grid(116, 32, 0.125)
    tiler.run_stage(grid, 1, fn, workers=2)
    assert max(peak) <= 2


def test_run_stage_schedule_soundness_parallel():
    grid = tiler.plan_grid(116, 32, 0.125)
    log = tiler.StageEventLog()

    def fn(tile, known):
        time.sleep((tile.seed % 5) * 0.002)
        img = NoiseStream(tile.seed).uniform((1, tile.size, tile.size))
        if not known.empty:
            img = np.where(known.mask[None], known.values, img)
        return img, False

    tiler.run_stage(grid, 1, fn, workers=3, event_log=log)
    events = tiler.StageEventLog.parse(log.lines)
    position = {(e["tile"], e["transition"]): k for k, e in enumerate(events)}
    for tile in grid.tiles:
        for dep in grid.deps(tile.i, tile.j):
            assert position[(dep, tiler.DONE)] < position[(tile.index, tiler.RUNNING)]


def test_run_stage_failure_aborts_with_partial_canvas():
    grid = tiler.plan_grid(116, 32, 0.125)

    def fn(tile, known):
        if tile.index == (1, 1):
            raise ValueError("synthetic tile failure")
        img = NoiseStream(tile.seed).uniform((3, tile.size, tile.size))
        if not known.empty:
            img = np.where(known.mask[None], known.values, img)
        return img, False

    with pytest.raises(TileError) as err:
        tiler.run_stage(grid, 3, fn, workers=1)
    assert err.value.index == (1, 1)
    partial = err.value.partial_canvas
    # everything strictly before (1,1) in raster order was written
    done = [t for t in grid.tiles if t.status == tiler.DONE]
    assert {t.index for t in done} == {(0, 0), (0, 1), (0, 2), (0, 3), (1, 0)}
    assert (partial.writers > 0).any() and not partial.complete()
    # tiles after the failure never ran
    assert grid.tile(3, 3).status == tiler.PENDING


def test_event_log_round_trips_through_file(tmp_path):
    path = tmp_path / "events.log"
    grid = tiler.plan_grid(88, 32, 0.125)
    log = tiler.StageEventLog(str(path))
    tiler.run_stage(grid, 1, checker_tile_fn(1), workers=1, event_log=log)
    lines = path.read_text().strip().split("\n")
    assert lines == log.lines
    events = tiler.StageEventLog.parse(lines)
    assert len(events) == 3 * grid.n * grid.n
    times = [e["time"] for e in events]
    assert times == sorted(times)


# ---- white rule ----------------------------------------------------------

def test_is_white_patch_thresholds():
    white = np.full((3, 20, 20), 0.97)
    assert tiler.is_white_patch(white)
    # exactly 94% qualifying pixels fails the 95% bar
    img = np.full((3, 10, 10), 0.95)
    img[:, 0, :6] = 0.2
    assert np.mean(img.min(axis=0) > 0.85) == pytest.approx(0.94)
    assert not tiler.is_white_patch(img)
    # high min-channel fraction but murky mean fails
    dim = np.full((3, 10, 10), 0.86)
    assert not tiler.is_white_patch(dim)
    # one dark channel sinks the min-channel test even if the mean is high
    tinted = np.full((3, 10, 10), 0.99)
    tinted[0] = 0.5
    assert not tiler.is_white_patch(tinted)


def test_white_skip_still_feeds_neighbors():
    grid = tiler.plan_grid(60, 32, 0.125)  # 2x2
    seen = {}

    def fn(tile, known):
        seen[tile.index] = known.mask.copy()
        img = np.full((3, tile.size, tile.size), 0.99)
        if not known.empty:
            img = np.where(known.mask[None], known.values, img)
        return img, tile.index == (0, 0)

    canvas = tiler.run_stage(grid, 3, fn, workers=1)
    assert grid.tile(0, 0).status == tiler.SKIPPED_WHITE
    assert grid.tile(0, 1).status == tiler.DONE
    assert seen[(0, 1)].sum() == 32 * 4  # skipped tile still wrote its strip
    assert canvas.complete()
