"""Procedural corpus: determinism, level consistency, background band,
pyramid store round-trips, manifest strictness, and training-set extraction."""

import numpy as np
import pytest

from tilecascade import imageops, synthdata, tiler
from tilecascade.errors import DatasetError

SMALL = (8, 48, 96)  # fast stand-in sizes for store/extraction tests


@pytest.fixture(scope="module")
def pyramid():
    return synthdata.gen_pyramid(3, sizes=SMALL)


def white_pyramid(sizes=SMALL):
    levels = [np.ones((3, s, s)) for s in sizes]
    return synthdata.ImagePyramid(slide_id="white", levels=levels, seed=0)


# ---- generation ------------------------------------------------------------

def test_gen_pyramid_deterministic():
    a = synthdata.gen_pyramid(11, sizes=SMALL)
    b = synthdata.gen_pyramid(11, sizes=SMALL)
    for x, y in zip(a.levels, b.levels):
        assert x.tobytes() == y.tobytes()
    c = synthdata.gen_pyramid(12, sizes=SMALL)
    assert a.levels[2].tobytes() != c.levels[2].tobytes()


def test_gen_pyramid_values_and_shapes(pyramid):
    assert pyramid.sizes == SMALL
    for lvl in pyramid.levels:
        assert lvl.min() >= 0.0 and lvl.max() <= 1.0


def test_level_consistency_by_area_downsampling(pyramid):
    # area-downsampling level l reproduces level l-1 (exact by construction
    # here; the invariant allows 0.1 per pixel after storage quantization)
    for fine, coarse in ((2, 1), (1, 0)):
        size = pyramid.levels[coarse].shape[1]
        down = imageops.resize_box(pyramid.levels[fine], size, size)
        assert np.abs(down - pyramid.levels[coarse]).max() < 0.1


# measured once over seeds 0..99 at the default sizes
MEASURED_BACKGROUND_BAND = (0.2947, 0.5365)


def test_background_fraction_band_default_sizes():
    lo, hi = synthdata.BACKGROUND_FRACTION_RANGE
    assert (lo, hi) == (0.20, 0.60)
    assert lo < MEASURED_BACKGROUND_BAND[0] and MEASURED_BACKGROUND_BAND[1] < hi
    for seed in (0, 17, 63):
        frac = synthdata.background_fraction(synthdata.gen_pyramid(seed))
        assert MEASURED_BACKGROUND_BAND[0] - 0.05 < frac < MEASURED_BACKGROUND_BAND[1] + 0.05


# ---- store -----------------------------------------------------------------

def test_pyramid_store_roundtrip(tmp_path, pyramid):
    root = tmp_path / pyramid.slide_id
    synthdata.save_pyramid(str(root), pyramid)
    loaded = synthdata.load_pyramid(str(root))
    assert loaded.slide_id == pyramid.slide_id
    assert loaded.seed == pyramid.seed
    assert loaded.sizes == pyramid.sizes
    for orig, back in zip(pyramid.levels, loaded.levels):
        assert np.abs(orig - back).max() <= 0.5 / 255 + 1e-12


def test_pyramid_store_tiles_large_levels(tmp_path):
    pyr = synthdata.gen_pyramid(1, sizes=(8, 48, 520))
    root = tmp_path / "p"
    synthdata.save_pyramid(str(root), pyr)
    # 520 = 2*256 + 8 -> 3x3 tile grid at the finest level
    assert (root / "tile_2_2_2.png").exists()
    assert not (root / "tile_2_3_0.png").exists()
    assert (root / "tile_0_0_0.png").exists()
    loaded = synthdata.load_pyramid(str(root))
    assert np.abs(loaded.levels[2] - pyr.levels[2]).max() <= 0.5 / 255 + 1e-12


def test_save_load_is_idempotent_in_bytes(tmp_path, pyramid):
    a_root, b_root = tmp_path / "a", tmp_path / "b"
    synthdata.save_pyramid(str(a_root), pyramid)
    loaded = synthdata.load_pyramid(str(a_root))
    synthdata.save_pyramid(str(b_root), loaded)
    for name in sorted(p.name for p in a_root.iterdir()):
        assert (a_root / name).read_bytes() == (b_root / name).read_bytes()


def test_list_pyramids(tmp_path, pyramid):
    synthdata.save_pyramid(str(tmp_path / "b_slide"), pyramid)
    synthdata.save_pyramid(str(tmp_path / "a_slide"), pyramid)
    (tmp_path / "not_a_pyramid").mkdir()
    roots = synthdata.list_pyramids(str(tmp_path))
    assert [r.split("/")[-1] for r in roots] == ["a_slide", "b_slide"]
    with pytest.raises(DatasetError):
        synthdata.list_pyramids(str(tmp_path / "missing"))


def test_list_pyramids_accepts_a_single_pyramid_root(tmp_path, pyramid):
    root = tmp_path / "sampled"
    synthdata.save_pyramid(str(root), pyramid)
    assert synthdata.list_pyramids(str(root)) == [str(root)]


def test_manifest_strict_parsing(tmp_path, pyramid):
    root = tmp_path / "p"
    synthdata.save_pyramid(str(root), pyramid)
    manifest = root / synthdata.MANIFEST_NAME

    text = manifest.read_text()
    manifest.write_text(text.replace("seed:", "sed:"))
    with pytest.raises(DatasetError, match="seed"):
        synthdata.load_pyramid(str(root))

    manifest.write_text(text.replace(f"seed: {pyramid.seed}", "seed: soup"))
    with pytest.raises(DatasetError, match="seed"):
        synthdata.load_pyramid(str(root))

    manifest.write_text(text + "???\n")
    with pytest.raises(DatasetError, match="malformed"):
        synthdata.load_pyramid(str(root))

    manifest.write_text(text)
    (root / "tile_1_0_0.png").unlink()
    with pytest.raises(DatasetError, match="tile_1_0_0"):
        synthdata.load_pyramid(str(root))


# ---- extraction ------------------------------------------------------------

def test_extract_low_stage_whole_images():
    pyrs = [synthdata.gen_pyramid(s, sizes=(32, 64, 128)) for s in range(3)]
    examples = synthdata.extract_training_set(pyrs, "low")
    assert len(examples) == 3
    for ex, pyr in zip(examples, pyrs):
        assert ex.level == 0 and ex.context is None
        assert np.array_equal(ex.target, pyr.levels[0])


def test_extract_mid_stage_crops_with_context():
    pyrs = [synthdata.gen_pyramid(s, sizes=(32, 96, 192)) for s in range(2)]
    examples = synthdata.extract_training_set(pyrs, "mid", count=8, seed=5)
    assert len(examples) == 8
    for ex in examples:
        assert ex.level == 1
        assert ex.target.shape == (3, 32, 32)
        assert ex.context.shape == (3, 32, 32)
        assert not tiler.is_white_patch(ex.target)


def test_extract_deterministic_given_seed():
    pyrs = [synthdata.gen_pyramid(s, sizes=(32, 96, 192)) for s in range(2)]
    a = synthdata.extract_training_set(pyrs, "high", count=6, seed=9)
    b = synthdata.extract_training_set(pyrs, "high", count=6, seed=9)
    assert [x.rect for x in a] == [x.rect for x in b]
    for x, y in zip(a, b):
        assert x.target.tobytes() == y.target.tobytes()
    c = synthdata.extract_training_set(pyrs, "high", count=6, seed=10)
    assert [x.rect for x in a] != [x.rect for x in c]


def test_extract_geometric_consistency_with_context():
    pyrs = [synthdata.gen_pyramid(4, sizes=(32, 96, 192))]
    examples = synthdata.extract_training_set(pyrs, "mid", count=6, seed=1)
    for ex in examples:
        y0, x0, p, _ = ex.rect
        scale = 96 / 32
        # footprint of the target inside the context window
        fy = y0 / scale
        fx = x0 / scale
        top = int(np.floor(fy + p / scale / 2 - 16 + 0.5))
        left = int(np.floor(fx + p / scale / 2 - 16 + 0.5))
        m = 4
        fp_in_ctx = (fy - top, fx - left, p / scale, p / scale)
        ctx_patch = imageops.box_rect(ex.context, fp_in_ctx, m, m)
        tgt_down = imageops.resize_box(ex.target, m, m)
        assert np.abs(ctx_patch - tgt_down).max() < 0.1


def test_extract_white_pyramid_yields_nothing():
    with pytest.raises(DatasetError, match="non-white"):
        synthdata.extract_training_set([white_pyramid()], "mid", count=4)
    with pytest.raises(DatasetError, match="non-white"):
        synthdata.extract_training_set([white_pyramid()], "low")


def test_extract_rejects_unknown_stage():
    with pytest.raises(DatasetError):
        synthdata.extract_training_set([white_pyramid()], "ultra")
