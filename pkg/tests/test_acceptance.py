"""Acceptance gate: one test per published criterion, each with its budget.

The light criteria run standalone; everything that needs trained models hangs
off one session-scoped fixture that drives the real CLI through the full desk
recipe (25-pyramid corpus -> nine trained models -> a (32, 200, 1376) sample
-> metrics) exactly once. Every test appends a PASS/FAIL line with measured
numbers to RESULTS, which conftest prints in the terminal summary.
"""

import functools
import json
import os
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from tilecascade import cascade, cli, evalsvc, imageops, metrics, synthdata, tiler
from tilecascade.diffusion import (GaussianOracleModel, NoiseSchedule,
                                   sample_chain)
from tilecascade.numerics import layers as nl
from tilecascade.numerics.gradcheck import finite_diff_check
from tilecascade.numerics.store import ParamStore
from tilecascade.rng import NoiseStream, stable_hash
from tilecascade.scorenet import ScoreModel, ScoreNetConfig
from tilecascade.training import parse_loss_log

RESULTS: list[str] = []


def criterion(name, budget_s=None):
    """Record a pass/fail summary line and enforce the runtime budget."""
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            t0 = time.monotonic()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                RESULTS.append(f"[FAIL] {name}: {type(exc).__name__}")
                raise
            dt = time.monotonic() - t0
            line = f"[PASS] {name} ({dt:.1f}s"
            if detail:
                line += f"; {detail}"
            RESULTS.append(line + ")")
            if budget_s is not None:
                assert dt < budget_s, f"{name}: {dt:.1f}s over {budget_s}s budget"
        return wrapper
    return deco


# ---- published human-evaluation tallies: rater -> (TP, FP) ------------------

PATCH_TALLIES = {
    "rater-1": (250, 179),
    "rater-2": (106, 145),
    "rater-3": (29, 99),
    "non-expert": (110, 162),
}
WSI_TALLIES = {
    "rater-1": (61, 66),
    "rater-2": (152, 6),
    "rater-3": (28, 33),
    "rater-4": (47, 10),
    "non-expert": (29, 21),
}
PATCH_PRINTED = {
    "rater-1": 0.4172, "rater-2": 0.5777, "rater-3": 0.7734,
    "non-expert": 0.5956,
}
WSI_PRINTED = {
    "rater-1": 0.5197, "rater-2": 0.0380, "rater-3": 0.5410,
    "rater-4": 0.1754, "non-expert": 0.4200,
}


@criterion("Table reproduction (rater statistics)", budget_s=1.0)
def test_published_table_reproduction():
    patch = evalsvc.stats_from_tallies(PATCH_TALLIES)
    wsi = evalsvc.stats_from_tallies(WSI_TALLIES)
    for stats, printed in ((patch, PATCH_PRINTED), (wsi, WSI_PRINTED)):
        by_rater = {row["rater"]: row for row in stats["rows"]}
        for rater, p in printed.items():
            assert round(by_rater[rater]["p"], 4) == p, rater
    assert (patch["totals"]["tp"], patch["totals"]["fp"]) == (495, 585)
    assert round(patch["totals"]["pooled_p"], 4) == 0.5417
    assert abs(patch["totals"]["weighted_deviation"] - 0.1074) <= 0.0005
    assert (wsi["totals"]["tp"], wsi["totals"]["fp"]) == (317, 136)
    assert round(wsi["totals"]["pooled_p"], 4) == 0.3002
    assert abs(wsi["totals"]["weighted_deviation"] - 0.2219) <= 0.0005
    return "pooled p 0.5417 / 0.3002, deviations 0.1074 / 0.2219"


@criterion("Geometry fidelity (published grids)", budget_s=1.0)
def test_published_grid_geometry():
    for canvas, n in ((6400, 7), (41344, 46)):
        grid = tiler.plan_grid(canvas, 1024, 0.125)
        assert grid.n == n, (canvas, grid.n)
        assert len(grid.tiles) == n * n
        assert grid.stride == 896
        last = grid.tile(n - 1, n - 1)
        assert last.rect[0] + last.rect[2] == canvas  # grid reaches the edge
    return "6400 -> 7x7, 41344 -> 46x46 at patch 1024, overlap 0.125"


# ---- gradient correctness ----------------------------------------------------

def _check_chain(build):
    """finite_diff_check over a tiny two-layer chain built by ``build``."""
    store = ParamStore()
    stream = NoiseStream(17)
    chain, x, weights = build(store, stream)

    def fwd(cache=None):
        h = x
        for layer in chain:
            h = layer.forward(store, h, cache)
        return float(np.sum(weights * h))

    def forward_backward():
        cache = {}
        h = x
        for layer in chain:
            h = layer.forward(store, h, cache)
        loss = float(np.sum(weights * h))
        dy = weights.copy()
        for layer in reversed(chain):
            dy = layer.backward(store, cache, dy)
        return loss

    report = finite_diff_check(store, forward_backward, fwd,
                               max_coords_per_param=6, stream=NoiseStream(18))
    return report["max_rel_err"]


@criterion("Gradient correctness (layers + full net)", budget_s=120.0)
def test_gradients_every_layer_and_full_net():
    stream = NoiseStream(7)

    def conv_pair(store, rng, mid_layer=None):
        """conv3x3 -> optional parameter-free layer -> conv1x1 chain."""
        c1 = nl.Conv2d("c1", 2, 4, ksize=3)
        c2 = nl.Conv2d("c2", 4, 3, ksize=1)
        chain = [c1] + ([mid_layer] if mid_layer else []) + [c2]
        for layer in chain:
            layer.register(store, rng.split("init", layer.name))
        x = rng.split("x").normal((2, 2, 8, 8))
        weights = rng.split("w").normal((2, 3, 8, 8))
        return chain, x, weights

    worst = {}
    worst["conv3x3+conv1x1"] = _check_chain(lambda s, r: conv_pair(s, r))
    worst["silu"] = _check_chain(lambda s, r: conv_pair(s, r, nl.SiLU("act")))

    def with_pool(store, rng, mid, out_hw):
        c1 = nl.Conv2d("c1", 2, 4, ksize=3)
        chain = [c1, mid]
        for layer in chain:
            layer.register(store, rng.split("init", layer.name))
        x = rng.split("x").normal((2, 2, 8, 8))
        weights = rng.split("w").normal((2, 4, out_hw, out_hw))
        return chain, x, weights

    worst["avgpool2"] = _check_chain(
        lambda s, r: with_pool(s, r, nl.AvgPool2("pool"), 4))
    worst["upsample2"] = _check_chain(
        lambda s, r: with_pool(s, r, nl.UpsampleNearest2("up"), 16))

    def norm_chain(store, rng):
        c1 = nl.Conv2d("c1", 2, 4, ksize=3)
        gn = nl.GroupNorm("gn", 4, 2)
        for layer in (c1, gn):
            layer.register(store, rng.split("init", layer.name))
        x = rng.split("x").normal((2, 2, 8, 8))
        weights = rng.split("w").normal((2, 4, 8, 8))
        return [c1, gn], x, weights

    worst["groupnorm"] = _check_chain(norm_chain)

    def dense_chain(store, rng):
        d1 = nl.Dense("d1", 5, 7)
        d2 = nl.Dense("d2", 7, 3)
        for layer in (d1, d2):
            layer.register(store, rng.split("init", layer.name))
        x = rng.split("x").normal((4, 5))
        weights = rng.split("w").normal((4, 3))
        return [d1, d2], x, weights

    worst["dense"] = _check_chain(dense_chain)

    # full score network at the 8x8 config, with conditioning and mask inputs
    config = ScoreNetConfig(resolution=8, width=8, cond_images=1,
                            mask_channels=True)
    model = ScoreModel(config, NoiseSchedule.cosine(25), "epsilon", seed=3)
    for name in model.store.names():
        model.store.params[name] += 0.05 * stream.split(name).normal(
            model.store.params[name].shape)
    x_in = NoiseStream(10).normal((2, config.in_channels, 8, 8))
    t = np.array([4, 17])
    target_out = NoiseStream(11).normal((2, 3, 8, 8))
    report = finite_diff_check(
        model.store,
        lambda: model.loss_and_grads(x_in, t, target_out),
        lambda: model.loss_only(x_in, t, target_out),
        max_coords_per_param=4, stream=NoiseStream(12))
    worst["score-net"] = report["max_rel_err"]

    for name, err in worst.items():
        assert err < 1e-4, (name, err)
    peak = max(worst.values())
    return f"max rel err {peak:.2e} over {len(worst)} checks"


@criterion("Sampler vs analytic oracle (2000 images)", budget_s=120.0)
def test_sampler_statistics_match_oracle():
    mu, s = 0.1, 0.8
    sched = NoiseSchedule.cosine(250)
    model = GaussianOracleModel(sched, (1, 4, 4), mu, s)
    samples = np.empty((2000, 16))
    for k in range(2000):
        out = sample_chain(model, (1, 4, 4),
                           NoiseStream(stable_hash("oracle-stats", k)),
                           clip_x0=None)
        samples[k] = out.reshape(-1)
    flat = samples.reshape(-1)
    se = s / np.sqrt(flat.size)
    mean_err = abs(float(flat.mean()) - mu)
    var_ratio = float(flat.var()) / (s * s)
    assert mean_err < 4 * se, (mean_err, 4 * se)
    assert 0.9 < var_ratio < 1.1, var_ratio
    return f"mean err {mean_err:.4f} (4SE {4 * se:.4f}), var ratio {var_ratio:.3f}"


# ---- tiling: seams, constraints, white rule ---------------------------------

def _oracle_cdm(mu=0.2, s=0.05, t_steps=40):
    sched = NoiseSchedule.cosine(t_steps)
    mk = lambda: GaussianOracleModel(sched, (3, 1, 1), mu, s)  # noqa: E731
    return cascade.CDMSpec(mk(), mk(), mk(), 8, 16, 32)


@criterion("Inpainting and seam exactness (4x4 grid)", budget_s=10.0)
def test_seams_bit_exact_and_full_constraint_returned():
    cdm = _oracle_cdm()
    prev_canvas = NoiseStream(41).uniform((3, 60, 60)) * 0.5  # nowhere white
    grid = tiler.plan_grid(116, 32, 0.125, stage=3, global_seed=5)
    assert grid.n == 4
    fn = cascade.make_tile_fn(cdm, prev_canvas, 116, substitute_white=False,
                              clip_x0=(-1.0, 1.0))
    outputs = {}

    def recording(tile, known):
        img, skipped = fn(tile, known)
        outputs[tile.index] = img
        return img, skipped

    canvas = tiler.run_stage(grid, 3, recording, workers=2)
    assert canvas.complete()

    # every multiply-covered pixel: all writers produced identical bytes
    checked = 0
    tiles = list(outputs)
    for a in range(len(tiles)):
        for b in range(a + 1, len(tiles)):
            (ya, xa, h, w), (yb, xb, _, _) = (grid.tile(*tiles[a]).rect,
                                              grid.tile(*tiles[b]).rect)
            y0, y1 = max(ya, yb), min(ya + h, yb + h)
            x0, x1 = max(xa, xb), min(xa + w, xb + w)
            if y0 >= y1 or x0 >= x1:
                continue
            img_a = outputs[tiles[a]][:, y0 - ya:y1 - ya, x0 - xa:x1 - xa]
            img_b = outputs[tiles[b]][:, y0 - yb:y1 - yb, x0 - xb:x1 - xb]
            assert np.array_equal(img_a, img_b), (tiles[a], tiles[b])
            checked += img_a[0].size
    assert checked > 0

    # a fully constrained tile comes back as exactly its constraint
    mask = np.ones((32, 32), dtype=bool)
    values = NoiseStream(42).uniform((3, 32, 32))
    ctx = cascade.center_context_crop(prev_canvas, (10.0, 10.0, 8.0, 8.0))
    out = cascade.run_cdm(cdm, NoiseStream(43), context=ctx,
                          known=tiler.KnownRegion(mask, values))
    assert np.array_equal(out, values)
    return f"{checked} overlap pixels byte-equal, constrained tile exact"


@criterion("Metric closed forms + brute-force IP/IR", budget_s=60.0)
def test_metric_closed_forms_and_bruteforce_oracle():
    # mean-shift case: equal covariances leave only the squared distance
    d = 5
    cov = np.diag(np.linspace(0.5, 2.0, d))
    m1 = np.zeros(d)
    m2 = np.linspace(-1.0, 1.0, d)
    a = metrics.FeatureMoments(mean=m1, cov=cov, count=100)
    b = metrics.FeatureMoments(mean=m2, cov=cov, count=100)
    want = float(m2 @ m2)
    assert abs(metrics.frechet_distance(a, b) - want) < 1e-8

    # anisotropic diagonal case
    va = np.linspace(0.2, 1.4, d)
    vb = np.linspace(0.8, 0.3, d)
    a = metrics.FeatureMoments(mean=m1, cov=np.diag(va), count=100)
    b = metrics.FeatureMoments(mean=m2, cov=np.diag(vb), count=100)
    want = float(m2 @ m2 + np.sum(va + vb - 2.0 * np.sqrt(va * vb)))
    assert abs(metrics.frechet_distance(a, b) - want) < 1e-8

    # IP/IR against a brute-force pairwise oracle on <= 100 points
    stream = NoiseStream(55)
    real = stream.split("real").normal((60, 6))
    gen = stream.split("gen").normal((80, 6))
    k = 3

    def brute_fraction(support, radii_of, queries):
        hits = 0
        for q in queries:
            dist = np.sqrt(np.sum((support - q) ** 2, axis=1))
            if np.any(dist <= radii_of):
                hits += 1
        return hits / len(queries)

    def brute_radii(points):
        out = np.empty(len(points))
        for i, p in enumerate(points):
            dist = np.sort(np.sqrt(np.sum((points - p) ** 2, axis=1)))
            out[i] = dist[k]  # dist[0] is the point itself
        return out

    ip = metrics.improved_precision(real, gen, k=k)
    ir = metrics.improved_recall(real, gen, k=k)
    assert ip == pytest.approx(brute_fraction(real, brute_radii(real), gen), abs=1e-12)
    assert ir == pytest.approx(brute_fraction(gen, brute_radii(gen), real), abs=1e-12)

    # identical distinct sets -> 1.0; far-separated sets -> 0.0
    assert metrics.improved_precision(real, real.copy(), k=k) == 1.0
    assert metrics.improved_recall(real, real.copy(), k=k) == 1.0
    span = 10.0 * max(brute_radii(real).max(), brute_radii(gen).max())
    far = gen + 10.0 * span
    assert metrics.improved_precision(real, far, k=k) == 0.0
    assert metrics.improved_recall(real, far, k=k) == 0.0
    return f"IP/IR equal brute force (ip {ip:.3f}, ir {ir:.3f})"


# ---- the end-to-end desk run -------------------------------------------------

DESK_SIZES = (32, 200, 1376)
TRAIN_WIDTH = "8"   # tiny models: full schedule (T=250), narrow network
# v-prediction keeps tiny 2000-step models' sample statistics on the data
# manifold (epsilon at this size drifts dark and never triggers white skips)
TRAIN_TARGET = "v"


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Full CLI pipeline at desk scale, once per session."""
    root = tmp_path_factory.mktemp("desk")
    corpus = str(root / "corpus")
    models = str(root / "models")
    sample = str(root / "sample")
    timings = {}

    def run(label, args):
        t0 = time.monotonic()
        code = cli.main(args)
        timings[label] = time.monotonic() - t0
        assert code == 0, f"{label} exited {code}"

    run("dataset-gen", ["dataset-gen", "--out", corpus, "--count", "25",
                        "--seed", "0"])
    for stage in ("low", "mid", "high"):
        for slot in ("base", "sr1", "sr2"):
            run(f"train-{stage}-{slot}",
                ["train", "--data", corpus, "--out", models,
                 "--stage", stage, "--slot", slot, "--steps", "2000",
                 "--width", TRAIN_WIDTH, "--target", TRAIN_TARGET])
    run("sample", ["sample", "--models", models, "--out", sample,
                   "--seed", "1", "--dump-float"])

    noise_dir = str(root / "noise")
    stream = NoiseStream(777)
    levels = [stream.split("level", k).uniform((3, s, s))
              for k, s in enumerate(DESK_SIZES)]
    synthdata.save_pyramid(
        os.path.join(noise_dir, "noise_000000"),
        synthdata.ImagePyramid(slide_id="noise_000000", levels=levels, seed=777))

    m_gen = str(root / "m_gen")
    m_noise = str(root / "m_noise")
    run("metrics-gen", ["metrics", "--real", corpus,
                        "--gen", os.path.join(sample, "pyramid"),
                        "--out", m_gen, "--metrics", "pfid"])
    run("metrics-noise", ["metrics", "--real", corpus, "--gen", noise_dir,
                          "--out", m_noise, "--metrics", "pfid"])
    return {"corpus": corpus, "models": models, "sample": sample,
            "m_gen": m_gen, "m_noise": m_noise, "timings": timings}


@criterion("End-to-end desk run", budget_s=None)
def test_end_to_end_desk_run(desk_run):
    total = sum(desk_run["timings"].values())
    assert total < 90 * 60, f"pipeline took {total / 60:.1f} min"

    # smoothed training loss decreasing for every slot
    for stage in ("low", "mid", "high"):
        for slot in ("base", "sr1", "sr2"):
            path = os.path.join(desk_run["models"], f"{stage}_{slot}_loss.csv")
            with open(path, encoding="utf-8") as fh:
                history = parse_loss_log(fh.read())
            loss = np.array([row["loss"] for row in history])
            assert len(loss) == 2000
            head, tail = loss[:100].mean(), loss[-100:].mean()
            assert tail < head, (stage, slot, head, tail)

    pfid_gen = metrics.read_report(
        os.path.join(desk_run["m_gen"], "metrics_report"))[0]["pfid"]
    pfid_noise = metrics.read_report(
        os.path.join(desk_run["m_noise"], "metrics_report"))[0]["pfid"]
    assert pfid_gen < pfid_noise / 2.0, (pfid_gen, pfid_noise)
    return (f"{total / 60:.1f} min, pFID gen {pfid_gen:.1f} "
            f"vs noise {pfid_noise:.1f}")


@criterion("White-patch rule on the desk sample", budget_s=60.0)
def test_white_patch_rule_on_desk_sample(desk_run):
    # premise: the corpus really is >= 30% white background
    ds_values = metrics.read_report(
        os.path.join(desk_run["corpus"], "dataset_report"))[0]
    assert ds_values["background_fraction_mean"] >= 0.30

    values, meta = metrics.read_report(
        os.path.join(desk_run["sample"], "sample_report"))
    with open(os.path.join(desk_run["sample"], "events_stage3.log"),
              encoding="utf-8") as fh:
        events = tiler.StageEventLog.parse(fh.read().splitlines())
    skipped = sorted({e["tile"] for e in events
                      if e["transition"] == tiler.SKIPPED_WHITE})
    assert len(skipped) >= 1
    assert values["stage3_skipped_white"] == len(skipped)

    level1 = np.load(os.path.join(desk_run["sample"], "level1.npy"))
    level2 = np.load(os.path.join(desk_run["sample"], "level2.npy"))
    grid = tiler.plan_grid(DESK_SIZES[2], 32, 0.125, stage=3,
                           global_seed=meta["seed"])
    strip = grid.patch - grid.stride
    for (i, j) in skipped:
        y0, x0, h, w = grid.tile(i, j).rect
        oracle = imageops.bilinear_window(level1, y0, x0, grid.patch,
                                          grid.canvas)
        fresh = np.ones((h, w), dtype=bool)   # pixels this tile owned outright
        if i > 0:
            fresh[:strip, :] = False
        if j > 0:
            fresh[:, :strip] = False
        got = level2[:, y0:y0 + h, x0:x0 + w]
        assert np.array_equal(got[:, fresh], oracle[:, fresh]), (i, j)
    return f"{len(skipped)} of {values['stage3_tiles']} stage-3 tiles skipped"


@criterion("Parallel determinism (workers 1 vs 4)", budget_s=600.0)
def test_workers_1_and_4_byte_identical(desk_run, tmp_path):
    outs = {}
    for workers in ("1", "4"):
        out = str(tmp_path / f"w{workers}")
        code = cli.main(["sample", "--models", desk_run["models"],
                         "--out", out, "--seed", "5",
                         "--sizes", "32,60,116", "--workers", workers,
                         "--dump-float"])
        assert code == 0
        outs[workers] = out
    for k in range(3):
        a = np.load(os.path.join(outs["1"], f"level{k}.npy"))
        b = np.load(os.path.join(outs["4"], f"level{k}.npy"))
        assert np.array_equal(a, b), f"level {k} differs"
    # the stored pyramids match byte for byte as well
    pyr_a, pyr_b = (os.path.join(outs[w], "pyramid") for w in ("1", "4"))
    files = []
    for base, _, names in os.walk(pyr_a):
        rel = os.path.relpath(base, pyr_a)
        files += [os.path.normpath(os.path.join(rel, n)) for n in names]
    assert files
    for rel in files:
        with open(os.path.join(pyr_a, rel), "rb") as fa, \
                open(os.path.join(pyr_b, rel), "rb") as fb:
            assert fa.read() == fb.read(), rel
    return f"{len(files)} pyramid files byte-identical on a 4x4 grid"


# ---- secondary: scripted perception-study session ---------------------------

@criterion("[secondary] scripted 20-trial study session", budget_s=120.0)
def test_scripted_session_replay_blinding_and_dupes(tmp_path):
    real = [synthdata.gen_pyramid(k, sizes=(8, 48, 96)) for k in range(3)]
    gen = [synthdata.gen_pyramid(50 + k, sizes=(8, 48, 96)) for k in range(3)]
    pools = evalsvc.build_pools(real, gen)
    store = evalsvc.StudyStore(pools, str(tmp_path / "judgments.jsonl"),
                               server_seed=11)
    client = TestClient(evalsvc.create_app(store))

    created = client.post("/sessions", json={
        "rater": "scripted", "condition": "patch-level", "seed": 9,
        "n_trials": 20})
    assert created.status_code == 200
    sid = created.json()["session_id"]
    blinded_keys = {"trial_id", "left_image_url", "right_image_url",
                    "magnification"}
    trials = 0
    first_trial_id = None
    while True:
        trial = client.get(f"/sessions/{sid}/next").json()
        if trial.get("done"):
            break
        assert set(trial) == blinded_keys
        assert "real" not in json.dumps(trial)
        if first_trial_id is None:
            first_trial_id = trial["trial_id"]
        reply = client.post(f"/sessions/{sid}/judgments", json={
            "trial_id": trial["trial_id"],
            "chosen": "left" if trials % 3 else "right"})
        assert reply.status_code == 200
        assert "correct" not in reply.json()
        trials += 1
    assert trials == 20

    served = client.get("/stats", params={"condition": "patch-level"}).json()
    # replaying the on-disk log reproduces the served table exactly
    reborn = evalsvc.StudyStore(pools, store.log_path, server_seed=11)
    assert {**reborn.stats("patch-level"), "condition": "patch-level"} == served

    # double submission: rejected, and exactly one judgment stays recorded
    dup = client.post(f"/sessions/{sid}/judgments", json={
        "trial_id": first_trial_id, "chosen": "right"})
    assert dup.status_code == 409
    records = store.read_log()
    assert sum(1 for r in records if r["trial"] == first_trial_id) == 1
    assert len(records) == 20
    assert client.get("/stats", params={"condition": "patch-level"}).json() \
        == served
    return "20 trials, replay == served table, duplicate rejected"
