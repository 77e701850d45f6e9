"""Operator entry point tying the pipeline together.

Subcommands cover the whole experiment loop: generate a synthetic pyramid
corpus (dataset-gen), train the nine cascade models one slot at a time
(train), sample a full multi-resolution image through the tiler (sample),
score a generated corpus against a real one (metrics), serve the blinded
perception study (eval-serve), and print tile-grid geometry (plan).

Every option can also come from a JSON config file; the schema is strict
(unknown keys and wrongly typed values are rejected before any work starts)
and explicit command-line flags override file values. The fully resolved
configuration is written as a JSON snapshot next to every artifact a run
produces, and that snapshot is itself a valid --config file, so any artifact
can be regenerated bit-exactly from the snapshot sitting beside it.

Environment overrides: TILECASCADE_OUT_ROOT prefixes relative output paths;
TILECASCADE_LOG_LEVEL sets the stderr log level. Exit codes: 0 success,
2 validation/config error, 3 numeric abort, 4 I/O error.
"""

import os

# The pipeline parallelizes across tiles, not inside BLAS calls; pin the
# thread pools before numpy gets imported so worker threads do not fight.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import cascade, imageops, metrics, synthdata, tiler
from .diffusion import NoiseSchedule
from .errors import CheckpointError, ConfigError, DatasetError, TileCascadeError, exit_code_for
from .numerics.store import AdamState
from .rng import NoiseStream, stable_hash
from .scorenet import ScoreModel, ScoreNetConfig
from .training import SlotData, format_loss_log, train_model

log = logging.getLogger("tilecascade")

# one patch cascade is always base -> sr1 -> sr2 at these resolutions
CASCADE_RESOLUTIONS = (8, 16, 32)
SLOTS = ("base", "sr1", "sr2")
STAGES = synthdata.STAGES

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


# ---- config schema ----------------------------------------------------------

@dataclass(frozen=True)
class Opt:
    """One subcommand option: drives both argparse and config validation."""
    name: str
    kind: str = "str"           # str | int | float | bool | choice | ints | floats
    default: object = None
    required: bool = False
    choices: tuple = ()
    help: str = ""


SCHEMAS = {
    "dataset-gen": (
        Opt("out", "str", required=True, help="corpus output directory"),
        Opt("count", "int", 25, help="number of pyramids to generate"),
        Opt("seed", "int", 0, help="seed of the first pyramid"),
        Opt("sizes", "ints", (32, 200, 1376),
            help="comma list of the three level sizes"),
    ),
    "train": (
        Opt("data", "str", required=True, help="pyramid corpus directory"),
        Opt("out", "str", required=True, help="checkpoint output directory"),
        Opt("stage", "choice", required=True, choices=STAGES,
            help="which cascade to train"),
        Opt("slot", "choice", required=True, choices=SLOTS,
            help="which model of the cascade to train"),
        Opt("steps", "int", 2000, help="optimizer steps"),
        Opt("batch_size", "int", 8, help="examples per step"),
        Opt("lr", "float", 1e-3, help="Adam learning rate"),
        Opt("width", "int", 16, help="network base width"),
        Opt("t_steps", "int", 250, help="diffusion steps T"),
        Opt("target", "choice", "epsilon", choices=("epsilon", "v"),
            help="prediction target"),
        Opt("examples", "int", None,
            help="training examples to extract (default: stage-dependent)"),
        Opt("seed", "int", 0, help="init/extraction/training seed"),
    ),
    "sample": (
        Opt("models", "str", help="directory holding the nine checkpoints"),
        Opt("out", "str", help="output directory"),
        Opt("seed", "int", 0, help="generation seed"),
        Opt("workers", "int", 1, help="parallel tile workers"),
        Opt("sizes", "ints", (32, 200, 1376),
            help="comma list of the three stage canvas sizes"),
        Opt("overlap", "float", 0.125, help="tile overlap fraction"),
        Opt("white_skip", "bool", True,
            help="substitute bilinear upscales for white tiles"),
        Opt("dry_run", "bool", False,
            help="print the tile plan and exit without sampling"),
        Opt("dump_float", "bool", False,
            help="also write each stage canvas as a float64 .npy"),
    ),
    "metrics": (
        Opt("real", "str", required=True, help="real corpus directory"),
        Opt("gen", "str", required=True, help="generated corpus directory"),
        Opt("out", "str", required=True, help="report output directory"),
        Opt("level", "int", 2, help="pyramid level to evaluate"),
        Opt("crop_count", "int", 200, help="pFID crop budget"),
        Opt("scales", "floats", (1.0, 0.5, 0.25),
            help="comma list of pFID crop scales"),
        Opt("k", "int", 3, help="k for precision/recall manifolds"),
        Opt("seed", "int", 0, help="crop plan and feature-extractor seed"),
        Opt("metrics", "str", "pfid,fid,improved_precision,improved_recall",
            help="comma list of metrics to compute"),
    ),
    "eval-serve": (
        Opt("real", "str", required=True, help="real corpus directory"),
        Opt("gen", "str", required=True, help="generated corpus directory"),
        Opt("host", "str", "127.0.0.1", help="bind address"),
        Opt("port", "int", 8765, help="bind port"),
        Opt("seed", "int", 0, help="server seed for refs and trial plans"),
        Opt("log", "str", "judgments.jsonl", help="judgment log path"),
    ),
    "plan": (
        Opt("canvas", "ints", (200, 1376), help="comma list of canvas sizes"),
        Opt("patch", "int", 32, help="tile size"),
        Opt("overlap", "float", 0.125, help="tile overlap fraction"),
    ),
}

HELP = {
    "dataset-gen": "generate a synthetic pyramid corpus",
    "train": "train one cascade model slot",
    "sample": "sample a full pyramid through the tiler",
    "metrics": "score a generated corpus against a real one",
    "eval-serve": "serve the blinded perception study over HTTP",
    "plan": "print tile-grid geometry without doing any work",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tilecascade",
        description="tiled cascaded-diffusion pipeline driver")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in SCHEMAS.items():
        p = sub.add_parser(cmd, help=HELP[cmd])
        p.add_argument("--config", default=None,
                       help="JSON config file; explicit flags override it")
        for opt in opts:
            flag = "--" + opt.name.replace("_", "-")
            shown = opt.default if opt.default is not None else "none"
            help_text = f"{opt.help} (default: {shown})"
            if opt.kind == "bool":
                p.add_argument(flag, action=argparse.BooleanOptionalAction,
                               default=None, help=help_text)
            elif opt.kind == "choice":
                p.add_argument(flag, choices=opt.choices, default=None,
                               help=help_text)
            elif opt.kind in ("ints", "floats"):
                p.add_argument(flag, default=None, metavar="LIST",
                               help=help_text)
            else:
                cast = {"str": str, "int": int, "float": float}[opt.kind]
                p.add_argument(flag, type=cast, default=None, help=help_text)
    return parser


def _coerce(opt: Opt, value, source: str):
    """Validate one config value against its Opt; strict about types."""
    def bad(wanted):
        raise ConfigError(f"{source}: option '{opt.name}' must be {wanted}, "
                          f"got {value!r}")

    if opt.kind == "bool":
        if not isinstance(value, bool):
            bad("true or false")
        return value
    if opt.kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            bad("an integer")
        return int(value)
    if opt.kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            bad("a number")
        return float(value)
    if opt.kind == "choice":
        if value not in opt.choices:
            bad(f"one of {list(opt.choices)}")
        return value
    if opt.kind in ("ints", "floats"):
        cast = int if opt.kind == "ints" else float
        if isinstance(value, str):
            parts = [p.strip() for p in value.split(",") if p.strip()]
            try:
                return tuple(cast(p) for p in parts)
            except ValueError:
                bad(f"a comma list of {opt.kind}")
        if isinstance(value, (list, tuple)):
            for v in value:
                if isinstance(v, bool) or not isinstance(
                        v, (int,) if opt.kind == "ints" else (int, float)):
                    bad(f"a list of {opt.kind}")
            return tuple(cast(v) for v in value)
        bad(f"a comma list of {opt.kind}")
    if not isinstance(value, str):
        bad("a string")
    return value


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then config-file values, then explicit flags; validate."""
    opts = {o.name: o for o in SCHEMAS[command]}
    resolved = {name: o.default for name, o in opts.items()}
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{config_path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{config_path} must hold a JSON object")
        unknown = sorted(set(data) - set(opts))
        if unknown:
            raise ConfigError(f"{config_path}: unknown config key(s) {unknown}")
        for key, value in data.items():
            if value is None:
                continue  # null means "leave the default"
            resolved[key] = _coerce(opts[key], value, config_path)
    for name, opt in opts.items():
        value = getattr(args, name)
        if value is not None:
            resolved[name] = _coerce(opt, value, "command line")
    missing = sorted(n for n, o in opts.items()
                     if o.required and resolved[n] is None)
    if missing:
        raise ConfigError(f"{command}: missing required option(s) {missing}")
    return resolved


def resolve_out(path: str) -> str:
    """Apply the TILECASCADE_OUT_ROOT prefix to relative output paths."""
    root = os.environ.get("TILECASCADE_OUT_ROOT", "")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def write_snapshot(directory: str, filename: str, cfg: dict) -> str:
    """The resolved config as JSON; reusable directly via --config."""
    payload = {k: list(v) if isinstance(v, tuple) else v
               for k, v in sorted(cfg.items())}
    path = os.path.join(directory, filename)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def configure_logging() -> None:
    name = os.environ.get("TILECASCADE_LOG_LEVEL", "INFO").upper()
    if name not in LOG_LEVELS:
        raise ConfigError(f"TILECASCADE_LOG_LEVEL must be one of "
                          f"{list(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(getattr(logging, name))


# ---- model wiring -----------------------------------------------------------

def model_config_for(stage: str, slot: str, width: int = 16) -> ScoreNetConfig:
    """Network shape for one cascade slot.

    SR slots condition on the upsampled previous output; mid/high stages add
    the context window from the coarser canvas; the final SR slot of the
    tiled stages also carries inpainting mask channels, because that is where
    tile overlaps are enforced at full patch resolution.
    """
    if stage not in STAGES or slot not in SLOTS:
        raise ConfigError(f"unknown stage/slot {stage!r}/{slot!r}")
    res = CASCADE_RESOLUTIONS[SLOTS.index(slot)]
    has_context = stage != "low"
    cond = (0 if slot == "base" else 1) + (1 if has_context else 0)
    return ScoreNetConfig(resolution=res, width=width, channels=3,
                          cond_images=cond,
                          mask_channels=(slot == "sr2" and has_context))


def build_slot_data(examples: list, slot: str) -> SlotData:
    """Training arrays for one slot from extracted examples.

    The clean target is the example area-downsampled to the slot resolution.
    SR slots condition on the bilinear upsampling of the next-coarser
    downsample (standing in for the previous stage's output at sampling
    time); mid/high examples append their context window, resized to the
    slot resolution exactly as the sampler does.
    """
    order = SLOTS.index(slot)
    res = CASCADE_RESOLUTIONS[order]
    xs, prevs, ctxs = [], [], []
    for ex in examples:
        target = ex.target
        if target.shape[1] != res:
            target = np.clip(imageops.resize_box(target, res, res), 0.0, 1.0)
        xs.append(target)
        if order > 0:
            coarse_res = CASCADE_RESOLUTIONS[order - 1]
            coarse = np.clip(imageops.resize_box(ex.target, coarse_res,
                                                 coarse_res), 0.0, 1.0)
            prevs.append(imageops.resize_bilinear(coarse, res, res))
        if ex.context is not None:
            ctx = ex.context
            if ctx.shape[1] != res:
                ctx = imageops.resize_bilinear(ctx, res, res)
            ctxs.append(ctx)
    images = []
    if prevs:
        images.append(np.stack(prevs))
    if ctxs:
        images.append(np.stack(ctxs))
    return SlotData(x0=np.stack(xs), images=images)


def checkpoint_name(stage: str, slot: str) -> str:
    return f"{stage}_{slot}.urck"


def load_cdm(models_dir: str, stage: str) -> cascade.CDMSpec:
    loaded = []
    for slot in SLOTS:
        path = os.path.join(models_dir, checkpoint_name(stage, slot))
        if not os.path.exists(path):
            raise CheckpointError(f"missing checkpoint {path}")
        loaded.append(ScoreModel.load(path))
    return cascade.CDMSpec(*loaded, *CASCADE_RESOLUTIONS)


def load_urcdm(models_dir: str, sizes, overlap: float) -> cascade.URCDMSpec:
    return cascade.URCDMSpec(low=load_cdm(models_dir, "low"),
                             mid=load_cdm(models_dir, "mid"),
                             high=load_cdm(models_dir, "high"),
                             sizes=tuple(sizes), overlap=overlap)


def load_corpus(root: str) -> list:
    paths = synthdata.list_pyramids(root)
    if not paths:
        raise DatasetError(f"no pyramids under {root}")
    return [synthdata.load_pyramid(p) for p in paths]


def format_plan(canvases, patch: int, overlap: float) -> str:
    """Tab-delimited grid geometry, one row per canvas size."""
    lines = ["canvas\tpatch\tstride\tgrid\ttiles\twavefronts\tmax_parallel"]
    for size in canvases:
        g = tiler.plan_grid(size, patch, overlap)
        widest = max(g.wavefront_width(lv) for lv in range(g.wavefront_count()))
        lines.append(f"{g.canvas}\t{g.patch}\t{g.stride}\t{g.n}x{g.n}"
                     f"\t{g.n * g.n}\t{g.wavefront_count()}\t{widest}")
    return "\n".join(lines)


# ---- subcommands ------------------------------------------------------------

def cmd_dataset_gen(cfg: dict) -> int:
    from . import report
    sizes = cfg["sizes"]
    if len(sizes) != 3 or any(s < 1 for s in sizes) or not sizes[0] < sizes[1] < sizes[2]:
        raise ConfigError(f"sizes must be three increasing positive levels, "
                          f"got {list(sizes)}")
    if cfg["count"] < 1:
        raise ConfigError(f"count must be positive, got {cfg['count']}")
    out = resolve_out(cfg["out"])
    os.makedirs(out, exist_ok=True)
    fractions = []
    first = None
    t0 = time.monotonic()
    for i in range(cfg["count"]):
        pyr = synthdata.gen_pyramid(cfg["seed"] + i, sizes=sizes)
        synthdata.save_pyramid(os.path.join(out, pyr.slide_id), pyr)
        fractions.append(synthdata.background_fraction(pyr))
        if first is None:
            first = pyr
        log.info("wrote %s (background %.3f)", pyr.slide_id, fractions[-1])
    report.pyramid_preview(os.path.join(out, "preview.png"), first)
    metrics.write_report(
        os.path.join(out, "dataset_report"),
        {"count": cfg["count"],
         "background_fraction_mean": float(np.mean(fractions)),
         "background_fraction_min": float(np.min(fractions)),
         "background_fraction_max": float(np.max(fractions))},
        {"seed": cfg["seed"], "sizes": list(sizes)})
    write_snapshot(out, "config.snapshot.json", cfg)
    log.info("corpus of %d pyramids in %.1fs -> %s",
             cfg["count"], time.monotonic() - t0, out)
    return 0


def cmd_train(cfg: dict) -> int:
    from . import report
    stage, slot = cfg["stage"], cfg["slot"]
    if cfg["steps"] < 0 or cfg["batch_size"] < 1:
        raise ConfigError(f"bad steps/batch_size: "
                          f"{cfg['steps']}/{cfg['batch_size']}")
    if cfg["lr"] <= 0:
        raise ConfigError(f"learning rate must be positive, got {cfg['lr']}")
    schedule = NoiseSchedule.cosine(cfg["t_steps"])
    net_config = model_config_for(stage, slot, cfg["width"])
    pyramids = load_corpus(cfg["data"])
    examples = synthdata.extract_training_set(
        pyramids, stage, count=cfg["examples"], seed=cfg["seed"],
        patch=CASCADE_RESOLUTIONS[-1], context_window=cascade.CONTEXT_WINDOW)
    data = build_slot_data(examples, slot)
    model = ScoreModel(net_config, schedule, cfg["target"],
                       seed=stable_hash(cfg["seed"], "init", stage, slot))
    out = resolve_out(cfg["out"])
    os.makedirs(out, exist_ok=True)
    ckpt_path = os.path.join(out, checkpoint_name(stage, slot))
    stream = NoiseStream(stable_hash(cfg["seed"], "train", stage, slot))
    adam = AdamState(model.store, lr=cfg["lr"])
    t0 = time.monotonic()

    def progress(row):
        if row["step"] == 1 or row["step"] % 200 == 0:
            log.info("%s/%s step %d loss %.5f", stage, slot,
                     row["step"], row["loss"])

    history = train_model(model, data, cfg["steps"], cfg["batch_size"],
                          stream, adam=adam, checkpoint_path=ckpt_path,
                          progress=progress)
    model.save(ckpt_path)
    with open(os.path.join(out, f"{stage}_{slot}_loss.csv"), "w",
              encoding="utf-8") as fh:
        fh.write(format_loss_log(history))
    report.loss_curve(os.path.join(out, f"{stage}_{slot}_loss.png"), history,
                      title=f"{stage}/{slot}")
    write_snapshot(out, f"{stage}_{slot}.config.json", cfg)
    log.info("saved %s (%d examples, %d params, %.1fs)", ckpt_path, len(data),
             sum(p.size for p in model.store.params.values()),
             time.monotonic() - t0)
    return 0


def cmd_sample(cfg: dict) -> int:
    from . import report
    sizes = cfg["sizes"]
    if len(sizes) != 3:
        raise ConfigError(f"sizes must name three stage canvases, "
                          f"got {list(sizes)}")
    if cfg["workers"] < 1:
        raise ConfigError(f"workers must be positive, got {cfg['workers']}")
    patch = CASCADE_RESOLUTIONS[-1]
    # fail fast on geometry before any model loading or output
    for size in sizes[1:]:
        tiler.plan_grid(size, patch, cfg["overlap"])
    if cfg["dry_run"]:
        print(f"stage 1: single cascade at {sizes[0]}")
        print(format_plan(sizes[1:], patch, cfg["overlap"]))
        return 0
    for key in ("models", "out"):
        if not cfg[key]:
            raise ConfigError(f"sample: missing required option(s) ['{key}']")
    spec = load_urcdm(cfg["models"], sizes, cfg["overlap"])
    out = resolve_out(cfg["out"])
    os.makedirs(out, exist_ok=True)
    event_logs = {2: os.path.join(out, "events_stage2.log"),
                  3: os.path.join(out, "events_stage3.log")}
    t0 = time.monotonic()
    result = cascade.generate_wsi(spec, cfg["seed"], workers=cfg["workers"],
                                  substitute_white=cfg["white_skip"],
                                  event_log_paths=event_logs)
    pyr = synthdata.ImagePyramid(slide_id=f"sample_{cfg['seed']:06d}",
                                 levels=result.stages, seed=cfg["seed"])
    synthdata.save_pyramid(os.path.join(out, "pyramid"), pyr)
    if cfg["dump_float"]:
        for k, stage in enumerate(result.stages):
            np.save(os.path.join(out, f"level{k}.npy"), stage)
    skipped = result.skipped_counts()
    values = {}
    for stage_no, grid in sorted(result.grids.items()):
        values[f"stage{stage_no}_tiles"] = len(grid.tiles)
        values[f"stage{stage_no}_skipped_white"] = skipped[stage_no]
    metrics.write_report(
        os.path.join(out, "sample_report"), values,
        {"seed": cfg["seed"], "sizes": list(sizes), "overlap": cfg["overlap"],
         "workers": cfg["workers"], "white_skip": cfg["white_skip"],
         "models": cfg["models"]})
    report.pyramid_preview(os.path.join(out, "preview.png"), pyr)
    write_snapshot(out, "config.snapshot.json", cfg)
    log.info("sampled %s in %.1fs (skipped white: %s)", list(sizes),
             time.monotonic() - t0,
             {k: v for k, v in sorted(skipped.items())})
    return 0


METRIC_NAMES = ("pfid", "fid", "improved_precision", "improved_recall")


def cmd_metrics(cfg: dict) -> int:
    from . import report
    if not 0 <= cfg["level"] <= 2:
        raise ConfigError(f"level must be 0, 1 or 2, got {cfg['level']}")
    which = tuple(s.strip() for s in cfg["metrics"].split(",") if s.strip())
    unknown = [name for name in which if name not in METRIC_NAMES]
    if unknown or not which:
        raise ConfigError(f"metrics must be a comma list from "
                          f"{list(METRIC_NAMES)}, got {cfg['metrics']!r}")
    real = load_corpus(cfg["real"])
    gen = load_corpus(cfg["gen"])
    extractor = metrics.FeatureExtractor(seed=cfg["seed"])
    real_imgs = [p.levels[cfg["level"]] for p in real]
    gen_imgs = [p.levels[cfg["level"]] for p in gen]
    values = {}
    if "pfid" in which:
        values["pfid"] = metrics.pfid(real_imgs, gen_imgs,
                                      crop_count=cfg["crop_count"],
                                      scales=cfg["scales"], seed=cfg["seed"],
                                      extractor=extractor)
    real_feats = gen_feats = None
    if set(which) - {"pfid"}:
        real_feats = extractor.extract_many(real_imgs)
        gen_feats = extractor.extract_many(gen_imgs)
        if "fid" in which:
            values["fid"] = metrics.fid(real_feats, gen_feats)
        if "improved_precision" in which:
            values["improved_precision"] = metrics.improved_precision(
                real_feats, gen_feats, k=cfg["k"])
        if "improved_recall" in which:
            values["improved_recall"] = metrics.improved_recall(
                real_feats, gen_feats, k=cfg["k"])
    meta = {"level": cfg["level"], "crop_count": cfg["crop_count"],
            "scales": list(cfg["scales"]), "k": cfg["k"], "seed": cfg["seed"],
            "metrics": list(which), "extractor": extractor.extractor_id,
            "n_real": len(real), "n_gen": len(gen),
            "real": cfg["real"], "gen": cfg["gen"]}
    out = resolve_out(cfg["out"])
    os.makedirs(out, exist_ok=True)
    metrics.write_report(os.path.join(out, "metrics_report"), values, meta)
    report.metrics_bar(os.path.join(out, "metrics.png"), values)
    if real_feats is not None:
        report.feature_scatter(os.path.join(out, "features.png"),
                               real_feats, gen_feats)
    write_snapshot(out, "config.snapshot.json", cfg)
    for key in sorted(values):
        print(f"{key}: {values[key]}")
    return 0


def build_study_store(cfg: dict):
    """Pools and store for eval-serve; split out so tests can drive the app
    without binding a socket."""
    from . import evalsvc
    real = load_corpus(cfg["real"])
    gen = load_corpus(cfg["gen"])
    pools = evalsvc.build_pools(real, gen)
    log_path = resolve_out(cfg["log"])
    parent = os.path.dirname(log_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return evalsvc.StudyStore(pools, log_path=log_path,
                              server_seed=cfg["seed"])


def cmd_eval_serve(cfg: dict) -> int:
    import socket

    import uvicorn

    from . import evalsvc
    if not 0 < cfg["port"] < 65536:
        raise ConfigError(f"port must be in (0, 65536), got {cfg['port']}")
    store = build_study_store(cfg)
    app = evalsvc.create_app(store)
    # probe the bind up front so a taken port is a clean startup error
    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((cfg["host"], cfg["port"]))
    finally:
        probe.close()
    write_snapshot(os.path.dirname(store.log_path) or ".",
                   os.path.basename(store.log_path) + ".config.json", cfg)
    log.info("serving on http://%s:%d (judgment log %s)",
             cfg["host"], cfg["port"], store.log_path)
    uvicorn.run(app, host=cfg["host"], port=cfg["port"], log_level="warning")
    return 0


def cmd_plan(cfg: dict) -> int:
    if not cfg["canvas"]:
        raise ConfigError("plan: need at least one canvas size")
    print(format_plan(cfg["canvas"], cfg["patch"], cfg["overlap"]))
    return 0


COMMANDS = {
    "dataset-gen": cmd_dataset_gen,
    "train": cmd_train,
    "sample": cmd_sample,
    "metrics": cmd_metrics,
    "eval-serve": cmd_eval_serve,
    "plan": cmd_plan,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_logging()
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except TileCascadeError as exc:
        log.error("%s", exc)
        return exit_code_for(exc)
    except OSError as exc:
        log.error("%s", exc)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
