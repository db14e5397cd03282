"""Command-line entry point.

Every configuration key can be given in a ``--config`` file, as a
``key=value`` positional override, or as ``--key value``; later sources
win.  Exit codes: 0 success, 1 a check failed, 2 invalid input or
configuration, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_io
from .backbone import ModelConfig, count_flops, count_params, read_sidecar
from .detection import Detector, write_boxes
from .pnm import write_pgm, write_ppm
from .report import Row, to_csv, to_text
from .synthetic import Dataset, SceneSpec, build_dataset, generate_scenes
from .tensor import ConfigError, ShapeError, Tensor
from .training import DivergenceError, TrainConfig, evaluate_checkpoint, predict, train

log = logging.getLogger("hrfuser")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3


@dataclasses.dataclass(frozen=True)
class RunSettings:
    """Harness-level keys: dataset sizes, where data and outputs live."""

    train_scenes: int = 512
    eval_scenes: int = 128
    data_seed: int = 0
    data: str = ""
    out: str = "runs/default"
    workers: int = 1

    def __post_init__(self):
        if self.train_scenes < 1 or self.eval_scenes < 1:
            raise ConfigError("scene counts must be positive")


@dataclasses.dataclass(frozen=True)
class Settings:
    model: ModelConfig
    train: TrainConfig
    scene: SceneSpec
    run: RunSettings


_SECTIONS = (ModelConfig, TrainConfig, SceneSpec, RunSettings)
_SHARED = {"seed"}  # routed to both the model and the training configuration


def _all_keys() -> list[str]:
    keys: list[str] = []
    for cls in _SECTIONS:
        keys += [f.name for f in dataclasses.fields(cls) if f.name not in keys]
    return keys


def resolve_settings(config_path: str | None, overrides, flags: dict[str, str | None]) -> Settings:
    settings = config_io.load(config_path) if config_path else {}
    settings = config_io.apply_overrides(settings, overrides)
    settings.update({k: v for k, v in flags.items() if v is not None})
    shared = {k: settings.pop(k) for k in _SHARED if k in settings}
    model, train_cfg, scene, run = config_io.split(settings, *_SECTIONS)
    if shared:
        model = config_io.build(ModelConfig, {**_fields_of(model), **shared})
        train_cfg = config_io.build(TrainConfig, {**_fields_of(train_cfg), **shared})
    return Settings(model, train_cfg, scene, run)


def _fields_of(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


# -- data ------------------------------------------------------------------------------

def _data_dir(s: Settings) -> Path:
    return Path(s.run.data) if s.run.data else Path(s.run.out) / "data"


def load_or_generate(s: Settings, need_train: bool = True) -> tuple[Dataset | None, Dataset]:
    """Datasets from ``data`` when present (checked against the settings), otherwise generated."""
    directory = _data_dir(s)
    meta_path = directory / "meta.json"
    meta = {
        "scene": s.scene.to_dict(), "train_scenes": s.run.train_scenes, "eval_scenes": s.run.eval_scenes,
        "data_seed": s.run.data_seed, "modalities": list(s.model.modalities), "radar_rcs": s.model.radar_rcs,
    }
    if meta_path.exists():
        stored = json.loads(meta_path.read_text())
        if json.loads(json.dumps(meta)) != stored:
            raise ConfigError(f"dataset in {directory} was generated with different settings")
        train_data = Dataset.load(directory / "train.npz") if need_train else None
        return train_data, Dataset.load(directory / "eval.npz")
    return generate_datasets(s, directory, meta)


def generate_datasets(s: Settings, directory: Path, meta: dict) -> tuple[Dataset, Dataset]:
    start = time.perf_counter()
    train_scenes = generate_scenes(s.scene, s.run.train_scenes, s.run.data_seed, "train", s.run.workers)
    eval_scenes = generate_scenes(s.scene, s.run.eval_scenes, s.run.data_seed, "eval", s.run.workers)
    train_data = build_dataset(train_scenes, s.model.modalities, s.model.radar_rcs)
    eval_data = build_dataset(eval_scenes, s.model.modalities, s.model.radar_rcs, stats=train_data.stats)
    directory.mkdir(parents=True, exist_ok=True)
    train_data.save(directory / "train.npz")
    eval_data.save(directory / "eval.npz")
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    log.info("generated %d + %d scenes in %.1fs", len(train_data), len(eval_data), time.perf_counter() - start)
    return train_data, eval_data


# -- commands ------------------------------------------------------------------------------

def cmd_gen_data(args, s: Settings) -> int:
    directory = _data_dir(s)
    if (directory / "meta.json").exists():
        (directory / "meta.json").unlink()
    _, eval_data = load_or_generate(s)
    print(f"wrote {directory} ({s.run.train_scenes} train / {len(eval_data)} eval scenes)")
    return EXIT_OK


def cmd_train(args, s: Settings) -> int:
    out = Path(s.run.out)
    out.mkdir(parents=True, exist_ok=True)
    train_data, eval_data = load_or_generate(s)
    (out / "config.txt").write_text(config_io.dump({
        **_fields_of(s.model), **_fields_of(s.train), **_fields_of(s.scene), **_fields_of(s.run),
    }))
    result = train(s.model, s.train, train_data, eval_data, out / "model.mwca", out / "metrics.jsonl")
    (out / "eval.json").write_text(json.dumps(
        {"best_epoch": result.best_epoch, "best": result.best.to_dict(), "final": result.final.to_dict()},
        indent=2, sort_keys=True,
    ))
    print(to_text([Row(f"best (epoch {result.best_epoch})", result.best), Row("final", result.final)]), end="")
    return EXIT_OK


def _checkpoint_path(args, s: Settings) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(s.run.out) / "model.mwca"


def cmd_eval(args, s: Settings) -> int:
    path = _checkpoint_path(args, s)
    meta = read_sidecar(path)
    s = dataclasses.replace(s, model=meta["model"])
    _, eval_data = load_or_generate(s, need_train=False)
    result = evaluate_checkpoint(path, eval_data, s.model, s.train.eval_batch_size, s.train.score_thresh)
    rows = [Row(path.stem, result, Detector(s.model).num_parameters())]
    print(to_csv(rows) if args.csv else to_text(rows), end="")
    if args.detections:
        model = Detector(s.model)
        from .backbone import load_checkpoint

        load_checkpoint(path, model, s.model)
        dets = predict(model, eval_data, s.train.eval_batch_size, s.train.score_thresh)
        write_boxes(args.detections, dets)
        write_boxes(Path(args.detections).with_suffix(".gt.txt"), eval_data.boxes)
    return EXIT_OK


def cmd_gradcheck(args, s: Settings) -> int:
    from .checks import gradcheck_model, gradcheck_ops

    failed = False
    for name, err in gradcheck_ops(args.seeds).items():
        ok = err < args.tol
        failed |= not ok
        print(f"{name:28s} {err:.2e} {'ok' if ok else 'FAIL'}")
    err = gradcheck_model(s.model.modalities, budget=args.budget)
    failed |= not err < args.tol
    print(f"{'end-to-end tiny model':28s} {err:.2e} {'ok' if err < args.tol else 'FAIL'}")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_oracle_check(args, s: Settings) -> int:
    from .checks import ap_grid_errors, mwca_oracle_errors

    errors = mwca_oracle_errors(args.instances, s.train.seed)
    mwca_ok = max(errors) < 1e-10
    print(f"MWCA pre-FFN vs loop oracle: {len(errors)} instances, max error {max(errors):.2e} "
          f"{'ok' if mwca_ok else 'FAIL'}")
    count, worst = ap_grid_errors()
    ap_ok = worst < 1e-12
    print(f"AP vs enumeration: {count} grid instances, max error {worst:.2e} {'ok' if ap_ok else 'FAIL'}")
    return EXIT_OK if mwca_ok and ap_ok else EXIT_CHECK_FAILED


def cmd_profile(args, s: Settings) -> int:
    """Parameters per component; flops per coarse component (alignment and MWCA share ``fusion``)."""
    model = Detector(s.model)
    params = count_params(model.backbone)
    params.pop("total")
    flops = count_flops(model.backbone, s.scene.height, s.scene.width)
    flops.pop("total")
    coarse: dict[str, int] = {}
    for key, n in params.items():
        group = "fusion" if key.startswith(("fusion:", "align:")) else key
        coarse[group] = coarse.get(group, 0) + n
    coarse["head"] = model.head.num_parameters()
    print(f"variant {s.model.variant}, modalities {', '.join(s.model.modalities)}, "
          f"input {s.scene.height}x{s.scene.width}")
    print(f"{'component':22s} {'params':>12s} {'MFLOPs':>10s}")
    for group, n in coarse.items():
        mflops = flops.get(group)
        print(f"{group:22s} {n:12,d} {'-' if mflops is None else f'{mflops / 1e6:.1f}':>10s}")
        for key in params:
            if group == "fusion" and key.startswith(("fusion:", "align:")):
                print(f"  {key:20s} {params[key]:12,d}")
    print(f"{'total':22s} {sum(coarse.values()):12,d} {sum(flops.values()) / 1e6:10.1f}")
    print("(flops cover backbone and neck at batch 1)")
    return EXIT_OK


def cmd_project(args, s: Settings) -> int:
    from .sensing import rasterize_lidar, rasterize_radar_pillars, scene_from_json

    out = Path(s.run.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scene:
        raw = scene_from_json(Path(args.scene).read_text())
        cam = raw["camera"]
        images = {}
        if "lidar" in raw:
            images["lidar"] = rasterize_lidar(raw["lidar"]["points"], raw["lidar"]["intensity"], cam)
        if "radar" in raw:
            r = raw["radar"]
            images["radar"] = rasterize_radar_pillars(
                r["points"], r.get("rcs"), r["velocity"], cam, with_rcs=s.model.radar_rcs and "rcs" in r
            )
    else:
        from .synthetic import generate_scene, scene_rng

        scene = generate_scene(s.scene, scene_rng(s.run.data_seed, "train", args.index))
        (out / "scene.json").write_text(scene.to_json(seed=s.run.data_seed))
        write_ppm(out / "camera.ppm", np.clip(scene.image, 0, 1))
        write_pgm(out / "gated.pgm", scene.gated[..., 0])
        images = {"lidar": scene.lidar(), "radar": scene.radar(s.model.radar_rcs)}
    for name, img in images.items():
        for c, channel in enumerate(img.channels):
            write_pgm(out / f"{name}_{channel}.pgm", img.data[..., c])
        write_pgm(out / f"{name}_mask.pgm", img.mask.astype(float))
        print(f"{name}: {int(img.mask.sum())} valid pixels, channels {', '.join(img.channels)}")
    return EXIT_OK


def cmd_dump_attn(args, s: Settings) -> int:
    from .attention import dump_attention_maps
    from .backbone import load_checkpoint

    path = _checkpoint_path(args, s)
    if path.exists():
        s = dataclasses.replace(s, model=read_sidecar(path)["model"])
    model = Detector(s.model)
    if path.exists():
        load_checkpoint(path, model, s.model)
    else:
        log.warning("no checkpoint at %s; dumping maps of an untrained model", path)
    if model.backbone.fusion is None:
        raise ConfigError("this configuration has no fusion blocks")
    _, eval_data = load_or_generate(s, need_train=False)
    if not 0 <= args.index < len(eval_data):
        raise ConfigError(f"scene index {args.index} outside [0, {len(eval_data)})")
    level = model.backbone.fusion.levels[args.level]
    block = level.blocks.get(str(args.stream))
    if block is None:
        raise ConfigError(f"stream {args.stream} is not fused at level {args.level}")
    captured = {}
    original = block.forward

    def record(x, ys):
        captured.setdefault("args", (x, ys))
        return original(x, ys)

    block.forward = record
    model.eval()
    try:
        model({m: Tensor(eval_data.inputs[m][args.index:args.index + 1]) for m in s.model.modalities})
    finally:
        del block.forward
    x, ys = captured["args"]
    written = dump_attention_maps(block, x, ys, Path(s.run.out) / "attention", s.model.secondaries)
    for p in written:
        print(p)
    return EXIT_OK


COMMANDS = {
    "train": (cmd_train, "train a detector; writes checkpoint, metric log and eval summary"),
    "eval": (cmd_eval, "evaluate a checkpoint on the eval split"),
    "gradcheck": (cmd_gradcheck, "finite-difference checks of every op and the tiny model"),
    "oracle-check": (cmd_oracle_check, "compare MWCA and AP against their loop oracles"),
    "profile": (cmd_profile, "parameter and flop table per component"),
    "project": (cmd_project, "rasterize a scene's lidar/radar into modality images"),
    "dump-attn": (cmd_dump_attn, "write MWCA attention maps for one eval scene"),
    "gen-data": (cmd_gen_data, "generate and store the synthetic train/eval splits"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hrfuser", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("overrides", nargs="*", metavar="key=value")
        keys = p.add_argument_group("configuration keys")
        for key in _all_keys():
            keys.add_argument(f"--{key}", dest=f"key_{key}", metavar="VALUE")
        if name in ("eval", "dump-attn"):
            p.add_argument("--checkpoint", help="defaults to <out>/model.mwca")
        if name == "eval":
            p.add_argument("--csv", action="store_true", help="CSV instead of an aligned table")
            p.add_argument("--detections", help="also write detections (and <stem>.gt.txt) in box text format")
        if name == "gradcheck":
            p.add_argument("--seeds", type=int, default=20)
            p.add_argument("--budget", type=int, default=300)
            p.add_argument("--tol", type=float, default=1e-4)
        if name == "oracle-check":
            p.add_argument("--instances", type=int, default=50)
        if name == "project":
            p.add_argument("--scene", help="scene JSON; without it a synthetic scene is generated")
            p.add_argument("--index", type=int, default=0)
        if name == "dump-attn":
            p.add_argument("--index", type=int, default=0, help="eval scene")
            p.add_argument("--level", type=int, default=0)
            p.add_argument("--stream", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("key_")}
    handler = COMMANDS[args.command][0]
    try:
        settings = resolve_settings(args.config, args.overrides, flags)
        return handler(args, settings)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ShapeError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
