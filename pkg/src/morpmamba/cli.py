"""Command-line entry point: gen-data, train, eval, predict-map, ablate.

Settings come from an optional flat ``key=value`` config file (``#``
comments, comma-separated arrays); command-line flags override it.
"""

from __future__ import annotations

import argparse
import contextlib
import itertools
import json
import logging
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import CompatibilityError, ConfigError, MorpMambaError
from .ingest import (
    HsiCube,
    SplitSpec,
    extract_patches,
    load_cube,
    normalize,
    save_cube,
    select_bands,
    stack_samples,
    stratified_split,
    synth_cube,
)
from .model import MorpMamba, ModelConfig, load_checkpoint, save_checkpoint
from .numerics import Tensor
from .train import Metrics, TrainConfig, evaluate, fit

logger = logging.getLogger("morpmamba")

# Fixed class palette (class 1 -> first entry); unlabeled pixels are black.
PALETTE = np.array(
    [
        (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
        (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
        (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
        (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    ],
    dtype=np.uint8,
)

DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class RunConfig:
    variant: str = "SSMM"
    patch: int = 4
    bands: int = 15
    mode: str = "per_pixel"
    d_model: int = 64
    heads: int = 4
    kernel: int = 5
    ssm_dim: int | None = None
    lam: float = 1e-4
    epochs: int = 50
    batch_size: int = 256
    lr: float = 0.001
    shuffle: bool = True
    ratios: tuple[float, float, float] = (0.2, 0.3, 0.5)
    seed: int = 0
    precision: str = "f32"
    threads: int = 1
    cube: str | None = None
    out_dir: str | None = None

    def validate(self) -> "RunConfig":
        if self.mode not in ("per_pixel", "tile"):
            raise ConfigError(f"mode must be per_pixel or tile, got {self.mode!r}")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.bands < 1:
            raise ConfigError(f"bands must be >= 1, got {self.bands}")
        self.split_spec()
        self.train_config()
        # class count is unknown until the cube is read; 2 is a placeholder
        self.model_config(2)
        return self

    def split_spec(self) -> SplitSpec:
        if len(self.ratios) != 3:
            raise ConfigError(f"ratios needs three values, got {self.ratios}")
        return SplitSpec(*self.ratios, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.seed, self.shuffle)

    def model_config(self, classes: int) -> ModelConfig:
        return ModelConfig(
            variant=self.variant, patch=self.patch, bands=self.bands, classes=classes,
            d_model=self.d_model, heads=self.heads, kernel=self.kernel, ssm_dim=self.ssm_dim,
            lam=self.lam, seed=self.seed,
        )  # fmt: skip

    @property
    def dtype(self):
        return DTYPES[self.precision]


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_optional_int(s: str) -> int | None:
    return None if s.strip().lower() in ("", "none") else int(s)


def _parse_ratios(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(","))


def _parse_optional_str(s: str) -> str | None:
    return s.strip() or None


_PARSERS = {
    "variant": str.strip, "patch": int, "bands": int, "mode": str.strip, "d_model": int,
    "heads": int, "kernel": int, "ssm_dim": _parse_optional_int, "lam": float, "epochs": int,
    "batch_size": int, "lr": float, "shuffle": _parse_bool, "ratios": _parse_ratios, "seed": int,
    "precision": str.strip, "threads": int, "cube": _parse_optional_str, "out_dir": _parse_optional_str,
}  # fmt: skip
assert set(_PARSERS) == {f.name for f in fields(RunConfig)}


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"config line {lineno}: bad value for {key}: {exc}") from None
    return values


def format_config(run: RunConfig) -> str:
    lines = []
    for f in fields(run):
        v = getattr(run, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        elif v is None:
            v = ""
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def build_run_config(config_path: str | None, overrides: dict) -> RunConfig:
    values = parse_config_text(Path(config_path).read_text()) if config_path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values).validate()


# ---------------------------------------------------------------------------
# pipeline


class StageError(MorpMambaError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except (MorpMambaError, OSError, ValueError) as exc:
        raise StageError(name, exc) from exc


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def preprocess(cube: HsiCube, run: RunConfig) -> HsiCube:
    with stage("select_bands"):
        cube = select_bands(cube, run.bands)
    with stage("normalize"):
        cube = normalize(cube)
    return cube


def split_samples(cube: HsiCube, run: RunConfig):
    with stage("extract_patches"):
        samples = extract_patches(cube, run.patch, run.mode)
    with stage("stratified_split"):
        return stratified_split(samples, run.split_spec())


def metrics_record(m: Metrics, model: MorpMamba, run_seed: int, split: str, wall: float) -> dict:
    out = m.to_dict()
    out.update(params=model.param_count(), variant=model.config.variant, seed=run_seed, split=split, wall_seconds=wall)
    return out


def checkpoint_run_info(run: RunConfig) -> dict:
    return {"mode": run.mode, "precision": run.precision, "ratios": list(run.ratios), "split_seed": run.seed}


def _roundtrip_f32(model: MorpMamba) -> MorpMamba:
    # evaluate exactly what the checkpoint will hold
    params = {k: Tensor(v.data.astype(np.float32).astype(model.dtype), requires_grad=True) for k, v in model.params.items()}
    return MorpMamba(model.config, params)


@dataclass
class TrainOutcome:
    model: MorpMamba
    final: MorpMamba
    log_csv: str
    val: dict
    test: dict
    wall_seconds: float


def run_training(cube: HsiCube, run: RunConfig) -> TrainOutcome:
    cube = preprocess(cube, run)
    train_set, val_set, test_set = split_samples(cube, run)
    with stage("build_model"):
        model = MorpMamba(run.model_config(cube.class_count), dtype=run.dtype)
    t0 = time.perf_counter()
    with stage("fit"):
        result = fit(model, train_set, val_set, run.train_config())
    wall = time.perf_counter() - t0
    with stage("evaluate"):
        best = _roundtrip_f32(result.best)
        val = metrics_record(evaluate(best, val_set, run.batch_size), best, run.seed, "val", wall)
        test = metrics_record(evaluate(best, test_set, run.batch_size), best, run.seed, "test", wall)
    return TrainOutcome(best, result.final, result.log_csv(), val, test, wall)


def load_for_inference(checkpoint: str, cube_path: str, precision: str | None = None):
    with stage("load_checkpoint"):
        probe_cfg, _, info = load_checkpoint(checkpoint)
        prec = precision or info.get("precision", "f32")
        if prec not in DTYPES:
            raise ConfigError(f"precision must be f32 or f64, got {prec!r}")
        config, params, info = load_checkpoint(checkpoint, DTYPES[prec])
    with stage("load_cube"):
        cube = load_cube(cube_path)
    with stage("compatibility"):
        if cube.class_count != config.classes:
            raise CompatibilityError(f"checkpoint has {config.classes} classes, cube declares {cube.class_count}")
        if cube.bands < config.bands:
            raise CompatibilityError(f"checkpoint expects {config.bands} bands, cube has only {cube.bands}")
        if config.patch > min(cube.height, cube.width):
            raise CompatibilityError(f"patch size {config.patch} exceeds cube extent {cube.height}x{cube.width}")
    ratios = tuple(info.get("ratios", (0.2, 0.3, 0.5)))
    run = RunConfig(
        variant=config.variant, patch=config.patch, bands=config.bands, mode=info.get("mode", "per_pixel"),
        d_model=config.d_model, heads=config.heads, kernel=config.kernel, ssm_dim=config.ssm_dim,
        lam=config.lam, ratios=ratios, seed=int(info.get("split_seed", config.seed)), precision=prec,
    )  # fmt: skip
    return MorpMamba(config, params), preprocess(cube, run), run


def predict_labels(model: MorpMamba, cube: HsiCube, batch_size: int = 256) -> np.ndarray:
    """H x W map of predicted classes for every labeled pixel, 0 elsewhere."""
    samples = extract_patches(cube, model.config.patch, "per_pixel")
    out = np.zeros(cube.labels.shape, dtype=np.int64)
    if samples:
        x, _ = stack_samples(samples, model.dtype)
        pred = model.predict(x, batch_size)
        rows, cols = zip(*(s.origin for s in samples))
        out[list(rows), list(cols)] = pred
    return out


def write_ppm(path: str | Path, class_map: np.ndarray) -> None:
    h, w = class_map.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    labeled = class_map > 0
    rgb[labeled] = PALETTE[(class_map[labeled] - 1) % len(PALETTE)]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, run: RunConfig) -> int:
    with stage("synth_cube"):
        cube = synth_cube(args.h, args.w, args.c, args.classes, args.noise, run.seed)
    with stage("write"):
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_cube(cube, out)
    summary = cube.summary()
    summary.update(path=str(out), noise_sigma=args.noise, seed=run.seed)
    print(dump_json(summary))
    return 0


def _require(value, name: str):
    if value is None:
        raise StageError("config", ConfigError(f"{name} is required"))
    return value


def cmd_train(args, run: RunConfig) -> int:
    cube_path = _require(run.cube, "cube")
    out_dir = Path(_require(run.out_dir, "out_dir"))
    with stage("load_cube"):
        cube = load_cube(cube_path)
    outcome = run_training(cube, run)
    with stage("write"):
        out_dir.mkdir(parents=True, exist_ok=True)
        info = checkpoint_run_info(run)
        save_checkpoint(out_dir / "model.mmck", outcome.model.config, outcome.model.params, info)
        save_checkpoint(out_dir / "model_final.mmck", outcome.final.config, outcome.final.params, info)
        (out_dir / "train_log.csv").write_text(outcome.log_csv)
        (out_dir / "metrics_val.json").write_text(dump_json(outcome.val) + "\n")
        (out_dir / "metrics_test.json").write_text(dump_json(outcome.test) + "\n")
        (out_dir / "run.cfg").write_text(format_config(run))
    _check_finite_metrics(outcome.val, outcome.test)
    print(dump_json(outcome.test))
    return 0


def _check_finite_metrics(*records: dict) -> None:
    for r in records:
        for key in ("oa", "aa", "kappa"):
            if not np.isfinite(r[key]):
                raise StageError("evaluate", ValueError(f"non-finite {key}"))


def cmd_eval(args, run: RunConfig) -> int:
    model, cube, ck_run = load_for_inference(args.checkpoint, _require(args.cube or run.cube, "cube"), args.precision)
    train_set, val_set, test_set = split_samples(cube, ck_run)
    chosen = {"train": train_set, "val": val_set, "test": test_set}[args.split]
    t0 = time.perf_counter()
    with stage("evaluate"):
        m = evaluate(model, chosen, run.batch_size)
    record = metrics_record(m, model, ck_run.seed, args.split, time.perf_counter() - t0)
    _check_finite_metrics(record)
    print(dump_json(record))
    return 0


def cmd_predict_map(args, run: RunConfig) -> int:
    model, cube, _ = load_for_inference(args.checkpoint, _require(args.cube or run.cube, "cube"), args.precision)
    with stage("predict"):
        class_map = predict_labels(model, cube, run.batch_size)
    with stage("write"):
        write_ppm(args.out, class_map)
    print(dump_json({"path": str(args.out), "h": cube.height, "w": cube.width, "predicted": int((class_map > 0).sum())}))
    return 0


ABLATE_COLUMNS = (
    "variant", "train_ratio", "val_ratio", "test_ratio", "patch", "heads", "kernel",
    "oa", "aa", "kappa", "params", "wall_seconds",
)  # fmt: skip


def _grid_list(text: str | None, cast, default) -> list:
    if text is None:
        return [default]
    try:
        return [cast(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise StageError("grid", ConfigError(f"bad grid value: {exc}")) from None


def ablation_grid(args, run: RunConfig) -> list[RunConfig]:
    """Every cell of the grid as a validated RunConfig; validation happens before any training."""
    variants = _grid_list(args.variants, str, run.variant)
    ratios = _grid_list(args.train_ratios, float, run.ratios[0])
    patches = _grid_list(args.patches, int, run.patch)
    heads = _grid_list(args.heads_grid, int, run.heads)
    kernels = _grid_list(args.kernels, int, run.kernel)
    val_ratio = run.ratios[1]
    cells = []
    with stage("grid"):
        for v, r, p, h, k in itertools.product(variants, ratios, patches, heads, kernels):
            test_ratio = 1.0 - r - val_ratio
            if test_ratio <= 0:
                raise ConfigError(f"train ratio {r} leaves no test data with val ratio {val_ratio}")
            cells.append(replace(run, variant=v, ratios=(r, val_ratio, test_ratio), patch=p, heads=h, kernel=k).validate())
    return cells


def cmd_ablate(args, run: RunConfig) -> int:
    cube_path = _require(run.cube, "cube")
    cells = ablation_grid(args, run)
    with stage("load_cube"):
        cube = load_cube(cube_path)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as fh:
        fh.write(",".join(ABLATE_COLUMNS) + "\n")
        fh.flush()
        for cell in cells:
            t0 = time.perf_counter()
            outcome = run_training(cube, cell)
            wall = time.perf_counter() - t0
            t = outcome.test
            row = [cell.variant, f"{cell.ratios[0]:.6f}", f"{cell.ratios[1]:.6f}", f"{cell.ratios[2]:.6f}",
                   cell.patch, cell.heads, cell.kernel, f"{t['oa']:.6f}", f"{t['aa']:.6f}", f"{t['kappa']:.6f}",
                   t["params"], f"{wall:.6f}"]  # fmt: skip
            fh.write(",".join(str(v) for v in row) + "\n")
            fh.flush()
            logger.info("ablate %s", dict(zip(ABLATE_COLUMNS, row)))
    print(dump_json({"path": str(out), "cells": len(cells)}))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--config", help="key=value configuration file")
    g.add_argument("--seed", type=int)
    g.add_argument("--precision", choices=sorted(DTYPES))
    g.add_argument("--threads", type=int, help="BLAS threads for within-batch parallelism (default 1)")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model / training")
    g.add_argument("--cube")
    g.add_argument("--variant", choices=["NM", "SMM", "SSMM"])
    g.add_argument("--patch", type=int)
    g.add_argument("--bands", type=int)
    g.add_argument("--mode", choices=["per_pixel", "tile"])
    g.add_argument("--d-model", dest="d_model", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--kernel", type=int)
    g.add_argument("--ssm-dim", dest="ssm_dim", type=int)
    g.add_argument("--lam", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--no-shuffle", dest="shuffle", action="store_const", const=False)
    g.add_argument("--ratios", type=_ratios_arg, help="train,val,test fractions")


def _ratios_arg(s: str):
    try:
        return _parse_ratios(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="morpmamba", description="Morphological Mamba for hyperspectral classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic .hsic cube")
    p.add_argument("--out", required=True)
    p.add_argument("--h", type=int, default=32)
    p.add_argument("--w", type=int, default=32)
    p.add_argument("--c", type=int, default=16)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train and write checkpoint, log and metrics")
    _model_flags(p)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict-map", parents=[common], help="write a P6 PPM class map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cube")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict_map)

    p = sub.add_parser("ablate", parents=[common], help="sweep a settings grid, one CSV row per cell")
    _model_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--variants")
    p.add_argument("--train-ratios", dest="train_ratios")
    p.add_argument("--patches")
    p.add_argument("--heads-grid", dest="heads_grid")
    p.add_argument("--kernels")
    p.set_defaults(func=cmd_ablate)
    return parser


_RUN_KEYS = {f.name for f in fields(RunConfig)}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k in _RUN_KEYS}
    try:
        run = build_run_config(args.config, overrides)
        with threadpool_limits(limits=run.threads):
            return args.func(args, run)
    except StageError as exc:
        print(f"morpmamba {args.command}: error {exc}", file=sys.stderr)
        return 1
    except (MorpMambaError, OSError) as exc:
        print(f"morpmamba {args.command}: error [config] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
