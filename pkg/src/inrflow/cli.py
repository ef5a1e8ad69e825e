"""``inrflow`` command line: gen-data, train, sample, eval and ablate.

Every command reads one JSON config with the sections below; ``--set
section.key=value`` overrides single entries (values parse as JSON, falling
back to plain strings). Unknown keys are rejected by name.

    {
      "dataset":  {... DatasetSpec fields ...},
      "data_dir": "path/to/generated/dataset",
      "model":    {... ModelConfig fields ...},
      "train":    {... TrainConfig fields ...},
      "sampler":  {... SamplerConfig fields, plus "count" and "condition" ...},
      "ablation": {"modes": [...], "latents": [...], "decode_subsample_M": [...], ...}
    }

Commands other than gen-data write into ``<out>/<timestamp>-<confighash8>``
together with a ``manifest.json``.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import itertools
import json
import logging
import math
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError, INRFlowError
from .fields import DatasetSpec, FieldSample, generate_dataset, grid_coords
from .io import (
    load_dataset,
    ppm_to_sample,
    read_ply,
    save_dataset,
    values_to_pixels,
    write_ply,
    write_ppm,
    write_tensor_blob,
)
from .metrics import evaluate_sets, sample_sets
from .model import ModelConfig
from .sampling import SamplerConfig, sample
from .training import (
    TrainConfig,
    create_train_state,
    format_ablation_table,
    load_checkpoint,
    run_ablation,
    seed_coords,
    train,
)

log = logging.getLogger("inrflow")

ABLATION_KEYS = {"modes", "latents", "decode_subsample_M", "budget", "eval_samples", "sampler_steps", "use_ema"}
SAMPLER_EXTRA_KEYS = {"count", "condition", "dump_trajectory"}


def _fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


SECTIONS = {
    "dataset": _fields(DatasetSpec),
    "model": _fields(ModelConfig),
    "train": _fields(TrainConfig),
    "sampler": _fields(SamplerConfig) | SAMPLER_EXTRA_KEYS,
    "ablation": ABLATION_KEYS,
}
TOP_LEVEL = set(SECTIONS) | {"data_dir"}


# -- config ------------------------------------------------------------------------------


def _key_line(text: str, key: str):
    for no, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return no
    return None


def _check_keys(cfg: dict, text: str = "", source: str = "<config>"):
    def fail(path, key):
        line = _key_line(text, key)
        where = f"{source}:{line}: " if line else f"{source}: "
        raise ConfigError(f"{where}unknown config key '{path}'")

    for key, value in cfg.items():
        if key not in TOP_LEVEL:
            fail(key, key)
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{source}: section '{key}' must be an object")
            for sub in value:
                if sub not in SECTIONS[key]:
                    fail(f"{key}.{sub}", sub)


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    _check_keys(cfg, text, str(path))
    return cfg


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.strip().split(".")
        if len(parts) == 1:
            cfg[parts[0]] = value
        elif len(parts) == 2:
            cfg.setdefault(parts[0], {})
            if not isinstance(cfg[parts[0]], dict):
                raise ConfigError(f"--set {key}: '{parts[0]}' is not a section")
            cfg[parts[0]][parts[1]] = value
        else:
            raise ConfigError(f"--set key must be 'key' or 'section.key', got {key!r}")
    _check_keys(cfg, source="--set")
    return cfg


def config_hash(cfg: dict) -> str:
    """Git blob hash of the canonical JSON form."""
    data = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _build(cls, section: dict, name: str):
    try:
        obj = cls(**section)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    return obj


def dataset_spec(cfg: dict) -> DatasetSpec:
    section = dict(cfg.get("dataset") or {})
    for key in ("kind", "resolution_or_points", "count"):
        if key not in section:
            raise ConfigError(f"dataset.{key} is required")
    for key in ("blob_count", "frequency_range"):
        if key in section:
            section[key] = tuple(section[key])
    spec = _build(DatasetSpec, section, "dataset")
    spec.validate()
    return spec


# -- run directories ---------------------------------------------------------------------


class Run:
    """Output directory plus its manifest."""

    def __init__(self, out, command: str, cfg: dict, seed):
        self.hash = config_hash(cfg)
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
        root = Path(out)
        path = root / f"{stamp}-{self.hash[:8]}"
        k = 1
        while path.exists():
            path = root / f"{stamp}-{self.hash[:8]}-{k}"
            k += 1
        path.mkdir(parents=True)
        self.path = path
        self.manifest = {
            "command": command,
            "config": cfg,
            "config_hash": self.hash,
            "seed": seed,
            "started": datetime.now(timezone.utc).isoformat(),
            "finished": None,
            "outputs": {},
            "metrics": {},
        }
        self._t0 = time.perf_counter()
        self.write()

    def write(self):
        (self.path / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")

    def finish(self, outputs: dict, metrics: dict | None = None):
        self.manifest["outputs"] = {k: str(v) for k, v in outputs.items()}
        self.manifest["metrics"] = metrics or {}
        self.manifest["finished"] = datetime.now(timezone.utc).isoformat()
        self.manifest["seconds"] = round(time.perf_counter() - self._t0, 3)
        self.write()
        print(self.path)


# -- commands ----------------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    if args.seed is not None:
        cfg.setdefault("dataset", {})["seed"] = args.seed
    spec = dataset_spec(cfg)
    out = Path(args.out or cfg.get("data_dir") or "data")
    samples = generate_dataset(spec)
    save_dataset(out, samples, cfg["dataset"])
    log.info("wrote %d samples to %s", len(samples), out)
    print(out)
    return 0


def _load_training_data(cfg):
    if cfg.get("data_dir"):
        path = Path(cfg["data_dir"])
        if not path.is_dir():
            raise DataError(f"dataset directory {path} does not exist")
        samples, index = load_dataset(path)
        return samples, index.get("spec", {})
    if cfg.get("dataset"):
        spec = dataset_spec(cfg)
        return generate_dataset(spec), cfg["dataset"]
    raise ConfigError("train needs either 'data_dir' or a 'dataset' section")


def data_layout(samples) -> dict:
    first = samples[0]
    n, d_in = first.coords.shape
    layout = {"num_points": n, "coord_dim": d_in, "value_dim": first.values.shape[1]}
    side = math.isqrt(n)
    if d_in == 2 and side * side == n and np.array_equal(first.coords, grid_coords(side, 2)):
        layout["side"] = side
    return layout


def cmd_train(args, cfg):
    train_section = cfg.setdefault("train", {})
    if args.seed is not None:
        train_section["seed"] = args.seed
    if args.steps is not None:
        train_section["training_steps"] = args.steps
    tcfg = _build(TrainConfig, train_section, "train")
    tcfg.validate()
    samples, data_spec = _load_training_data(cfg)
    layout = data_layout(samples)

    model_section = dict(cfg.get("model") or {})
    model_section.setdefault("d_in", layout["coord_dim"])
    model_section.setdefault("d_out", layout["value_dim"])
    mcfg = _build(ModelConfig, model_section, "model")
    mcfg.validate()

    run = Run(args.out or "runs", "train", cfg, tcfg.seed)
    if args.resume:
        state, _, _ = load_checkpoint(args.resume, tcfg)
        log.info("resumed from %s at step %d", args.resume, state.step)
    else:
        state = create_train_state(mcfg, tcfg, seed_coords(samples, mcfg))
    remaining = max(0, tcfg.training_steps - state.step)
    ckpt = run.path / "checkpoint.inrt"
    extra = {"data": layout, "dataset": data_spec, "config_hash": run.hash}

    def progress(s):
        if s.step % 100 == 0:
            log.info("step %d loss %.5f ema %.5f", s.step, s.last_loss, s.ema_loss)

    train(state, samples, tcfg, steps=remaining, log_path=run.path / "loss.csv",
          checkpoint_path=ckpt, checkpoint_meta=extra, callback=progress)
    run.finish({"checkpoint": ckpt, "loss_log": run.path / "loss.csv"},
               {"step": state.step, "final_loss": state.last_loss, "ema_loss": state.ema_loss})
    return 0


def _sampler_config(cfg, args):
    section = dict(cfg.get("sampler") or {})
    extras = {k: section.pop(k) for k in list(section) if k in SAMPLER_EXTRA_KEYS}
    if args.sampler:
        section["kind"] = args.sampler
    if args.cfg_scale is not None:
        section["cfg_scale"] = args.cfg_scale
    if args.seed is not None:
        section["seed"] = args.seed
    scfg = _build(SamplerConfig, section, "sampler")
    scfg.validate()
    return scfg, extras


def cmd_sample(args, cfg):
    scfg, extras = _sampler_config(cfg, args)
    count = args.count if args.count is not None else int(extras.get("count", 4))
    if count < 1:
        raise ConfigError("sample count must be >= 1")
    state, _, meta = load_checkpoint(args.checkpoint)
    model = state.ema_model()
    layout = meta.get("data") or {}
    if "num_points" not in layout:
        raise DataError(f"{args.checkpoint}: checkpoint lacks the training data layout")
    mcfg = model.config
    is_image = "side" in layout
    if is_image:
        side = args.resolution or layout["side"]
        query = grid_coords(side, mcfg.d_in)
    else:
        # point clouds carry their coordinates in the values; the query coords are placeholders
        query = np.zeros((args.resolution or layout["num_points"], mcfg.d_in))
    encoder_resolution = layout["num_points"] if len(query) > layout["num_points"] else None
    if encoder_resolution:
        log.info("decoding %d queries from %d encoder inputs", len(query), encoder_resolution)

    run = Run(args.out or "runs", "sample", cfg, scfg.seed)
    traj = sample(model, query, extras.get("condition"), scfg, num_samples=count,
                  encoder_resolution=encoder_resolution)
    out_dir = run.path / "samples"
    out_dir.mkdir()
    values = traj.export_values()
    files = []
    for k in range(count):
        if is_image:
            path = out_dir / f"sample_{k:04d}.ppm"
            write_ppm(path, values_to_pixels(values[k], side))
        else:
            path = out_dir / f"sample_{k:04d}.ply"
            write_ply(path, values[k])
        files.append(path)
    outputs = {"samples": out_dir}
    if extras.get("dump_trajectory"):
        write_tensor_blob(run.path / "trajectory.inrt", {"times": traj.times, "values": traj.values})
        outputs["trajectory"] = run.path / "trajectory.inrt"
    run.finish(outputs, {"count": count, "resolution": len(query),
                         "resolution_agnostic": bool(encoder_resolution)})
    return 0


def load_sets(path) -> list[np.ndarray]:
    """Point sets from a dataset directory, a sample run directory, or a folder of PLY/PPM files."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} does not exist")
    if (path / "index.json").exists():
        return sample_sets(load_dataset(path)[0])
    if (path / "samples").is_dir():
        path = path / "samples"
    files = sorted(p for p in path.iterdir() if p.suffix in (".ply", ".ppm"))
    if not files:
        raise DataError(f"{path}: no .ply or .ppm files")
    out = []
    for p in files:
        if p.suffix == ".ply":
            pts, _ = read_ply(p)
            out.extend(sample_sets([FieldSample(pts, pts)]))
        else:
            out.extend(sample_sets([ppm_to_sample(p)]))
    return out


def cmd_eval(args, cfg):
    gen, ref = load_sets(args.generated), load_sets(args.reference)
    run = Run(args.out or "runs", "eval", {**cfg, "generated": str(args.generated),
                                           "reference": str(args.reference)}, None)
    report = evaluate_sets(gen, ref)
    report.write_csv(run.path / "metrics.csv")
    table = report.format_table()
    (run.path / "metrics.txt").write_text(table + "\n")
    print(table)
    run.finish({"csv": run.path / "metrics.csv", "table": run.path / "metrics.txt"}, report.to_dict())
    return 0


def ablation_variants(section: dict) -> list[dict]:
    modes = section.get("modes", ["grid", "random", "kmeans_pp"])
    latents = section.get("latents", [16, 64])
    sweeps = section.get("decode_subsample_M", [None])
    return [{"pseudo_coord_mode": m, "num_latents": n, "decode_subsample_M": s}
            for m, n, s in itertools.product(modes, latents, sweeps)]


def cmd_ablate(args, cfg):
    train_section = cfg.setdefault("train", {})
    if args.seed is not None:
        train_section["seed"] = args.seed
    section = cfg.get("ablation") or {}
    tcfg = _build(TrainConfig, train_section, "train")
    tcfg.validate()
    samples, _ = _load_training_data(cfg)
    layout = data_layout(samples)
    model_section = dict(cfg.get("model") or {})
    model_section.setdefault("d_in", layout["coord_dim"])
    model_section.setdefault("d_out", layout["value_dim"])
    mcfg = _build(ModelConfig, model_section, "model")
    budget = args.steps if args.steps is not None else int(section.get("budget", tcfg.training_steps))

    run = Run(args.out or "runs", "ablate", cfg, tcfg.seed)
    rows = run_ablation(ablation_variants(section), samples, mcfg, tcfg, budget,
                        eval_samples=int(section.get("eval_samples", 8)),
                        sampler_steps=int(section.get("sampler_steps", 20)),
                        use_ema=bool(section.get("use_ema", True)))
    table = format_ablation_table(rows)
    (run.path / "ablation.txt").write_text(table + "\n")
    (run.path / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(table)
    run.finish({"table": run.path / "ablation.txt", "rows": run.path / "ablation.json"}, {"rows": len(rows)})
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the seed of this command")
    common.add_argument("--out", help="output directory (dataset dir for gen-data, runs root otherwise)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config entry, e.g. train.learning_rate=3e-4")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="inrflow", description="Flow matching over coordinate-value sets.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, help="total training steps")
    p = sub.add_parser("sample", parents=[common], help="draw samples from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--resolution", type=int, help="grid side (2D) or point count (3D)")
    p.add_argument("--count", type=int)
    p.add_argument("--cfg-scale", type=float)
    p.add_argument("--sampler", choices=["euler_ode", "euler_maruyama"])
    p = sub.add_parser("eval", parents=[common], help="score generated samples against references")
    p.add_argument("generated")
    p.add_argument("reference")
    p = sub.add_parser("ablate", parents=[common], help="train and score a grid of variants")
    p.add_argument("--steps", type=int, help="step budget per variant")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    threads = os.environ.get("INRFLOW_THREADS")
    try:
        if threads:
            try:
                torch.set_num_threads(int(threads))
            except ValueError:
                raise ConfigError(f"INRFLOW_THREADS must be an integer, got {threads!r}") from None
        cfg = apply_overrides(load_config(args.config), args.set)
        return COMMANDS[args.command](args, cfg)
    except INRFlowError as exc:
        print(f"inrflow {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"inrflow {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
