"""``sdit`` command line: train, sample, verify, count.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as tn
from .data_io import (coerce, format_kv, gen_toy_dataset, load_checkpoint, load_idx,
                      model_checkpoint, parse_kv, restore_model, restore_optimizer,
                      save_checkpoint, write_image_grid)
from .diffusion import AdamW, ddpm_sample, loss_step, make_schedule
from .errors import NonFinite, SditError
from .model import PRESETS, ModelConfig, SditModel, count_macs, count_params
from .verify import GROUPS, run_checks

log = logging.getLogger("sdit")

REFERENCE_PARAMS = "11.67 M"
REFERENCE_MACS = "1.32 G"


class UsageError(Exception):
    pass


# --------------------------------------------------------------- run config

TRAIN_DEFAULTS = {
    "preset": "desk",
    "seed": 0,
    "deterministic": True,
    "precision": 32,
    "jobs": 1,
    "out": "run",
    "toy": "",
    "n_data": 512,
    "idx_images": "",
    "idx_labels": "",
    "steps": 500,
    "batch_size": 16,
    "lr": 1e-4,
    "weight_decay": 0.01,
    "log_every": 1,
    "ckpt_every": 100,
    "resume": "",
    "schedule": "linear",
    "beta_start": "auto",
    "beta_end": "auto",
}

SAMPLE_DEFAULTS = {
    "ckpt": "",
    "n": 16,
    "seed": 0,
    "stride": 1,
    "cols": 0,
    "out": "",
    "deterministic": True,
    "precision": 32,
}

COUNT_DEFAULTS = {"preset": "desk", "csv": False}


@dataclass
class RunConfig:
    command: str
    settings: dict
    model: ModelConfig | None = None
    explicit: set = field(default_factory=set)

    def to_dict(self) -> dict:
        out = dict(self.settings)
        if self.model is not None:
            out.update(self.model.to_dict())
        return out

    def echo(self) -> str:
        return format_kv(self.to_dict())

    def __getitem__(self, key):
        return self.settings[key]


def _model_keys() -> dict:
    return ModelConfig().to_dict()


def build_config(command: str, defaults: dict, file_values: dict[str, str],
                 flag_values: dict, with_model: bool) -> RunConfig:
    """defaults < preset < config file < flags; unknown keys are errors."""
    model_defaults = _model_keys() if with_model else {}
    known = set(defaults) | set(model_defaults)
    merged_raw = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    unknown = sorted(set(merged_raw) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")

    settings = dict(defaults)
    for k in defaults:
        if k in merged_raw:
            v = merged_raw[k]
            settings[k] = coerce(v, defaults[k]) if isinstance(v, str) else v

    model = None
    if with_model:
        preset = settings.get("preset", "desk")
        if preset not in PRESETS:
            raise UsageError(f"--preset must be one of {sorted(PRESETS)}")
        base = PRESETS[preset].to_dict()
        for k in model_defaults:
            if k in merged_raw:
                v = merged_raw[k]
                base[k] = coerce(v, model_defaults[k]) if isinstance(v, str) else v
        try:
            model = ModelConfig.from_dict(base)
        except (SditError, TypeError) as e:
            raise UsageError(str(e)) from None
    return RunConfig(command, settings, model, set(merged_raw))


def schedule_for(cfg: RunConfig):
    """Linear betas; ``auto`` scales the 1e-4..0.02 range by 1000 / steps."""
    steps = cfg.model.diffusion_steps
    scale = 1000.0 / steps
    start = cfg["beta_start"]
    end = cfg["beta_end"]
    start = min(1e-4 * scale, 0.5) if start == "auto" else float(start)
    end = min(0.02 * scale, 0.999) if end == "auto" else float(end)
    return make_schedule(cfg["schedule"], steps, start, end), start, end


# ------------------------------------------------------------------ parsers


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--size", dest="image_size", type=int, help="image height = width")
    g.add_argument("--channels", type=int)
    g.add_argument("--patch-size", type=int)
    g.add_argument("--hidden-dim", type=int)
    g.add_argument("--input-blocks", dest="num_input_blocks", type=int)
    g.add_argument("--mid-blocks", dest="num_mid_blocks", type=int)
    g.add_argument("--output-blocks", dest="num_output_blocks", type=int)
    g.add_argument("--spike-steps", type=int)
    g.add_argument("--diffusion-steps", type=int)
    g.add_argument("--no-recon-module", dest="use_recon", action="store_const", const=False,
                   help="ablate the reconstruction module (maps zeroed and frozen)")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="file of 'key = value' lines")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")
    p.add_argument("--seed", type=int)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a noise predictor")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--toy", choices=["bars", "blobs"])
    p.add_argument("--n-data", type=int, help="toy dataset size")
    p.add_argument("--idx-images", help="IDX image file (.gz ok)")
    p.add_argument("--idx-labels")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--log-every", type=int)
    p.add_argument("--ckpt-every", type=int)
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--beta-start")
    p.add_argument("--beta-end")
    p.add_argument("--out", help="run directory")
    p.add_argument("--jobs", type=int, help="batch shards evaluated in parallel")
    p.add_argument("--precision", type=int, choices=[32, 64])
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction)

    p = sub.add_parser("sample", help="draw images from a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt")
    p.add_argument("--n", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--out", help="output directory (default: <ckpt dir>/samples)")
    p.add_argument("--precision", type=int, choices=[32, 64])
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction)

    p = sub.add_parser("verify", help="run gradient, oracle and invariant checks")
    p.add_argument("--only", action="append", default=[],
                   help=f"check group(s) to run: {', '.join(GROUPS)}")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("count", help="parameter and MAC counts")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--csv", action="store_const", const=True)
    return parser


_NOT_SETTINGS = {"command", "config", "set", "only"}


def _collect(args: argparse.Namespace) -> tuple[dict[str, str], dict]:
    file_values = {}
    if getattr(args, "config", None):
        try:
            file_values = parse_kv(args.config.read_text())
        except OSError as e:
            raise UsageError(f"--config: {e}") from None
    flags = {k: v for k, v in vars(args).items() if k not in _NOT_SETTINGS}
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flags[k.strip()] = v.strip()
    return file_values, flags


@contextlib.contextmanager
def _run_mode(cfg: RunConfig):
    """Precision and (in deterministic mode) single-threaded BLAS for the run."""
    with contextlib.ExitStack() as stack:
        stack.enter_context(tn.precision(cfg["precision"]))
        if cfg["deterministic"]:
            stack.enter_context(threadpool_limits(1))
        yield


# ----------------------------------------------------------------- commands


def _load_dataset(cfg: RunConfig):
    m = cfg.model
    if cfg["toy"]:
        return gen_toy_dataset(cfg["toy"], cfg["n_data"], m.image_size, cfg["seed"], m.channels)
    if cfg["idx_images"]:
        labels = cfg["idx_labels"] or None
        ds = load_idx(cfg["idx_images"], labels)
        if ds.images.shape[1:] != (m.channels, m.image_size, m.image_size):
            raise UsageError(f"--idx-images holds {ds.images.shape[1:]} images; "
                             f"set --size/--channels to match")
        return ds
    raise UsageError("no dataset: pass --toy {bars,blobs} or --idx-images PATH")


def cmd_train(cfg: RunConfig) -> int:
    data = _load_dataset(cfg).images
    out = Path(cfg["out"])
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    echo = cfg.echo()
    print(echo, end="")
    (out / "config.txt").write_text(echo)

    sched, beta_start, beta_end = schedule_for(cfg)
    rng = np.random.default_rng(cfg["seed"])
    model = SditModel.init(cfg.model, rng)
    for p in model.parameters():
        p.data = p.data.astype(tn.get_default_dtype())
        p.grad = np.zeros_like(p.data)
    frozen = model.frozen_names()
    opt = AdamW([t for n, t in model.named_parameters() if n not in frozen],
                lr=cfg["lr"], weight_decay=cfg["weight_decay"])

    start = 0
    if cfg["resume"]:
        ckpt = load_checkpoint(cfg["resume"], expect_config=cfg.model.to_dict())
        model = restore_model(ckpt)
        opt = AdamW([t for n, t in model.named_parameters() if n not in frozen],
                    lr=cfg["lr"], weight_decay=cfg["weight_decay"])
        restore_optimizer(ckpt, model, opt)
        rng.bit_generator.state = ckpt.meta["rng_state"]
        start = int(ckpt.meta["step"])

    meta = {"schedule": cfg["schedule"], "beta_start": beta_start, "beta_end": beta_end,
            "seed": cfg["seed"]}

    def checkpoint(step: int, path: Path) -> None:
        save_checkpoint(path, model_checkpoint(model, opt, {
            **meta, "step": step, "optimizer_steps": opt.step_count,
            "rng_state": rng.bit_generator.state}))

    jobs = cfg["jobs"]
    mode = "a" if start else "w"
    with open(out / "loss.csv", mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not start:
            writer.writerow(["step", "loss"])
        for step in range(start + 1, cfg["steps"] + 1):
            batch = data[rng.integers(0, len(data), cfg["batch_size"])].astype(tn.get_default_dtype())
            model.zero_grad()
            try:
                loss = loss_step(batch, model, sched, rng,
                                 params=opt.params if jobs > 1 else None, jobs=jobs)
                if not math.isfinite(loss):
                    raise NonFinite(f"loss is {loss}")
            except NonFinite as e:
                log.error("numeric failure at step %d: %s", step, e)
                fh.flush()
                return 3
            opt.step()
            if step % cfg["log_every"] == 0:
                writer.writerow([step, repr(loss)])
            if step % cfg["ckpt_every"] == 0:
                checkpoint(step, out / "checkpoints" / f"step_{step:06d}.ckpt")
    checkpoint(cfg["steps"], out / "final.ckpt")
    log.info("wrote %s", out / "final.ckpt")
    return 0


def cmd_sample(cfg: RunConfig) -> int:
    if not cfg["ckpt"]:
        raise UsageError("--ckpt is required")
    if cfg["n"] < 1:
        raise UsageError("--n must be at least 1")
    ckpt = load_checkpoint(cfg["ckpt"])
    model = restore_model(ckpt)
    out = Path(cfg["out"]) if cfg["out"] else Path(cfg["ckpt"]).parent / "samples"
    out.mkdir(parents=True, exist_ok=True)
    echo = format_kv({**cfg.settings, **model.config.to_dict()})
    print(echo, end="")
    (out / "config.txt").write_text(echo)

    meta = ckpt.meta
    sched = make_schedule(meta.get("schedule", "linear"), model.config.diffusion_steps,
                          meta["beta_start"], meta["beta_end"])
    m = model.config
    rng = np.random.default_rng(cfg["seed"])
    try:
        images = ddpm_sample(model, sched, cfg["n"], (m.channels, m.image_size, m.image_size),
                             rng, stride=cfg["stride"])
    except SditError as e:
        raise UsageError(str(e)) from None
    cols = cfg["cols"] or math.ceil(math.sqrt(cfg["n"]))
    ext = "pgm" if m.channels == 1 else "ppm"
    stem = f"samples_seed{cfg['seed']}"
    write_image_grid(images, out / f"{stem}.{ext}", cols)
    np.save(out / f"{stem}.npy", images)
    print(f"wrote {out / f'{stem}.{ext}'} and {stem}.npy")
    return 0


def cmd_verify(only: list[str], seed: int) -> int:
    groups = [g for item in only for g in item.split(",") if g]
    unknown = [g for g in groups if g not in GROUPS]
    if unknown:
        raise UsageError(f"unknown check group(s) {unknown}; choose from {list(GROUPS)}")
    rows = run_checks(groups or None, seed=seed)
    width = max(len(name) for _, name, _, _ in rows)
    for group, name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {group:<8} {name:<{width}}  {detail}")
    failed = sum(not ok for *_, ok, _ in rows)
    print(f"{len(rows) - failed}/{len(rows)} checks passed")
    return 0 if failed == 0 else 1


def cmd_count(cfg: RunConfig) -> int:
    m = cfg.model
    params = count_params(m)
    macs = count_macs(m)
    if cfg["csv"]:
        print("preset,params,macs_embed,macs_per_spike_step,spike_steps,macs_total")
        print(f"{cfg['preset']},{params},{macs['embed']},{macs['per_spike_step']},"
              f"{m.spike_steps},{macs['total']}")
        return 0
    print(cfg.echo(), end="")
    print(f"parameters          {params:>16,d}  ({params / 1e6:.2f} M)")
    print(f"MACs embeddings     {macs['embed']:>16,d}")
    print(f"MACs per spike step {macs['per_spike_step']:>16,d}")
    print(f"MACs x{m.spike_steps} steps       {macs['total']:>16,d}  ({macs['total'] / 1e9:.2f} G)")
    print(f"published 28x28 reference: parameters {REFERENCE_PARAMS}, MACs {REFERENCE_MACS}; "
          f"patch size and counting convention of the reference are unknown")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = make_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args.only, args.seed)
        file_values, flags = _collect(args)
        if args.command == "train":
            cfg = build_config("train", TRAIN_DEFAULTS, file_values, flags, with_model=True)
            with _run_mode(cfg):
                return cmd_train(cfg)
        if args.command == "sample":
            cfg = build_config("sample", SAMPLE_DEFAULTS, file_values, flags, with_model=False)
            with _run_mode(cfg):
                return cmd_sample(cfg)
        cfg = build_config("count", COUNT_DEFAULTS, file_values, flags, with_model=True)
        return cmd_count(cfg)
    except (UsageError, SditError) as e:
        if isinstance(e, NonFinite):
            log.error("%s", e)
            return 3
        print(f"sdit {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
