"""Command-line entry point: synth, pretrain, finetune, evaluate.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .data import (Container, DataError, SynthConfig, build_sequences,
                   load_container, qualifies, save_container, split_manifests,
                   synth_generate)
from .metrics import REPORT_COLUMNS, EvalReport, evaluate, write_report
from .model import ModelConfig
from .numcore import ContractError, NumericError
from .train import (CheckpointError, ConfigError, FingerprintError,
                    load_checkpoint, preset_config, run_finetune, run_pretrain,
                    save_checkpoint, write_loss_csv)

log = logging.getLogger("spatspark")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "SPATSPARK_SEED"
FREEZE_CHOICES = ("none", "encoder", "decoder", "both")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    data: str = ""
    out: str = "."
    init: str = ""
    ckpt: str = ""
    preset: str = "desk"
    model: str = "auto"  # nano for desk, resnet18-like for paper
    frames: int = 12
    stride: int = 1
    train_fraction: float = 0.8
    epochs: Optional[int] = None  # None: take from the training preset
    batch_size: Optional[int] = None
    base_lr: Optional[float] = None
    warmup_epochs: Optional[int] = None
    mask_ratio: Optional[float] = None
    weight_decay: Optional[float] = None
    seed: int = 0
    no_pretrain: bool = False
    freeze: str = "none"
    no_translation: bool = False
    threshold: float = 0.5

    def model_preset(self) -> str:
        if self.model != "auto":
            return self.model
        return "resnet18-like" if self.preset == "paper" else "nano"


_FIELDS = {f.name: f for f in fields(RunConfig)}
_INT = {"frames", "stride", "epochs", "batch_size", "warmup_epochs", "seed"}
_FLOAT = {"train_fraction", "base_lr", "mask_ratio", "weight_decay", "threshold"}
_BOOL = {"no_pretrain", "no_translation"}


def _parse_value(key: str, text: str):
    text = text.strip()
    if key in _BOOL:
        if text.lower() not in ("true", "false"):
            raise UsageError(f"config key {key!r} needs true or false, got {text!r}")
        return text.lower() == "true"
    if text.lower() == "none" and _FIELDS[key].default is None:
        return None
    try:
        if key in _INT:
            return int(text)
        if key in _FLOAT:
            return float(text)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {text!r}") from None
    return text


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path) -> Dict[str, object]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for n, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise UsageError(f"{path}:{n}: unknown config key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in asdict(cfg).items())


def resolve_config(args: argparse.Namespace, phase: Optional[str]) -> RunConfig:
    """Defaults, then config file, then flags; preset-derived fields made concrete."""
    values = asdict(RunConfig())
    seed_env = os.environ.get(SEED_ENV)
    if seed_env is not None:
        try:
            values["seed"] = int(seed_env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {seed_env!r}") from None
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key in _FIELDS:
        flag = getattr(args, key, None)
        if flag is not None and flag is not False:
            values[key] = flag
    cfg = RunConfig(**values)
    if cfg.preset not in ("desk", "paper"):
        raise UsageError(f"preset must be desk or paper, got {cfg.preset!r}")
    if cfg.freeze not in FREEZE_CHOICES:
        raise UsageError(f"freeze must be one of {FREEZE_CHOICES}, got {cfg.freeze!r}")
    if phase is not None:
        base = preset_config(cfg.preset, phase)
        for key in ("epochs", "batch_size", "base_lr", "warmup_epochs", "mask_ratio", "weight_decay"):
            if getattr(cfg, key) is None:
                cfg = replace(cfg, **{key: getattr(base, key)})
    return cfg


def train_config(cfg: RunConfig, phase: str):
    tc = preset_config(cfg.preset, phase, batch_size=cfg.batch_size, base_lr=cfg.base_lr,
                       epochs=cfg.epochs, warmup_epochs=cfg.warmup_epochs, mask_ratio=cfg.mask_ratio,
                       weight_decay=cfg.weight_decay, seed=cfg.seed, no_pretrain=cfg.no_pretrain,
                       freeze_encoder=cfg.freeze in ("encoder", "both"),
                       freeze_decoder=cfg.freeze in ("decoder", "both"),
                       no_translation=cfg.no_translation)
    tc.validate()
    return tc


# ---------------------------------------------------------------------------
# helpers


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _begin(cfg: RunConfig) -> Path:
    out = _out_dir(cfg)
    (out / "resolved-config.txt").write_text(format_config(cfg))
    if cfg.preset == "paper":
        print("NOTE: paper preset selected. Reproducing the published numbers needs the real "
              "radar archive and very long training; desk-scale data will not get there.")
    return out


def _load_data(cfg: RunConfig):
    if not cfg.data:
        raise UsageError("--data is required")
    if not Path(cfg.data).is_file():
        raise UsageError(f"data file not found: {cfg.data}")
    container = load_container(cfg.data)
    if len(container.frames) == 0:
        raise DataError(f"{cfg.data}: container holds no frames")
    train, test = split_manifests(cfg.data, container, cfg.train_fraction)
    return container, train, test


def _model_config(cfg: RunConfig, container: Container) -> ModelConfig:
    _, h, w = container.frames.shape
    try:
        mc = ModelConfig.from_preset(cfg.model_preset(), cfg.frames, h, w)
        mc.validate()
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    return mc


def _samples(manifest, cfg: RunConfig, container, what: str):
    samples = build_sequences(manifest, cfg.frames, cfg.stride, container)
    if not samples:
        raise DataError(f"{what} split yields no {2 * cfg.frames}-frame qualifying sequences")
    return samples


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    try:
        h, w = (int(v) for v in args.hw.split(","))
        vx, vy = (float(v) for v in args.velocity.split(","))
    except ValueError:
        raise UsageError("--hw needs H,W and --velocity needs VX,VY") from None
    if h % 32 or w % 32 or h <= 0 or w <= 0:
        raise UsageError(f"--hw {h},{w}: both must be positive multiples of 32")
    if args.frames < 0 or args.cells < 0:
        raise UsageError("--frames and --cells must be non-negative")
    seed = args.seed if args.seed is not None else int(os.environ.get(SEED_ENV, 0))
    cfg = SynthConfig(n_frames=args.frames, height=h, width=w, n_cells=args.cells, velocity=(vx, vy))
    frames = synth_generate(cfg, seed).astype(np.float32)
    out = Path(args.out)
    try:
        if out.parent and not out.parent.exists():
            out.parent.mkdir(parents=True)
        save_container(frames, out)
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc.strerror}") from None
    frac = np.mean([qualifies(f) for f in frames]) if len(frames) else 0.0
    print(f"wrote {out}: {len(frames)} frames of {h}x{w}, qualifying fraction {frac:.3f}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args, "pretrain")
    out = _begin(cfg)
    tc = train_config(cfg, "pretrain")
    container, train, _ = _load_data(cfg)
    samples = _samples(train, cfg, container, "training")
    ckpt = run_pretrain(tc, samples, _model_config(cfg, container), scaling=train.scaling)
    save_checkpoint(ckpt, out / "pretrain.ckpt")
    write_loss_csv(ckpt.log, out / "pretrain-loss.csv")
    print(f"pretrain: {len(ckpt.log)} steps, loss {ckpt.log[0].loss:.4g} -> {ckpt.log[-1].loss:.4g}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = resolve_config(args, "finetune")
    if cfg.no_pretrain and cfg.init:
        raise UsageError("--no-pretrain and --init exclude each other")
    if not cfg.no_pretrain and not cfg.init:
        raise UsageError("give --init CHECKPOINT or --no-pretrain")
    out = _begin(cfg)
    tc = train_config(cfg, "finetune")
    container, train, _ = _load_data(cfg)
    samples = _samples(train, cfg, container, "training")
    init = None
    if cfg.init:
        if not Path(cfg.init).is_file():
            raise UsageError(f"init checkpoint not found: {cfg.init}")
        init = load_checkpoint(cfg.init)
    ckpt = run_finetune(tc, samples, _model_config(cfg, container), init=init, scaling=train.scaling)
    save_checkpoint(ckpt, out / "finetune.ckpt")
    write_loss_csv(ckpt.log, out / "finetune-loss.csv")
    print(f"finetune: {len(ckpt.log)} steps, loss {ckpt.log[0].loss:.4g} -> {ckpt.log[-1].loss:.4g}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args, None)
    if not cfg.ckpt:
        raise UsageError("--ckpt is required")
    if not Path(cfg.ckpt).is_file():
        raise UsageError(f"checkpoint not found: {cfg.ckpt}")
    out = _begin(cfg)
    container, train, test = _load_data(cfg)
    ckpt = load_checkpoint(cfg.ckpt)
    mc = ckpt.model_config
    _, h, w = container.frames.shape
    if (mc.height, mc.width) != (h, w):
        raise FingerprintError(f"checkpoint expects {mc.height}x{mc.width} frames, data has {h}x{w}")
    cfg = replace(cfg, frames=mc.frames)
    samples = _samples(test, cfg, container, "test")
    scaling = ckpt.scaling or train.scaling
    report = evaluate(ckpt.build_model(), samples, scaling, cfg.threshold)
    write_outputs(report, out)
    o = report.overall
    print(f"evaluate: {report.n_samples} samples, pMSE {o['pmse']:.5g}, CSI {_fmt(o['csi'])}, HSS {_fmt(o['hss'])}")
    return EXIT_OK


def _fmt(v) -> str:
    return "NA" if v is None else f"{v:.4f}"


def write_outputs(report: EvalReport, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "report.csv")
    (out / "per-timestep.svg").write_text(per_timestep_svg(report))


def per_timestep_svg(report: EvalReport) -> str:
    """One small panel per metric, value against lead time, as plain SVG."""
    cols, pw, ph, pad = 4, 220, 150, 30
    rows = math.ceil(len(REPORT_COLUMNS) / cols)
    width, height = cols * pw, rows * ph
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    T = len(report.per_timestep)
    for k, metric in enumerate(REPORT_COLUMNS):
        x0, y0 = (k % cols) * pw, (k // cols) * ph
        pts = [(t + 1, r[metric]) for t, r in enumerate(report.per_timestep) if r[metric] is not None]
        vals = [v for _, v in pts]
        lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        sx = lambda t: x0 + pad + (t - 1) / max(T - 1, 1) * (pw - 2 * pad)
        sy = lambda v: y0 + ph - pad - (v - lo) / (hi - lo) * (ph - 2 * pad)
        parts.append(f'<g id="panel-{metric}">')
        parts.append(f'<text x="{x0 + pad}" y="{y0 + 18}" font-size="12" font-family="sans-serif">'
                     f'{escape(metric)} ({lo:.3g} to {hi:.3g})</text>')
        parts.append(f'<line x1="{x0 + pad}" y1="{y0 + ph - pad}" x2="{x0 + pw - pad}" y2="{y0 + ph - pad}" '
                     f'stroke="#888"/>')
        parts.append(f'<line x1="{x0 + pad}" y1="{y0 + pad}" x2="{x0 + pad}" y2="{y0 + ph - pad}" stroke="#888"/>')
        coords = " ".join(f"{sx(t):.2f},{sy(v):.2f}" for t, v in pts)
        parts.append(f'<polyline data-metric="{escape(metric)}" fill="none" stroke="#1f77b4" '
                     f'stroke-width="1.5" points="{coords}"/>')
        parts.append(f'<text x="{x0 + pw / 2:.0f}" y="{y0 + ph - 8}" font-size="10" text-anchor="middle" '
                     f'font-family="sans-serif">lead time t = 1..{T}</text>')
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spatspark", description="Masked-pretraining nowcasting pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic advected-rain container")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--hw", default="128,128")
    s.add_argument("--cells", type=int, default=SynthConfig.n_cells)
    s.add_argument("--velocity", default="1.0,0.5")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    def common(sp):
        sp.add_argument("--config", help="flat 'key = value' file; flags override it")
        sp.add_argument("--data")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--preset", choices=("desk", "paper"))

    def training(sp):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--mask-ratio", dest="mask_ratio", type=float)

    pr = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    common(pr)
    training(pr)
    pr.set_defaults(func=cmd_pretrain)

    ft = sub.add_parser("finetune", help="past-to-future fine-tuning")
    common(ft)
    training(ft)
    ft.add_argument("--init")
    ft.add_argument("--no-pretrain", dest="no_pretrain", action="store_true")
    ft.add_argument("--freeze", choices=FREEZE_CHOICES)
    ft.add_argument("--no-translation", dest="no_translation", action="store_true")
    ft.set_defaults(func=cmd_finetune)

    ev = sub.add_parser("evaluate", help="verification report for a fine-tuned checkpoint")
    common(ev)
    ev.add_argument("--ckpt")
    ev.add_argument("--threshold", type=float)
    ev.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(asctime)s %(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError, FingerprintError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
