"""Masked-reconstruction pretraining, translation fine-tuning, and checkpoints."""

from __future__ import annotations

import copy
import logging
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import masking
from .data import ScalingParams, SequenceSample, stack_batch
from .hashing import fnv1a64
from .masking import PatchGrid, TubeMask, Xoshiro256, derive_seed, make_tube_mask
from .model import ModelConfig, SpatSpark, init_model, param_group
from .numcore import (ContractError, DimensionError, LambState, LrSchedule,
                      Tensor, add, as_tensor, backward, lamb_step, lr_at,
                      make_node, mean_all, mul)

log = logging.getLogger(__name__)

SHUFFLE_STREAM = 0x5348554646
MASK_STREAM = 0x4D41534B


class ConfigError(ValueError):
    """Inconsistent training configuration."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"
    batch_size: int = 4
    base_lr: float = 2e-4
    epochs: int = 60
    warmup_epochs: int = 4
    mask_ratio: float = 0.6
    weight_decay: float = 0.04
    seed: int = 0
    no_pretrain: bool = False
    freeze_encoder: bool = False
    freeze_decoder: bool = False
    no_translation: bool = False
    preset: str = "desk"

    def validate(self) -> None:
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"phase must be pretrain or finetune, got {self.phase!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs}, {self.epochs}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.phase == "pretrain" and self.mask_ratio == 0.0:
            raise ConfigError("pretraining needs a positive mask ratio")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError("base_lr and weight_decay must be non-negative")

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.base_lr, self.warmup_epochs, self.epochs)


# (batch_size, base_lr, epochs, warmup_epochs, mask_ratio, weight_decay)
PAPER_SETTINGS = {
    "pretrain": (256, 2e-4, 1400, 40, 0.6, 0.04),
    "finetune": (196, 1.5e-4, 200, 40, 0.6, 0.05),
}
DESK_SETTINGS = {
    "pretrain": (4, 2e-2, 60, 4, 0.6, 0.04),
    "finetune": (4, 1.5e-2, 40, 4, 0.6, 0.05),
}


def preset_config(preset: str, phase: str, **overrides) -> TrainConfig:
    table = {"paper": PAPER_SETTINGS, "desk": DESK_SETTINGS}.get(preset)
    if table is None:
        raise ConfigError(f"unknown training preset {preset!r}")
    bs, lr, ep, wu, ratio, wd = table[phase]
    cfg = TrainConfig(phase=phase, batch_size=bs, base_lr=lr, epochs=ep, warmup_epochs=wu,
                      mask_ratio=ratio, weight_decay=wd, preset=preset)
    return replace(cfg, **overrides)


# ---------------------------------------------------------------------------
# losses


def _batched(pred: Tensor, target: np.ndarray):
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape and pred.data.shape != (1,) + target.shape:
        raise DimensionError(f"prediction {pred.data.shape} and target {target.shape} differ")
    if target.ndim == 3:
        target = target[None]
    return pred, target


def normalized_patches(target: np.ndarray, p: int, eps: float = 1e-6) -> np.ndarray:
    """Each patch of a [T,H,W] array standardized over its T*p*p values."""
    patches = masking.patchify(target, p)
    mu = patches.mean(axis=1, keepdims=True)
    var = patches.var(axis=1, keepdims=True)
    return (patches - mu) / np.sqrt(var + eps)


def loss_pretrain(pred, target, masks: Union[TubeMask, Sequence[TubeMask]], eps: float = 1e-6) -> Tensor:
    """Mean over hidden patches of the MSE between the raw prediction and the
    per-patch standardized target. Visible patches contribute nothing."""
    pred, target = _batched(pred, target)
    if isinstance(masks, TubeMask):
        masks = [masks]
    if len(masks) != target.shape[0]:
        raise DimensionError(f"{len(masks)} masks for a batch of {target.shape[0]}")
    n, t, h, w = target.shape
    p = masks[0].patch_size
    n_masked = sum(int(m.masked.sum()) for m in masks)
    if n_masked == 0:
        raise ContractError("loss_pretrain needs at least one masked patch")
    per_patch = t * p * p
    diffs = []
    total = 0.0
    for i, m in enumerate(masks):
        sel = m.masked.reshape(-1)
        d = np.zeros((sel.size, per_patch))
        pp = masking.patchify(pred.data.reshape(n, t, h, w)[i], p)
        d[sel] = pp[sel] - normalized_patches(target[i], p, eps)[sel]
        diffs.append(d)
        total += float((d[sel] ** 2).sum())
    denom = n_masked * per_patch
    pshape = pred.data.shape

    def bw(g):
        grad = np.stack([masking.unpatchify(d, p, t, h, w) for d in diffs])
        return ((2.0 * g / denom) * grad.reshape(pshape),)

    return make_node(np.asarray(total / denom), (pred,), bw, "loss_pretrain")


def loss_finetune(pred, target) -> Tensor:
    """Mean squared error over every element of the scaled future frames."""
    pred, target = _batched(pred, target)
    diff = add(pred, -target.reshape(pred.data.shape))
    return mean_all(mul(diff, diff))


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"SPCK"
CKPT_VERSION = 1
PHASES = {"pretrain": 0, "finetune": 1}


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class FingerprintError(CheckpointError):
    pass


def config_fingerprint(cfg: ModelConfig) -> int:
    """FNV-1a of the canonical architecture text (translation presence excluded)."""
    text = "\n".join(line for line in cfg.canonical().splitlines() if not line.startswith("translation"))
    return fnv1a64(text.encode())


@dataclass
class LogRow:
    epoch: int
    step: int
    lr: float
    loss: float


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: Dict[str, np.ndarray]  # learnable params and normalization buffers
    optimizer: LambState
    epoch: int
    phase: str
    scaling: Optional[ScalingParams] = None
    log: List[LogRow] = field(default_factory=list)  # not serialized
    lrs: List[float] = field(default_factory=list)  # per-epoch lr, not serialized

    @property
    def fingerprint(self) -> int:
        return config_fingerprint(self.model_config)

    def build_model(self) -> SpatSpark:
        model = init_model(self.model_config, 0)
        load_state(model, self.params)
        return model


def model_state(model: SpatSpark) -> Dict[str, np.ndarray]:
    state = {name: p.data.copy() for name, p in model.named_params().items()}
    state.update({k: v.copy() for k, v in model.buffers().items()})
    return state


def load_state(model: SpatSpark, state: Dict[str, np.ndarray], skip_groups=()) -> None:
    named = model.named_params()
    buffers = model.buffers()
    for name, value in state.items():
        if name in named:
            if param_group(name) in skip_groups:
                continue
            if named[name].data.shape != value.shape:
                raise CheckpointError(f"shape mismatch for {name}: {value.shape} vs {named[name].data.shape}")
            named[name].data = value.copy()
        elif name in buffers:
            if name.startswith("translation") and "translation" in skip_groups:
                continue
            model.set_buffer(name, value)
        elif name.startswith("translation.") and model.translation is None:
            continue
        else:
            raise CheckpointError(f"unknown entry {name!r} in checkpoint state")


def _meta_entries(ckpt: Checkpoint) -> Dict[str, np.ndarray]:
    c = ckpt.model_config
    meta = {
        "meta.input_shape": np.array([c.frames, c.height, c.width], float),
        "meta.stem_channels": np.array([c.stem_channels], float),
        "meta.stage_channels": np.array(c.stage_channels, float),
        "meta.blocks_per_stage": np.array(c.blocks_per_stage, float),
        "meta.patch_size": np.array([c.patch_size], float),
        "meta.translation": np.array([float(c.translation)]),
        "meta.densify_add": np.array([float(c.densify_mode == "add")]),
    }
    if ckpt.scaling is not None:
        meta["meta.scaling"] = np.array([ckpt.scaling.min_val, ckpt.scaling.max_val])
    return meta


def _pack_table(entries: Dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def _unpack_table(buf: bytes, pos: int):
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        if pos + 8 * size > len(buf):
            raise CorruptCheckpointError("checkpoint truncated inside a parameter table")
        entries[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return entries, pos


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    table = dict(ckpt.params)
    table.update(_meta_entries(ckpt))
    opt = ckpt.optimizer
    opt_table = {"step": np.array(float(opt.step)), "beta1": np.array(opt.beta1),
                 "beta2": np.array(opt.beta2), "eps": np.array(opt.eps),
                 "weight_decay": np.array(opt.weight_decay), "max_trust": np.array(opt.max_trust)}
    for name in opt.m:
        opt_table[f"m/{name}"] = opt.m[name]
        opt_table[f"v/{name}"] = opt.v[name]
    body = (CKPT_MAGIC + struct.pack("<IQIB", CKPT_VERSION, ckpt.fingerprint, ckpt.epoch, PHASES[ckpt.phase])
            + _pack_table(table) + _pack_table(opt_table))
    Path(path).write_bytes(body + struct.pack("<Q", fnv1a64(body)))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    head = struct.calcsize("<IQIB")
    if len(raw) < 4 + head + 8:
        raise CorruptCheckpointError(f"{path}: checkpoint truncated")
    body, (stored,) = raw[:-8], struct.unpack("<Q", raw[-8:])
    if fnv1a64(body) != stored:
        raise CorruptCheckpointError(f"{path}: checkpoint checksum mismatch (truncated or corrupt)")
    version, fp, epoch, phase = struct.unpack_from("<IQIB", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        table, pos = _unpack_table(body, 4 + head)
        opt_table, _ = _unpack_table(body, pos)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: malformed parameter table") from exc
    meta = {k: table.pop(k) for k in [k for k in table if k.startswith("meta.")]}
    t, h, w = (int(v) for v in meta["meta.input_shape"])
    cfg = ModelConfig(frames=t, height=h, width=w, preset="custom",
                      stem_channels=int(meta["meta.stem_channels"][0]),
                      stage_channels=tuple(int(v) for v in meta["meta.stage_channels"]),
                      blocks_per_stage=tuple(int(v) for v in meta["meta.blocks_per_stage"]),
                      patch_size=int(meta["meta.patch_size"][0]),
                      translation=bool(meta["meta.translation"][0]),
                      densify_mode="add" if meta["meta.densify_add"][0] else "fill")
    if config_fingerprint(cfg) != fp:
        raise FingerprintError(f"{path}: stored fingerprint does not match its architecture")
    scaling = None
    if "meta.scaling" in meta:
        scaling = ScalingParams(*map(float, meta["meta.scaling"]))
    opt = LambState(beta1=float(opt_table.pop("beta1")), beta2=float(opt_table.pop("beta2")),
                    eps=float(opt_table.pop("eps")), weight_decay=float(opt_table.pop("weight_decay")),
                    max_trust=float(opt_table.pop("max_trust")), step=int(opt_table.pop("step")))
    for key, arr in opt_table.items():
        kind, name = key.split("/", 1)
        (opt.m if kind == "m" else opt.v)[name] = arr
    inv = {v: k for k, v in PHASES.items()}
    return Checkpoint(cfg, table, opt, epoch, inv[phase], scaling)


# ---------------------------------------------------------------------------
# training loops


def epoch_lr(config: TrainConfig, epoch: int) -> float:
    """Learning rate used throughout epoch ``epoch`` (schedule sampled at the epoch midpoint)."""
    return lr_at(config.schedule(), epoch + 0.5)


def epoch_order(seed: int, epoch: int, n: int) -> list:
    return Xoshiro256(derive_seed(seed, epoch, SHUFFLE_STREAM)).permutation(n)


def sample_masks(samples: Sequence[SequenceSample], cfg: ModelConfig, ratio: float,
                 seed: int, epoch: int) -> List[TubeMask]:
    grid = PatchGrid.for_image(cfg.height, cfg.width, cfg.patch_size)
    return [make_tube_mask(grid, ratio, derive_seed(seed, s.index, epoch, MASK_STREAM)) for s in samples]


def trainable_names(model: SpatSpark, config: TrainConfig) -> List[str]:
    frozen = set()
    if config.phase == "pretrain":
        frozen.add("translation")
    if config.freeze_encoder:
        frozen.add("encoder")
    if config.freeze_decoder:
        frozen.update(("decoder", "densify"))
    names = [n for n in model.named_params() if param_group(n) not in frozen]
    if not names:
        raise ConfigError("every parameter is frozen; nothing to train")
    return names


def _run(model: SpatSpark, config: TrainConfig, samples: Sequence[SequenceSample],
         ckpt_base: Checkpoint, stop_epoch: Optional[int], on_step=None) -> Checkpoint:
    if not samples:
        raise ConfigError("dataset is empty")
    names = trainable_names(model, config)
    named = model.named_params()
    params = [named[n] for n in names]
    opt = ckpt_base.optimizer
    mcfg = model.config
    last = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    rows: List[LogRow] = []
    lrs: List[float] = []
    step = opt.step
    for epoch in range(ckpt_base.epoch, last):
        lr = epoch_lr(config, epoch)
        lrs.append(lr)
        order = epoch_order(config.seed, epoch, len(samples))
        for b in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[b:b + config.batch_size]]
            inputs, targets = stack_batch(batch)
            model.zero_grad()
            if config.phase == "pretrain":
                masks = sample_masks(batch, mcfg, config.mask_ratio, config.seed, epoch)
                pred = model.forward_pretrain(inputs, masks)
                loss = loss_pretrain(pred, inputs, masks)
            else:
                masks = sample_masks(batch, mcfg, config.mask_ratio, config.seed, epoch)
                pred = model.forward_finetune(inputs, masks)
                loss = loss_finetune(pred, targets)
            backward(loss)
            lamb_step(params, opt, lr)
            step += 1
            rows.append(LogRow(epoch, step, lr, float(loss.data)))
            if on_step is not None:
                on_step(rows[-1])
        log.info("%s epoch %d lr %.3g loss %.6g", config.phase, epoch,
                 lr, np.mean([r.loss for r in rows if r.epoch == epoch]))
    return Checkpoint(mcfg, model_state(model), opt, last, config.phase, ckpt_base.scaling,
                      ckpt_base.log + rows, ckpt_base.lrs + lrs)


def _fresh_optimizer(config: TrainConfig) -> LambState:
    return LambState(weight_decay=config.weight_decay)


def run_pretrain(config: TrainConfig, samples: Sequence[SequenceSample], model_config: ModelConfig,
                 scaling: Optional[ScalingParams] = None, resume: Optional[Checkpoint] = None,
                 stop_epoch: Optional[int] = None, on_step=None) -> Checkpoint:
    """Masked-reconstruction pretraining of encoder, densify and decoder."""
    config.validate()
    if config.phase != "pretrain":
        raise ConfigError("run_pretrain needs phase = pretrain")
    if resume is not None:
        if resume.fingerprint != config_fingerprint(model_config) or resume.phase != "pretrain":
            raise FingerprintError("resume checkpoint does not match this pretraining setup")
        model = resume.build_model()
        base = replace(resume, optimizer=copy.deepcopy(resume.optimizer))
    else:
        model = init_model(model_config, config.seed)
        base = Checkpoint(model_config, {}, _fresh_optimizer(config), 0, "pretrain", scaling)
    return _run(model, config, samples, base, stop_epoch, on_step)


def run_finetune(config: TrainConfig, samples: Sequence[SequenceSample], model_config: ModelConfig,
                 init: Optional[Checkpoint] = None, scaling: Optional[ScalingParams] = None,
                 resume: Optional[Checkpoint] = None, stop_epoch: Optional[int] = None,
                 on_step=None) -> Checkpoint:
    """Fine-tune past -> future prediction; the translation network starts from scratch."""
    config.validate()
    if config.phase != "finetune":
        raise ConfigError("run_finetune needs phase = finetune")
    if config.no_pretrain and init is not None:
        raise ConfigError("no_pretrain excludes an init checkpoint")
    model_config = replace(model_config, translation=not config.no_translation)
    if resume is not None:
        if resume.fingerprint != config_fingerprint(model_config) or resume.phase != "finetune":
            raise FingerprintError("resume checkpoint does not match this fine-tuning setup")
        model = resume.build_model()
        base = replace(resume, optimizer=copy.deepcopy(resume.optimizer))
        return _run(model, config, samples, base, stop_epoch, on_step)
    model = init_model(model_config, config.seed)
    if init is not None:
        if init.fingerprint != config_fingerprint(model_config):
            raise FingerprintError("init checkpoint architecture differs from the fine-tuning model")
        load_state(model, init.params, skip_groups=("translation",))
        if scaling is None:
            scaling = init.scaling
    elif not config.no_pretrain:
        log.warning("fine-tuning without an init checkpoint; encoder/decoder start from scratch")
    trainable_names(model, config)
    base = Checkpoint(model.config, {}, _fresh_optimizer(config), 0, "finetune", scaling)
    return _run(model, config, samples, base, stop_epoch, on_step)


def write_loss_csv(rows: Sequence[LogRow], path) -> None:
    lines = ["epoch,step,lr,loss"] + [f"{r.epoch},{r.step},{r.lr!r},{r.loss!r}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")
