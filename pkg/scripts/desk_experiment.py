"""Desk-scale learning run: pretrain on a synthetic set, then fine-tune three ways.

For each seed: pretrain the nano model for a fixed number of steps, fine-tune
from that checkpoint (full), from scratch (no pretraining) and from the
checkpoint without the translation network, then score all three on the held
out split. Prints one line per seed plus a summary.

    python3 scripts/desk_experiment.py --seeds 0 1 2
"""
from __future__ import annotations

import argparse
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from spatspark.data import Container, SynthConfig, build_sequences, split_manifests, synth_generate
from spatspark.metrics import evaluate
from spatspark.model import ModelConfig
from spatspark.train import preset_config, run_finetune, run_pretrain


@dataclass
class DeskProtocol:
    synth: SynthConfig = field(default_factory=SynthConfig)
    frames: int = 12
    preset: str = "nano"
    # pretraining sees a handful of windows so 300 steps revisit each often
    pretrain_stride: int = 40
    pretrain_steps: int = 300
    pretrain_batch: int = 4
    pretrain_lr: float = 2e-2
    finetune_stride: int = 4
    finetune_steps: int = 300
    finetune_batch: int = 2
    finetune_lr: float = 1.5e-2
    finetune_mask_ratio: float = 0.6
    loss_window: int = 10


@dataclass
class DeskResult:
    seed: int
    pretrain_samples: int
    pretrain_reduction: float
    pmse: dict
    seconds: float

    @property
    def reduction_ok(self) -> bool:
        return self.pretrain_reduction >= 0.9

    @property
    def ordering_ok(self) -> bool:
        return self.pmse["full"] < self.pmse["no_pretrain"] and self.pmse["full"] < self.pmse["no_translation"]


def _epochs(n_samples: int, steps: int, batch: int) -> int:
    per_epoch = -(-n_samples // batch)
    return -(-steps // per_epoch)


def run_seed(seed: int, proto: DeskProtocol | None = None) -> DeskResult:
    proto = proto or DeskProtocol()
    t0 = time.perf_counter()
    c = Container(synth_generate(proto.synth, seed).astype(np.float32))
    train, test = split_manifests(f"synth-{seed}", c)
    h, w = c.frames.shape[1:]
    mcfg = ModelConfig.from_preset(proto.preset, proto.frames, h, w)

    pre_samples = build_sequences(train, proto.frames, proto.pretrain_stride, container=c)
    e = _epochs(len(pre_samples), proto.pretrain_steps, proto.pretrain_batch)
    pcfg = preset_config("desk", "pretrain", base_lr=proto.pretrain_lr, epochs=e,
                         warmup_epochs=max(1, e // 15), batch_size=proto.pretrain_batch, seed=seed)
    pre = run_pretrain(pcfg, pre_samples, mcfg)
    losses = [r.loss for r in pre.log][: proto.pretrain_steps]
    reduction = 1.0 - float(np.mean(losses[-proto.loss_window:])) / losses[0]

    ft_samples = build_sequences(train, proto.frames, proto.finetune_stride, container=c)
    test_samples = build_sequences(test, proto.frames, 1, container=c)
    e = _epochs(len(ft_samples), proto.finetune_steps, proto.finetune_batch)
    variants = {
        "full": ({}, pre),
        "no_pretrain": ({"no_pretrain": True}, None),
        "no_translation": ({"no_translation": True}, pre),
    }
    pmse = {}
    for name, (flags, init) in variants.items():
        cfg = preset_config("desk", "finetune", base_lr=proto.finetune_lr, epochs=e,
                            warmup_epochs=max(1, e // 15), batch_size=proto.finetune_batch,
                            mask_ratio=proto.finetune_mask_ratio, seed=seed, **flags)
        ck = run_finetune(cfg, ft_samples, mcfg, init=init, scaling=train.scaling)
        pmse[name] = evaluate(ck.build_model(), test_samples, train.scaling).overall["pmse"]
    return DeskResult(seed, len(pre_samples), reduction, pmse, time.perf_counter() - t0)


def describe(r: DeskResult) -> str:
    p = r.pmse
    return (f"seed {r.seed}: pretrain reduction {r.pretrain_reduction:.1%} over {r.pretrain_samples} samples; "
            f"test pMSE full {p['full']:.5f} no-pretrain {p['no_pretrain']:.5f} "
            f"no-translation {p['no_translation']:.5f}; ordering {'ok' if r.ordering_ok else 'VIOLATED'}; "
            f"{r.seconds:.0f}s")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--finetune-mask-ratio", type=float, default=0.6)
    args = ap.parse_args(argv)
    proto = DeskProtocol(finetune_mask_ratio=args.finetune_mask_ratio)
    results = []
    for s in args.seeds:
        results.append(run_seed(s, proto))
        print(describe(results[-1]), flush=True)
    print(f"protocol: {asdict(proto)}")
    print(f"reduction >= 90%: {sum(r.reduction_ok for r in results)}/{len(results)}; "
          f"ordering: {sum(r.ordering_ok for r in results)}/{len(results)}; "
          f"total {sum(r.seconds for r in results):.0f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
