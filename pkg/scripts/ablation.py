"""Ablation table through the command line: one pretrain, five fine-tunes, five evaluations.

Writes <out>/ablation.csv with the overall report row of each variant.

    python3 scripts/ablation.py --out runs/ablation [--data synth.sptk] [--config desk.txt]
"""
from __future__ import annotations

import argparse
from pathlib import Path

from spatspark import cli
from spatspark.metrics import REPORT_COLUMNS, read_report

VARIANTS = {
    "full": [],
    "no_pretrain": ["--no-pretrain"],
    "freeze_encoder": ["--freeze", "encoder"],
    "freeze_decoder": ["--freeze", "decoder"],
    "freeze_both": ["--freeze", "both"],
}


def _run(*argv) -> None:
    code = cli.main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"spatspark {' '.join(map(str, argv))} exited with {code}")


def run_ablation(out: Path, data: Path | None = None, config: Path | None = None,
                 variants: dict | None = None) -> dict[str, dict]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = out / "synth.sptk"
        _run("synth", "--out", data)
    common = ["--data", data, *(["--config", config] if config else [])]
    _run("pretrain", *common, "--out", out / "pretrain")
    init = out / "pretrain" / "pretrain.ckpt"
    rows = {}
    for name, flags in (variants or VARIANTS).items():
        d = out / name
        src = [] if "--no-pretrain" in flags else ["--init", init]
        _run("finetune", *common, *src, *flags, "--out", d)
        _run("evaluate", *common, "--ckpt", d / "finetune.ckpt", "--out", d)
        rows[name] = read_report(d / "report.csv")["overall"]
    fmt = lambda v: "NA" if v is None else repr(float(v))
    lines = [",".join(("variant",) + tuple(REPORT_COLUMNS))]
    lines += [",".join([name] + [fmt(row[k]) for k in REPORT_COLUMNS]) for name, row in rows.items()]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--data", type=Path)
    ap.add_argument("--config", type=Path)
    args = ap.parse_args(argv)
    rows = run_ablation(args.out, args.data, args.config)
    for name, row in rows.items():
        print(f"{name:15s} pmse {row['pmse']:.5f} csi {row['csi']} hss {row['hss']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
