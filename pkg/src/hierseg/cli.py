"""Command-line front end: ``gen``, ``train``, ``eval`` and ``report``.

Every command accepts ``--config FILE`` (``key = value`` lines) and any
number of ``--set key=value`` overrides; dedicated flags such as ``--arch``
are shorthands for the matching keys.  Each run writes its resolved
configuration as ``run_config.txt`` next to its outputs.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import ConfigError, RunConfig, describe_keys, parse_config
from .metrics import region_masks
from .report import label_image, plot_curves, side_by_side, write_pgm, write_ppm
from .trainer import Checkpoint, CheckpointFormatError, evaluate, network_from_checkpoint, predict_labels, train

log = logging.getLogger("hierseg")

# flag -> config key
SHORTHANDS = {
    "seed": "seed",
    "count": "count",
    "arch": "arch",
    "loss": "loss",
    "workers": "workers",
    "iterations": "iterations",
    "lr": "lr",
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="hierseg",
        description="Nested-region tumor segmentation on synthetic phantoms.",
        epilog=describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="key = value configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        for flag in SHORTHANDS:
            sp.add_argument(f"--{flag}", default=None, help=f"shorthand for --set {SHORTHANDS[flag]}=...")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    for name, help_ in [
        ("gen", "generate phantoms and a manifest"),
        ("train", "train a network on a manifest"),
        ("eval", "score a checkpoint on a manifest"),
        ("report", "render loss curves and label maps"),
    ]:
        sp = common(sub.add_parser(name, help=help_, epilog=describe_keys(),
                                   formatter_class=argparse.RawDescriptionHelpFormatter))
        if name in ("train", "eval", "report"):
            sp.add_argument("--manifest", type=Path, required=name != "report")
        if name in ("eval", "report"):
            sp.add_argument("--checkpoint", type=Path, action="append", default=[], required=name == "eval")
        if name == "train":
            sp.add_argument("--resume", type=Path, help="continue from this checkpoint")
        if name == "report":
            sp.add_argument("--loss-csv", type=Path, action="append", default=[])
            sp.add_argument("--slices", type=int, default=2, help="slices to render per case")
    return p


def _resolve(args) -> RunConfig:
    text = args.config.read_text() if args.config else ""
    overrides = list(args.set)
    for flag, key in SHORTHANDS.items():
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={value}")
    return parse_config(text, overrides)


def cmd_gen(cfg: RunConfig, args) -> None:
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(cfg["count"]):
        vol, lab = D.generate_phantom(cfg.phantom_config(cfg["seed"] + i))
        vname, lname = f"case_{i:03d}_vol.bvol", f"case_{i:03d}_lab.bvol"
        D.write_bvol(out / vname, vol)
        D.write_bvol(out / lname, lab)
        pairs.append((vname, lname))
    D.write_manifest(out / "manifest.tsv", pairs)
    print(f"wrote {len(pairs)} cases to {out / 'manifest.tsv'}")


def cmd_train(cfg: RunConfig, args) -> None:
    tcfg = cfg.train_config()
    resume = Checkpoint.load(args.resume) if args.resume else None
    result = train(tcfg, args.manifest, resume=resume, out_dir=args.out)
    final = result.history[-1][1] if result.history else float("nan")
    print(f"trained {len(result.history)} iterations, final loss {final:.5f}; checkpoint in {args.out}")


def _cases(manifest: Path):
    return [D.load_case(v, l) for v, l in D.read_manifest(manifest)]


def cmd_eval(cfg: RunConfig, args) -> None:
    args.out.mkdir(parents=True, exist_ok=True)
    cases = _cases(args.manifest)
    for i, path in enumerate(args.checkpoint):
        scores = evaluate(Checkpoint.load(path), cases)
        name = "scores.csv" if len(args.checkpoint) == 1 else f"scores_{i}.csv"
        (args.out / name).write_text(scores.to_csv())
        print(scores.to_csv(), end="")


def cmd_report(cfg: RunConfig, args) -> None:
    args.out.mkdir(parents=True, exist_ok=True)
    curves = []
    for path in args.loss_csv:
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        curves.append(rows[:, 1] if rows.size else np.array([]))
    if curves:
        write_pgm(args.out / "loss_curves.pgm", plot_curves(curves))
    if args.manifest and args.checkpoint:
        nets = []
        for path in args.checkpoint:
            ck = Checkpoint.load(path)
            nets.append((network_from_checkpoint(ck), ck.config.get("loss") == "hdice"))
        for c, (vol, lab) in enumerate(_cases(args.manifest)):
            kept = D.slice_and_filter(D.normalize(vol), lab)
            if not len(kept):
                continue
            picks = np.linspace(0, len(kept) - 1, num=min(args.slices, len(kept))).round().astype(int)
            images = np.stack([kept[i][0] for i in picks]).astype(np.float32)
            truth = [kept[i][1] for i in picks]
            preds = [predict_labels(spec, images, hier) for spec, hier in nets]
            for j, z in enumerate(picks):
                panels = [label_image(truth[j])] + [label_image(p[j]) for p in preds]
                write_ppm(args.out / f"case{c:03d}_slice{kept.indices[z]:03d}.ppm", side_by_side(panels))
    print(f"report written to {args.out}")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def run(command: str, argv: list[str]) -> int:
    return main([command, *argv])


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _resolve(args)
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "run_config.txt").write_text(cfg.dumps())
        COMMANDS[args.command](cfg, args)
    except (ConfigError, D.BvolFormatError, CheckpointFormatError, FloatingPointError, ValueError, OSError) as exc:
        print(f"hierseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
