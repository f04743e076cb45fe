"""``nanovoice`` command-line entry point.

Every subcommand writes ``<name>.json`` and ``<name>.csv`` reports into the
output directory and exits nonzero when one of the report's checks fails.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .adapters import SharingMode, load_bank
from .config import ExperimentConfig, format_config, load_config
from .container import write_atomic
from .errors import NanoVoiceError
from . import experiments as ex

log = logging.getLogger("nanovoice")

COMMANDS = ("pretrain", "adapt", "sample", "eval", "count-params", "gradcheck", "ablate-sharing",
            "ablate-scale", "sweep-batch", "bench", "groups")


def build_parser():
    parser = argparse.ArgumentParser(prog="nanovoice", description="Batch-wise multi-speaker adapters on a toy score model.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--mode", choices=["batchwise", "shared-b", "shared-a", "shared-both"])
    parser.add_argument("--no-scale", action="store_true", help="disable the scale matrix (implies --no-norm)")
    parser.add_argument("--no-norm", action="store_true", help="keep the scale matrix, drop the column normalization")
    parser.add_argument("--freeze-b", action="store_true", help="hold the shared B at its initialization")
    parser.add_argument("--speakers", type=int)
    parser.add_argument("--iters", type=int)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    if args.mode is not None:
        changes["mode"] = SharingMode.parse(args.mode).value
    if args.no_scale:
        changes.update(scale=False, norm=False)
    if args.no_norm:
        changes["norm"] = False
    if args.freeze_b:
        changes["freeze_b"] = True
    if args.speakers is not None:
        changes["speakers"] = args.speakers
    if args.iters is not None:
        changes["iters"] = args.iters
    return cfg.replace(**changes)


def _saved_samples(cfg):
    """Mels from a previous ``sample`` run in the same output directory, if they fit."""
    path = os.path.join(cfg.out, "samples.npz")
    if not os.path.exists(path):
        return None
    with np.load(path) as data:
        ids = tuple(int(i) for i in data["speaker_ids"])
        seed = int(data["seed"]) if "seed" in data else None
        mels = data["mels"]
    # speaker ids repeat across seeds, so the seed must match as well
    if seed != cfg.seed or ids != ex.reference_batch(cfg, cfg.seed).speaker_ids:
        log.info("ignoring %s: it was generated for other speakers", path)
        return None
    return mels


def run(cfg: ExperimentConfig, command: str):
    """Execute one subcommand; returns its report (already written to ``cfg.out``)."""
    if command == "pretrain":
        _, report = ex.cmd_pretrain(cfg)
    elif command == "count-params":
        report = ex.cmd_count_params(cfg)
    elif command == "gradcheck":
        report = ex.cmd_gradcheck(cfg)
    else:
        net = ex.get_net(cfg)
        if command == "adapt":
            _, report = ex.cmd_adapt(net, cfg)
        elif command in ("sample", "eval"):
            bank = load_bank(os.path.join(cfg.out, "bank.nvbk"), num_speakers=cfg.speakers,
                             layer_dims=net.adapted_layer_dims())
            if command == "sample":
                _, report = ex.cmd_sample(net, bank, cfg)
            else:
                report = ex.cmd_eval(net, bank, cfg, mels=_saved_samples(cfg))
        elif command == "ablate-sharing":
            report = ex.cmd_ablation_sharing(net, cfg)
        elif command == "ablate-scale":
            report = ex.cmd_ablation_scale(net, cfg)
        elif command == "sweep-batch":
            report = ex.cmd_batchsize_sweep(net, cfg)
        elif command == "bench":
            report = ex.cmd_bench(net, cfg)
        else:
            report = ex.cmd_groups(net, cfg)
    os.makedirs(cfg.out, exist_ok=True)
    report.write(cfg.out)
    write_atomic(os.path.join(cfg.out, "config.txt"), format_config(cfg).encode())
    return report


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        report = run(cfg, args.command)
    except (NanoVoiceError, FileNotFoundError) as exc:
        print(f"nanovoice: error: {exc}", file=sys.stderr)
        return 2
    for name, ok in report.checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    if report.summary.get("failures"):
        for line in report.summary["failures"]:
            print(f"  {line}")
    print(f"wrote {os.path.join(cfg.out, report.name)}.json and .csv")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
