"""``prolad`` command line: pretraining, evaluation, ablations and diagnostics.

Every :class:`~prolad.config.RunConfig` field is also a flag (``out_dir`` ->
``--out-dir``).  Values resolve as defaults < ``--config`` file < flags.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import harness
from . import similarity as sim
from .config import RunConfig, _base, _hint
from .errors import ConfigurationError, ProladError

log = logging.getLogger("prolad")

COMMANDS = ("pretrain", "finetune-eval", "ablate", "emd", "coeff", "profile-stats")

EXIT_CODES = {"configuration": 3, "input": 4, "contract": 5, "training": 6, "format": 7,
              "dimension": 8, "error": 1}


def _list_parser(elem, name):
    def parse(text):
        try:
            return [elem(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"--{name}: expected comma-separated numbers")
    return parse


def _add_config_flags(p):
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        base, _ = _base(_hint(f.name))
        if f.name == "widths":
            kind = _list_parser(int, "widths")
        elif f.name == "shifts":
            kind = _list_parser(float, "shifts")
        else:
            kind = base
        names = [flag, "--domains"] if f.name == "shifts" else [flag]
        p.add_argument(*names, dest=f.name, type=kind, default=argparse.SUPPRESS,
                       metavar=f.name.upper())


def build_parser():
    parser = argparse.ArgumentParser(
        prog="prolad", description="Adapter fine-tuning with adaptive distillation on synthetic domains.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    helps = {
        "pretrain": "train the backbone on the source domain",
        "finetune-eval": "fine-tune per episode with one method and report accuracy",
        "ablate": "run an ablation grid on shared episodes",
        "emd": "EMD domain-similarity matrix over the domain grid",
        "coeff": "per-episode adaptive coefficients",
        "profile-stats": "batch-statistics profiles and KDE curves per domain",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="JSON config file (flags override its values)")
        _add_config_flags(p)
        if name == "emd":
            p.add_argument("--samples", type=int, default=20,
                           help="images per class used for the prototypes")
        if name == "profile-stats":
            p.add_argument("--layer", default="block0", help="'all' or 'block{i}'")
            p.add_argument("--samples", type=int, default=100, help="profiling batches per domain")
            p.add_argument("--statistic", choices=("mean", "var"), default="mean")
    return parser


_EXTRA = ("config", "command", "verbose", "samples", "layer", "statistic")


def resolve_config(args):
    data = {}
    if getattr(args, "config", None):
        data.update(RunConfig.load(args.config).to_dict())
    for k, v in vars(args).items():
        if k not in _EXTRA:
            data[k] = v
    if data.get("out_dir") is None and os.environ.get("PROLAD_OUT_DIR"):
        data["out_dir"] = os.environ["PROLAD_OUT_DIR"]
    return RunConfig.from_dict(data)


def _require_out_dir(cfg):
    if cfg.out_dir is None:
        raise ConfigurationError("config field 'out_dir': pass --out-dir or set PROLAD_OUT_DIR")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ------------------------------------------------------------------------------------
def cmd_pretrain(cfg, args):
    out = _require_out_dir(cfg)
    _, result = harness.pretrain(cfg)
    cfg.save(out / "config.json")
    print(json.dumps({"checkpoint": str(harness.checkpoint_path(cfg)),
                      "final_loss": result["loss_history"][-1] if result["loss_history"] else None,
                      "val_acc": result.get("val_acc")}, sort_keys=True))


def cmd_finetune_eval(cfg, args):
    _require_out_dir(cfg)
    report = harness.run_eval(cfg)
    print(json.dumps(report.summary(), sort_keys=True, ensure_ascii=False))


def cmd_ablate(cfg, args):
    _require_out_dir(cfg)
    reports = harness.run_ablation_grid(cfg.kind, cfg)
    for r in reports.values():
        print(f"{r.method:28s} mean {r.mean:.4f} ± {r.ci95:.4f}  "
              + "  ".join(f"{g} {m:.4f}" for g, m in r.summary()["group_means"].items()))


def cmd_emd(cfg, args):
    out = _require_out_dir(cfg)
    backbone = harness.load_backbone(cfg)
    shifts, mat, emd = harness.similarity_matrix(cfg, backbone, args.samples)
    path = out / "emd_similarity.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s"] + [f"{s:g}" for s in shifts])
        for s, row in zip(shifts, mat):
            w.writerow([f"{s:g}"] + [repr(float(v)) for v in row])
    src = harness.source_similarity(cfg, backbone, args.samples)
    with open(out / "emd_to_source.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "emd", "similarity"])
        for s, e, v in src:
            w.writerow([f"{s:g}", repr(e), repr(v)])
    print(path)


def cmd_coeff(cfg, args):
    out = _require_out_dir(cfg)
    rows = harness.coefficient_trace(cfg)
    path = out / "coefficients.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    by_s = {}
    for r in rows:
        by_s.setdefault(r["s"], []).append(r["lambda_sim"])
    for s, v in sorted(by_s.items()):
        print(f"s={s:g} mean lambda_sim {np.mean(v):.4f}")
    print(path)


def cmd_profile_stats(cfg, args):
    out = _require_out_dir(cfg)
    backbone = harness.load_backbone(cfg)
    for dom, images in harness.profile_domains(cfg):
        prof = sim.profile_batch_stats(backbone, images, args.layer, args.statistic, args.samples,
                                       rng=np.random.default_rng([cfg.seed, dom.domain_id]))
        stem = f"s{dom.shift:g}_{args.layer}_{args.statistic}"
        prof.write_stats_csv(out / f"stats_{stem}.csv")
        prof.write_kde_csv(out / f"kde_{stem}.csv")
        print(f"s={dom.shift:g} KDE mode {prof.mode:.4f}")


HANDLERS = {"pretrain": cmd_pretrain, "finetune-eval": cmd_finetune_eval, "ablate": cmd_ablate,
            "emd": cmd_emd, "coeff": cmd_coeff, "profile-stats": cmd_profile_stats}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        HANDLERS[args.command](cfg, args)
    except ProladError as exc:
        print(f"prolad: {exc.category} error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
