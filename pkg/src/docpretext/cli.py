"""``docpretext`` command line.

Every subcommand writes its artifact plus ``<artifact>.run.json`` (for
directory outputs, ``<dir>/run.json``) recording the command, the resolved
config and its digest, the root seed, library versions and artifact digests.

Exit codes: 0 success, 1 usage or config error, 2 data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import ConfigError, ContractError, DecodeError, DomainError
from .seeding import derive_seed

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _versions() -> dict:
    import torch

    return {"docpretext": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "torch": torch.__version__}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_metadata(out: Path, command: str, rc: RunConfig, argv, extra=None) -> Path:
    out = Path(out)
    if out.is_dir():
        meta_path = out / "run.json"
        files = sorted(p for p in out.rglob("*") if p.is_file() and p != meta_path)
        artifacts = {str(p.relative_to(out)): _sha256(p) for p in files}
    else:
        meta_path = out.with_name(out.name + ".run.json")
        artifacts = {out.name: _sha256(out)}
    meta = {"command": command, "argv": list(argv), "config": rc.to_json(),
            "config_digest": rc.digest(), "seed": rc.seed, "versions": _versions(),
            "artifacts": artifacts}
    if extra:
        meta.update(extra)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta_path


# ---------------------------------------------------------------- commands

def cmd_permset_gen(args, rc):
    from .permset import select_permutations

    pset = select_permutations(rc["permset.cells"], rc["permset.count"], derive_seed(rc.seed, "permset"))
    pset.save(args.out)
    return args.out


def cmd_synth_gen(args, rc):
    from .eval_bench import LAYOUT_SHARE, synth_generate

    share = LAYOUT_SHARE if args.layout_share is None else args.layout_share
    synth_generate(args.per_class, args.classes, derive_seed(rc.seed, "synth") % 2**32, args.out,
                   size=rc["data.image_size"], layout_share=share)
    return Path(args.out)


def cmd_lda_fit(args, rc):
    from .manifest import Manifest
    from .topic_pipeline import fit_manifest

    model = fit_manifest(Manifest.load(args.manifest), rc["lda.topics"], alpha=rc["lda.alpha"],
                         beta=rc["lda.beta"], iters=rc["lda.iters"], seed=derive_seed(rc.seed, "lda"),
                         min_df=rc["lda.min_df"], max_size=rc["lda.max_size"])
    model.save(args.out)
    return args.out


def _thetas(model_path, manifest, rc):
    from .topic_pipeline import TopicModel, manifest_thetas

    return manifest_thetas(TopicModel.load(model_path), manifest, rc["lda.infer_iters"],
                           rc["lda.burn_in"], derive_seed(rc.seed, "lda-infer"))


def cmd_lda_infer(args, rc):
    from .manifest import Manifest
    from .topic_pipeline import write_soft_labels

    write_soft_labels(args.out, _thetas(args.model, Manifest.load(args.manifest), rc))
    return args.out


def cmd_pretrain(args, rc):
    from .manifest import Manifest
    from .model_training import JIGSAW, LDA, canonical_task, pretrain
    from .nat_targets import TargetBank
    from .permset import PermutationSet, select_permutations
    from .topic_pipeline import read_soft_labels

    task = canonical_task(args.task)
    manifest = Manifest.load(args.manifest)
    perms = thetas = bank = None
    if task == JIGSAW:
        perms = (PermutationSet.load(args.perms) if args.perms else
                 select_permutations(rc["permset.cells"], rc["permset.count"], derive_seed(rc.seed, "permset")))
    if task == LDA:
        if args.thetas:
            thetas = read_soft_labels(args.thetas)
        elif args.topics:
            thetas = _thetas(args.topics, manifest, rc)
        else:
            raise ConfigError("pretrain lda_topics needs --topics or --thetas")
    if args.targets:
        bank = TargetBank.load(args.targets)
    cfg = rc.train_config(permset_path=args.perms, topics_path=args.topics, thetas_path=args.thetas,
                          targets_path=args.targets)
    ckpt = pretrain(task, manifest, cfg, perms=perms, thetas=thetas, bank=bank, log_path=args.log)
    ckpt.save(args.out)
    return args.out


def _checkpoint(ref):
    from .eval_bench import RANDOM_INIT
    from .model_training import Checkpoint

    return RANDOM_INIT if ref == RANDOM_INIT else Checkpoint.load(ref)


def _eval(args, rc, sizes, repeats):
    from .eval_bench import MODES, benchmark, reports_to_json, summary_table
    from .manifest import Manifest, load_images

    mode = args.mode or rc["eval.mode"]
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    manifest = Manifest.load(args.manifest)
    cfg = rc.train_config()
    images = load_images(manifest, cfg.image_size)
    reports = []
    for ref in args.checkpoint:
        reports += benchmark(_checkpoint(ref), manifest, sizes, repeats, cfg, mode=mode, images=images,
                             workers=args.workers, C=rc["eval.probe_c"])
    Path(args.out).write_text(reports_to_json(reports) + "\n")
    print(summary_table(reports), end="")
    return args.out


def cmd_finetune(args, rc):
    return _eval(args, rc, [args.n_per_class], 1)


def cmd_benchmark(args, rc):
    return _eval(args, rc, list(rc["eval.sample_sizes"]), rc["eval.repeats"])


def cmd_viz(args, rc):
    from .imagecore import save_grayscale
    from .model_training import Checkpoint, gradient_ascent

    img, trace = gradient_ascent(Checkpoint.load(args.checkpoint), args.layer, args.filter,
                                 steps=rc["viz.steps"], step_size=rc["viz.step_size"],
                                 seed=derive_seed(rc.seed, "viz") % 2**32, size=args.size)
    save_grayscale(img, args.out)
    args._extra = {"activation_trace": trace}
    return args.out


def cmd_export_shards(args, rc):
    from .manifest import Manifest, load_images
    from .model_training import JIGSAW, canonical_task
    from .permset import PermutationSet, select_permutations
    from .pretext_geometry import export_shards

    task = canonical_task(args.task)
    pset = None
    if task == JIGSAW:
        pset = (PermutationSet.load(args.perms) if args.perms else
                select_permutations(rc["permset.cells"], rc["permset.count"], derive_seed(rc.seed, "permset")))
    manifest = Manifest.load(args.manifest)
    images = load_images(manifest, rc["data.image_size"])
    return export_shards(images, task, derive_seed(rc.seed, "shards"), args.out, pset=pset, spec=rc.grid_spec())


# ---------------------------------------------------------------- parser

# flag dest -> config key; flags left unset do not override anything
_FLAG_KEYS = {
    "seed": "seed.root", "cells": "permset.cells", "count": "permset.count",
    "steps": "train.steps", "lr": "train.learning_rate", "batch_size": "train.batch_size",
    "optimizer": "train.optimizer", "pool": "encoder.pool", "n_topics": "lda.topics",
    "alpha": "lda.alpha", "iters": "lda.iters", "repeats": "eval.repeats",
    "sizes": "eval.sample_sizes", "viz_steps": "viz.steps", "step_size": "viz.step_size",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="docpretext", description="Self-supervised pretraining for document images.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True, parser_class=_Parser)

    def command(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        p.add_argument("--seed", type=int, help="root seed (default: $DOCPRETEXT_SEED or 0)")
        p.add_argument("--out", required=True)
        return p

    p = command("permset-gen", cmd_permset_gen, "select a max-Hamming permutation set")
    p.add_argument("--cells", type=int)
    p.add_argument("--count", type=int)

    p = command("synth-gen", cmd_synth_gen, "render a labeled synthetic document corpus")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=150)
    p.add_argument("--layout-share", type=float)

    p = command("lda-fit", cmd_lda_fit, "fit a topic model on a manifest's text sidecars")
    p.add_argument("--manifest", required=True)
    p.add_argument("--topics", dest="n_topics", type=int, help="number of topics K")
    p.add_argument("--alpha", type=float)
    p.add_argument("--iters", type=int)

    p = command("lda-infer", cmd_lda_infer, "write per-document topic mixtures (soft labels)")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)

    p = command("pretrain", cmd_pretrain, "train an encoder on a pretext task")
    p.add_argument("task")
    p.add_argument("--manifest", required=True)
    p.add_argument("--topics", help="topic model JSON (lda)")
    p.add_argument("--thetas", help="soft-label JSONL (lda)")
    p.add_argument("--perms", help="permutation set JSON (jigsaw)")
    p.add_argument("--targets", help="target bank JSON (nat)")
    p.add_argument("--log", help="loss CSV")
    for flag, kind in (("--steps", int), ("--lr", float), ("--batch-size", int), ("--pool", int)):
        p.add_argument(flag, type=kind)
    p.add_argument("--optimizer", choices=("sgd", "adam"))

    for name, fn, help in (("finetune", cmd_finetune, "evaluate one checkpoint on one split"),
                           ("benchmark", cmd_benchmark, "repeated small-sample evaluation")):
        p = command(name, fn, help)
        p.add_argument("--checkpoint", nargs="+", required=True, help="checkpoint files or 'random-init'")
        p.add_argument("--manifest", required=True)
        p.add_argument("--mode", help="finetune or linear_probe")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--steps", type=int)
        p.add_argument("--pool", type=int)
        if name == "finetune":
            p.add_argument("--n-per-class", type=int, required=True)
        else:
            p.add_argument("--sizes", help="comma-separated samples per class")
            p.add_argument("--repeats", type=int)

    p = command("viz", cmd_viz, "gradient-ascent filter visualization")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--filter", type=int, required=True)
    p.add_argument("--steps", dest="viz_steps", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--size", type=int)

    p = command("export-shards", cmd_export_shards, "write pretext samples as PNG shards")
    p.add_argument("--task", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--perms")
    return parser


def _overrides(args) -> dict:
    out = {key: getattr(args, dest) for dest, key in _FLAG_KEYS.items()
           if getattr(args, dest, None) is not None}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


def cli(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise ConfigError("--workers must be at least 1")
        rc = load_config(args.config, _overrides(args))
        out = args.fn(args, rc)
        write_run_metadata(Path(out), args.command, rc, argv, getattr(args, "_extra", None))
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DomainError, DecodeError, ContractError, FileNotFoundError, OSError, json.JSONDecodeError,
            KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(cli())
