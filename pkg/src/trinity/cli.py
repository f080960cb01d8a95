"""Batch command line: generate, train, eval, infer, visualize.

Every command writes its outputs through temporary files renamed on success
and reports failures as one ``trinity: error: <Kind>: <message>`` line with
exit status 2.
"""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig
from .dataset_io import (
    LabelMap,
    Taxonomy,
    atomic_write_bytes,
    concat_manifests,
    encode_labels,
    encode_ppm,
    load_manifest,
    load_taxonomy,
    read_image,
    read_labels,
)
from .datagen import generate_dataset
from .errors import ConfigError, TrinityError
from .metrics import Prediction, RegionProposalSet, evaluate, extract_ca_proposals, proposals_from_labels, read_masks
from .model import TrinityNet, predict_labels
from .training import train
from .visualize import overlay

log = logging.getLogger("trinity")

CHECKPOINT_NAME = "model.trin"
RUN_CONFIG_NAME = "run.cfg"
TRACE_NAME = "loss.csv"


def _threads() -> int:
    raw = os.environ.get("TRINITY_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"TRINITY_THREADS must be an integer, got {raw!r}") from None


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    return cfg


def _load_manifests(paths):
    if not paths:
        raise ConfigError("at least one --manifest is required")
    return concat_manifests([load_manifest(p) for p in paths])


def _load_model(ckpt_path, cfg: RunConfig | None, taxonomy: Taxonomy | None = None) -> tuple[TrinityNet, RunConfig]:
    ckpt_path = Path(ckpt_path)
    if cfg is None or not cfg.values:
        sidecar = ckpt_path.parent / RUN_CONFIG_NAME
        if not sidecar.exists():
            raise FileNotFoundError(f"no run config next to checkpoint: {sidecar}")
        cfg = RunConfig.load(sidecar)
    num_cs, num_slots = cfg.get("model.num_cs"), cfg.get("model.num_slots")
    if taxonomy is not None:
        num_cs, num_slots = taxonomy.num_cs, taxonomy.ca_slots
    if num_cs is None or num_slots is None:
        raise ConfigError("run config lacks model.num_cs / model.num_slots")
    model = TrinityNet(cfg.model_config(num_cs, num_slots))
    model.load_state_dict(checkpoint.load(ckpt_path))
    return model, cfg


# -- commands ----------------------------------------------------------------------------
def cmd_generate(args) -> None:
    cfg = _run_config(args)
    if args.seed is not None:
        cfg.set("gen.seed", args.seed)
    gen = cfg.gen_config()
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise ConfigError(f"output directory {out} is not empty")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        manifest = generate_dataset(gen, args.n, tmp, workers=_threads())
        if args.n == 0:
            (tmp / "taxonomy.txt").write_text(gen.taxonomy().to_text(), encoding="utf-8")
            (tmp / "manifest.txt").write_text("version = 1\ntaxonomy = taxonomy.txt\n", encoding="utf-8")
        if out.exists():
            out.rmdir()
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote {len(manifest)} scenes to {out}")


def cmd_train(args) -> None:
    cfg = _run_config(args)
    if args.seed is not None:
        cfg.set("train.seed", args.seed)
        cfg.set("model.seed", args.seed)
    if args.steps is not None:
        cfg.set("train.steps", args.steps)
    manifest = _load_manifests(args.manifest)
    tax = manifest.taxonomy
    cfg.set("model.num_cs", tax.num_cs)
    cfg.set("model.num_slots", tax.ca_slots)
    mcfg = cfg.model_config(tax.num_cs, tax.ca_slots)
    tcfg = cfg.train_config()
    samples = manifest.split(args.split) if args.split != "all" else manifest.samples
    if not samples:
        raise ConfigError(f"no samples in split {args.split!r}")
    model = TrinityNet(mcfg)
    data = [(model.encode(read_image(s.image)), read_labels(s.labels, tax.num_cs)) for s in samples]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".train.", dir=out))
    try:
        ckpt_dir = None
        if tcfg.checkpoint_every:
            ckpt_dir = tmp / "checkpoints"
            ckpt_dir.mkdir()
        every = max(1, tcfg.steps // 20)
        result = train(model, data, tcfg, ckpt_dir,
                       progress=lambda s, l: log.info("step %d loss %.4f", s, l) if s % every == 0 else None)
        checkpoint.save(tmp / CHECKPOINT_NAME, model.state_dict())
        (tmp / TRACE_NAME).write_text(result.csv(), encoding="utf-8")
        (tmp / RUN_CONFIG_NAME).write_text(cfg.to_text(), encoding="utf-8")
        for name in (CHECKPOINT_NAME, TRACE_NAME, RUN_CONFIG_NAME):
            os.replace(tmp / name, out / name)
        if ckpt_dir is not None:
            dest = out / "checkpoints"
            dest.mkdir(exist_ok=True)
            for p in sorted(ckpt_dir.iterdir()):
                os.replace(p, dest / p.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    print(f"trained {tcfg.steps} steps; loss {result.trace[0][1]:.4f} -> {result.trace[-1][1]:.4f}; wrote {out}")


def _proposal_prediction(pdir: Path, sample_id: str, num_cs: int) -> Prediction:
    lbl = pdir / f"{sample_id}.tlbl"
    msk = pdir / f"{sample_id}.masks"
    if not lbl.exists() and not msk.exists():
        raise FileNotFoundError(f"no prediction for sample {sample_id}: expected {lbl} or {msk}")
    cs_codes = None
    proposals = RegionProposalSet([], "external")
    if lbl.exists():
        labels = read_labels(lbl, num_cs)
        cs_codes = labels.codes
        proposals = proposals_from_labels(labels)
    if msk.exists():
        proposals = RegionProposalSet(read_masks(msk), "external")
    return Prediction(cs_codes, proposals)


def cmd_eval(args) -> None:
    cfg = _run_config(args)
    if (args.checkpoint is None) == (args.proposal_dir is None):
        raise ConfigError("give exactly one of --checkpoint or --proposal-dir")
    manifest = _load_manifests(args.manifest)
    tax = manifest.taxonomy
    threshold = args.threshold if args.threshold is not None else cfg.get("eval.threshold", 0.0)
    samples = manifest.split(args.split) if args.split != "all" else manifest.samples
    if not samples:
        raise ConfigError(f"no samples in split {args.split!r}")
    if args.checkpoint is not None:
        model, _ = _load_model(args.checkpoint, cfg if args.config else None, tax)

        def predictions():
            for s in samples:
                logits = model.forward(read_image(s.image)).logits.data
                yield s, Prediction(predict_labels(logits, tax.num_cs), extract_ca_proposals(logits, tax.num_cs))
    else:
        pdir = Path(args.proposal_dir)
        if not pdir.is_dir():
            raise FileNotFoundError(f"proposal directory not found: {pdir}")

        def predictions():
            for s in samples:
                yield s, _proposal_prediction(pdir, s.id, tax.num_cs)

    report = evaluate(predictions(), tax, threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    text_path = out.with_suffix(".txt")
    atomic_write_bytes(text_path, report.to_table().encode("utf-8"))
    atomic_write_bytes(out, report.to_json().encode("utf-8"))
    sys.stdout.write(report.to_table())


def cmd_infer(args) -> None:
    cfg = _run_config(args)
    tax = load_taxonomy(args.taxonomy) if args.taxonomy else None
    model, _ = _load_model(args.checkpoint, cfg if args.config else None, tax)
    image = read_image(args.image)
    logits = model.forward(image).logits.data
    labels = LabelMap(predict_labels(logits, model.cfg.num_cs), model.cfg.num_cs)
    atomic_write_bytes(args.out, encode_labels(labels))
    print(f"wrote {args.out}: {labels.num_regions} terrain regions")


def cmd_visualize(args) -> None:
    if args.taxonomy:
        num_cs = load_taxonomy(args.taxonomy).num_cs
    elif args.num_cs is not None:
        num_cs = args.num_cs
    else:
        raise ConfigError("give --taxonomy or --num-cs to interpret the label codes")
    image = read_image(args.image)
    labels = read_labels(args.labels, num_cs)
    atomic_write_bytes(args.out, encode_ppm(overlay(image, labels, seed=args.seed or 0)))
    print(f"wrote {args.out}")


# -- entry point --------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trinity", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="key = value run config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("generate", help="write a procedural dataset")
    common(p)
    p.add_argument("-n", type=int, required=True, help="number of scenes")
    p.add_argument("--out", required=True, help="output directory (must be empty or absent)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on one or more manifests")
    common(p)
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--split", default="train", choices=("train", "val", "test", "all"))
    p.add_argument("--out", required=True, help="output directory for model.trin, loss.csv, run.cfg")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a directory of predictions")
    common(p, seed=False)
    p.add_argument("--checkpoint")
    p.add_argument("--proposal-dir", help="per-sample <id>.tlbl and/or <id>.masks files")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--threshold", type=float, help="IoU a match must exceed (default 0)")
    p.add_argument("--out", required=True, help="report JSON; a .txt table is written alongside")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict a label map for one image")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--taxonomy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("visualize", help="overlay labels on an image")
    p.add_argument("--image", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--taxonomy")
    p.add_argument("--num-cs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (TrinityError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"trinity: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
