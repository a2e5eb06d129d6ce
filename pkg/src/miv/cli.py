"""Command line: ``miv <command> [--config run.json] [overrides]``.

Commands:

    synth      write a synthetic cohort as an embedding file + manifest
    split      write a patient-level split plan
    pretrain   train a contrastive projection head; write its checkpoint + loss history
    train      cross-validate an attention grid; write results + selected checkpoints
    eval       score a checkpoint on the test patients of a split
    plan       write a deduplication comparison plan
    gradcheck  run the finite-difference gradient suite

Exit status: 0 success, 1 invalid input or configuration, 2 numerical
failure (including a failed gradient check), 3 file or I/O error.
Diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import copy
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import numerics as nx
from .attention import AttentionConfig, default_grid
from .bagdata import (InstanceRecord, SynthConfig, build_split_exemplars, embedding_matrix,
                      make_split, patients_of, synth_generate, validate_split)
from .contrastive import embed_with_head, pretrain
from .errors import ConfigError, FormatError, MIVError, NumericalFailure, ValidationError
from .formats import (SEED_STREAMS, checkpoint_bytes, dumps_json, load_checkpoint, load_split,
                      read_embeddings, results_document, save_checkpoint, save_split,
                      simclr_config_from, validate_run_config, write_embeddings, write_json,
                      atomic_write_text, read_json)
from .planner import build_plan
from .training import TrainConfig, cross_validate, evaluate

log = logging.getLogger("miv")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "miv-run",
    "data": {"source": "synthetic", "synthetic": {}},
    "split": {"test_frac": 0.2, "k": 10, "policy": "one-per-polyp", "negative_ratio": 1.0},
    "grid": "default",
    "model": {},
    "train": {},
    "simclr": {},
}

EMBEDDINGS_NAME = "embeddings.mive"
SPLIT_NAME = "split.json"
HEAD_NAME = "head.ckpt"


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    """Reports usage errors as configuration errors (exit 1) instead of exiting with 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(args) -> dict:
    """Defaults, then the ``--config`` document, then command-line overrides; validated."""
    doc = {}
    if getattr(args, "config", None):
        doc = read_json(args.config)
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        validate_run_config(doc)
    cfg = _merge(DEFAULT_CONFIG, doc)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out", None):
        cfg["output_dir"] = args.out
    if getattr(args, "k", None) is not None and args.command in ("split", "train", "eval"):
        cfg["split"]["k"] = args.k
    if getattr(args, "n", None) is not None and args.command in ("synth", "split", "train", "eval",
                                                                 "pretrain"):
        cfg["data"]["synthetic"]["n_patients"] = args.n
    if getattr(args, "attention", None):
        cfg["grid"] = [{"kind": args.attention, "heads": args.heads or 1}]
    elif getattr(args, "heads", None):
        raise ConfigError("--heads needs --attention")
    return validate_run_config(cfg)


def sub_seed(cfg: dict, stream: str) -> int:
    return nx.derive_seed(cfg["seed"], SEED_STREAMS[stream])


def synth_config(cfg: dict) -> SynthConfig:
    s = dict(cfg["data"].get("synthetic", {}))
    if "polyp_probs" in s:
        s["polyp_probs"] = tuple(s["polyp_probs"])
    return SynthConfig(**s, seed=sub_seed(cfg, "synth"))


def load_records(cfg: dict) -> list[InstanceRecord]:
    data = cfg["data"]
    if data["source"] == "file":
        if "path" not in data:
            raise ConfigError("data.source is 'file' but data.path is missing")
        return read_embeddings(data["path"], data.get("input_dim"))
    records = synth_generate(synth_config(cfg))
    if "input_dim" in data and data["input_dim"] != records[0].embedding.shape[0]:
        raise ValidationError(f"synthetic latent_dim {records[0].embedding.shape[0]} does not "
                              f"match data.input_dim {data['input_dim']}")
    return records


def apply_head(cfg: dict, records):
    """Replace embeddings by frozen projection-head outputs when a head is configured."""
    path = cfg["data"].get("pretrained_head")
    if not path:
        return records
    head = load_checkpoint(path)
    if not hasattr(head, "out_dim"):
        raise ValidationError(f"{path} is not a projection-head checkpoint")
    z = embed_with_head(head, embedding_matrix(records))
    return [InstanceRecord(r.patient_id, r.polyp_id, r.view_index, z[i].astype(np.float32))
            for i, r in enumerate(records)]


def get_split(cfg: dict, records):
    out = Path(cfg["output_dir"])
    path = out / SPLIT_NAME
    if path.exists():
        plan = load_split(path)
        log.info("using split plan %s", path)
    else:
        sp = cfg["split"]
        plan = make_split(patients_of(records), sp["test_frac"], sp["k"], sub_seed(cfg, "split"))
    report = validate_split(plan, patients=patients_of(records))
    if not report.ok:
        raise ValidationError(str(report))
    return plan


def train_config(cfg: dict) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k != "folds"}
    return TrainConfig(**t, k=cfg["split"]["k"], seed=sub_seed(cfg, "train"))


def grid_of(cfg: dict) -> list[AttentionConfig]:
    model_dim = cfg["model"].get("model_dim", 512)
    if cfg["grid"] == "default":
        return default_grid(model_dim)
    return [AttentionConfig(g["kind"], g.get("heads", 1), model_dim) for g in cfg["grid"]]


def model_kwargs(cfg: dict) -> dict:
    return {k: cfg["model"][k] for k in ("hidden", "head_hidden", "dropout") if k in cfg["model"]}


def _slug(config: AttentionConfig) -> str:
    return f"{config.kind}-h{config.heads}"


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg):
    out = Path(cfg["output_dir"])
    records = synth_generate(synth_config(cfg))
    write_embeddings(out / EMBEDDINGS_NAME, records)
    print(f"wrote {len(records)} records ({len(patients_of(records))} patients, "
          f"dim {records[0].embedding.shape[0]}) to {out / EMBEDDINGS_NAME}")


def cmd_split(args, cfg):
    records = load_records(cfg)
    sp = cfg["split"]
    plan = make_split(patients_of(records), sp["test_frac"], sp["k"], sub_seed(cfg, "split"))
    data = build_split_exemplars(records, plan, nx.make_rng(sub_seed(cfg, "exemplars")),
                                 sp["policy"], sp["negative_ratio"])
    report = validate_split(plan, data.all())
    if not report.ok:
        raise ValidationError(str(report))
    path = Path(cfg["output_dir"]) / SPLIT_NAME
    save_split(path, plan)
    print(f"wrote {path}: {len(plan.test_patients)} test patients, "
          f"{plan.k} folds of {min(map(len, plan.folds))}-{max(map(len, plan.folds))}; {report}")


def cmd_pretrain(args, cfg):
    records = load_records(cfg)
    scfg = simclr_config_from({**cfg["simclr"], "seed": sub_seed(cfg, "pretrain")})
    x = embedding_matrix(records).astype(np.float64)
    n = cfg["simclr"].get("n_sources")
    if n is not None:
        x = x[nx.make_rng(sub_seed(cfg, "pretrain")).permutation(len(x))[:n]]
    start = time.perf_counter()
    result = pretrain(x, scfg, progress=lambda e, loss, lr: log.info("epoch %d loss %.4f lr %.2e",
                                                                        e, loss, lr))
    out = Path(cfg["output_dir"])
    save_checkpoint(out / HEAD_NAME, result.head)
    write_json(out / "pretrain_history.json",
               {"config": scfg.to_dict(), "seed": cfg["seed"], **result.to_dict()})
    write_json(out / "pretrain_log.json", {"seconds": time.perf_counter() - start,
                                           "finished": time.strftime("%Y-%m-%dT%H:%M:%S")})
    print(f"pretrained for {len(result.history)} epochs: loss {result.history[0]:.4f} -> "
          f"{result.history[-1]:.4f}; head written to {out / HEAD_NAME}")


def cmd_train(args, cfg):
    records = apply_head(cfg, load_records(cfg))
    plan = get_split(cfg, records)
    sp = cfg["split"]
    data = build_split_exemplars(records, plan, nx.make_rng(sub_seed(cfg, "exemplars")),
                                 sp["policy"], sp["negative_ratio"])
    tcfg = train_config(cfg)
    grid = grid_of(cfg)
    input_dim = records[0].embedding.shape[0]
    start = time.perf_counter()

    def progress(config, res):
        log.info("%s fold %d: best epoch %d, val loss %.4f, acc %.4f, AUC %.4f", config.label,
                 res.fold, res.best_epoch, res.best_val_loss, res.val_accuracy, res.val_auc)

    results = cross_validate(data, plan, tcfg, grid, input_dim, model_kwargs(cfg),
                             cfg["train"].get("folds"), progress)
    out = Path(cfg["output_dir"])
    seeds = {"master": cfg["seed"], **{k: sub_seed(cfg, k) for k in SEED_STREAMS}}
    write_json(out / "results.json", results_document(results, seeds, cfg))
    for r in results:
        save_checkpoint(out / "checkpoints" / f"{_slug(r.config)}.ckpt", r.selected.checkpoint)
    write_json(out / "run_log.json", {"seconds": time.perf_counter() - start,
                                      "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
                                      "version": __version__})
    for r in results:
        print(r.row())
    print(f"wrote {out / 'results.json'} ({sum(len(r.folds) for r in results)} fold entries)")


def cmd_eval(args, cfg):
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    model = load_checkpoint(args.checkpoint)
    if not hasattr(model, "config"):
        raise ValidationError(f"{args.checkpoint} is not a verification-model checkpoint")
    records = apply_head(cfg, load_records(cfg))
    if records[0].embedding.shape[0] != model.input_dim:
        raise ValidationError(f"data width {records[0].embedding.shape[0]} does not match the "
                              f"checkpoint's input dim {model.input_dim}")
    plan = get_split(cfg, records)
    sp = cfg["split"]
    data = build_split_exemplars(records, plan, nx.make_rng(sub_seed(cfg, "exemplars")),
                                 sp["policy"], sp["negative_ratio"])
    metrics = evaluate(model, data.test, cfg["train"].get("threshold", 0.5))
    doc = {"checkpoint": str(args.checkpoint), "attention": model.config.label,
           "test": metrics.to_dict()}
    write_json(Path(cfg["output_dir"]) / "eval.json", doc)
    print(f"{model.config.label}: {metrics}")


def cmd_plan(args, cfg):
    if args.n is None or args.k is None:
        raise ConfigError("plan needs --n and --k")
    plan = build_plan(args.n, args.k)
    if args.out:
        path = Path(args.out) / f"plan_n{args.n}_k{args.k}.txt"
        atomic_write_text(path, plan.to_text())
        print(f"wrote {len(plan)} comparisons to {path}")
    else:
        sys.stdout.write(plan.to_text())
    print(plan.summary())


def cmd_gradcheck(args, cfg):
    from .gradsuite import run_suite

    entries, seconds = run_suite(seed=args.seed or 0, progress=print)
    failed = [e.name for e in entries if not e.passed]
    print(f"{len(entries) - len(failed)}/{len(entries)} checks passed in {seconds:.1f} s")
    if failed:
        raise NumericalFailure(f"gradient check failed for: {', '.join(failed)}")


COMMANDS = {"synth": cmd_synth, "split": cmd_split, "pretrain": cmd_pretrain, "train": cmd_train,
            "eval": cmd_eval, "plan": cmd_plan, "gradcheck": cmd_gradcheck}


HELP = {
    "synth": "write a synthetic cohort as an embedding file + manifest",
    "split": "write a patient-level split plan",
    "pretrain": "train a contrastive projection head",
    "train": "cross-validate an attention grid and test the selected folds",
    "eval": "score a checkpoint on the test patients of a split",
    "plan": "write a deduplication comparison plan",
    "gradcheck": "run the finite-difference gradient suite",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="miv", description="Multi-instance verification toolkit.")
    parser.add_argument("--version", action="version", version=f"miv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", metavar="PATH", help="run configuration (JSON)")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", metavar="DIR", help="output directory override")
        p.add_argument("--n", type=int, help="plan: detections; data commands: synthetic patients")
        p.add_argument("--k", type=int, help="plan: bag size; split/train/eval: folds")
        p.add_argument("--attention", choices=["mean", "max", "vema", "dba_l1", "dba_l2", "mhsce"],
                       help="train a single pooling configuration")
        p.add_argument("--heads", type=int, help="head count for --attention")
        p.add_argument("-v", "--verbose", action="store_true", help="progress logging")
        if name == "eval":
            p.add_argument("--checkpoint", metavar="PATH", help="model checkpoint to score")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        cfg = resolve_config(args) if args.command != "plan" else {}
        COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FormatError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValidationError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MIVError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
