"""Command-line entry point: ``janus <command> [options]``.

Exit status is 0 on success, 1 when a verification command finds a failure
and 2 on usage or input errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import numerics as nx
from .encoder import ModelConfig
from .evaluation import compare_paradigms, eval_last_token
from .finetune import finetune, read_task_tsv
from .fusion import build_mask
from .genome_io import FastaParseError, SequenceBatch, read_fasta, synth_corpus, windows
from .model import JanusModel, audit_params, leakage_check
from .training import CheckpointError, TrainingAborted, janus_loss, load_checkpoint, train

log = logging.getLogger("janus")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def compact_float(x: float, digits: int = 1) -> str:
    """Scientific notation without exponent padding: 0.0e0, 1.2e-7, 1e-5."""
    if x == 0:
        return f"{0:.{digits}f}e0"
    mantissa, exp = f"{x:.{digits}e}".split("e")
    return f"{mantissa}e{int(exp)}"


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", metavar="PATH", help="run configuration (.cfg text or a manifest.json)")
        p.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="set one dotted config key, e.g. train.steps=10 (repeatable)",
        )
        p.add_argument("--seed", type=int, help="seed for model, data order and fine-tuning (beats JANUS_SEED)")
    p.add_argument("--out", metavar="DIR", default=".", help="output directory (default: current directory)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="janus", description="Janus bidirectional pretraining toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("pretrain", help="pretrain a model and write metrics and checkpoints")
    _common(p)
    p.add_argument("--resume", metavar="CKPT", help="continue training from a checkpoint")
    p.add_argument("--stop-at", type=int, metavar="STEP", help="stop after this many steps in total")

    p = sub.add_parser("eval", help="last-token accuracy and perplexity of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="CKPT", help="checkpoint to score")
    p.add_argument("--objective", choices=["janus", "mlm"], help="scoring protocol (default: the checkpoint's)")

    p = sub.add_parser("finetune", help="train a strand-symmetric classifier on TSV task data")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="CKPT", help="pretrained backbone")
    p.add_argument("--train", required=True, metavar="TSV", help="training rows: sequence<TAB>label")
    p.add_argument("--val", required=True, metavar="TSV", help="validation rows: sequence<TAB>label")

    p = sub.add_parser("compare", help="paired Janus vs masked-LM learning curves")
    _common(p)

    p = sub.add_parser("mask-dump", help="print the fusion mask as a 0/1 grid and write text and PBM files")
    p.add_argument("--T", type=int, required=True, help="sequence length")
    _common(p, config=False)

    p = sub.add_parser("leakage-check", help="verify that no prediction row sees its own target")
    _common(p)
    p.add_argument("--T", type=int, default=16, help="sequence length (default 16)")
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32", help="precision (default float32)")
    p.add_argument("--tol", type=float, help="tolerance (default 1e-5 at float32, 1e-10 at float64)")

    p = sub.add_parser("grad-check", help="finite-difference check of a micro model's gradients")
    _common(p)
    p.add_argument("--T", type=int, default=6, help="sequence length (default 6)")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum relative error (default 1e-4)")
    p.add_argument("--max-coords", type=int, metavar="K", help="check at most K coordinates per parameter")

    p = sub.add_parser("audit-params", help="total vs activated parameter counts")
    _common(p)
    return parser


# ---------------------------------------------------------------------------
# helpers


class Manifest:
    def __init__(self, args: argparse.Namespace, argv: list[str]):
        self.command = args.command
        self.argv = argv
        self.inputs: dict[str, str] = {}
        self.config: dict | None = None
        self.seed: int | None = None
        self.extra: dict = {}

    def add_input(self, path) -> None:
        path = Path(path)
        self.inputs[str(path)] = git_blob_hash(path.read_bytes())

    def write(self, out: Path) -> Path:
        out.mkdir(parents=True, exist_ok=True)
        body = {
            "command": self.command,
            "argv": self.argv,
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
            **self.extra,
        }
        path = out / "manifest.json"
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return path


def _resolve(args, manifest: Manifest) -> cfgmod.RunConfig:
    if args.config:
        manifest.add_input(args.config)
    cfg = cfgmod.resolve(args.config, args.override, args.seed)
    manifest.config = cfg.flat()
    manifest.seed = cfg.train.seed
    return cfg


def _records(source: str, n: int, length: int, seed: int, manifest: Manifest):
    if source.startswith("synth:"):
        return synth_corpus(source[len("synth:") :], seed, n, length)
    manifest.add_input(source)
    return read_fasta(source)


def _test_set(cfg: cfgmod.RunConfig, manifest: Manifest, seq_len: int):
    d = cfg.data
    recs = _records(d.test, d.test_records, seq_len, d.test_seed, manifest)
    test = windows(recs, seq_len)
    if len(test.ids) == 0:
        raise UsageError(f"data.test: no windows of length {seq_len}")
    return test


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args, cfg, manifest, out: Path) -> int:
    d = cfg.data
    corpus = _records(d.corpus, d.synth_records, d.synth_length, d.synth_seed, manifest)
    resume = None
    if args.resume:
        manifest.add_input(args.resume)
        resume = load_checkpoint(args.resume)
    try:
        result = train(cfg.model, cfg.train, corpus, out_dir=out, resume=resume, stop_at=args.stop_at)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    last = result.metrics[-1] if result.metrics else None
    if last:
        print(f"step {last['step']}: CE {last['ce']:.4f} perplexity {last['ppl']:.4f}")
    return EXIT_OK


def cmd_eval(args, cfg, manifest, out: Path) -> int:
    manifest.add_input(args.checkpoint)
    ckpt = load_checkpoint(args.checkpoint)
    objective = args.objective or (ckpt.train_config.objective if ckpt.train_config else "janus")
    seq_len = ckpt.train_config.seq_len if ckpt.train_config else cfg.train.seq_len
    test = _test_set(cfg, manifest, seq_len)
    report = eval_last_token(ckpt.model(), objective, test, model_id=Path(args.checkpoint).stem)
    report.to_csv(out / "eval_report.csv")
    print(report.summary())
    return EXIT_OK


def cmd_finetune(args, cfg, manifest, out: Path) -> int:
    for p in (args.checkpoint, args.train, args.val):
        manifest.add_input(p)
    ckpt = load_checkpoint(args.checkpoint)
    f = cfg.finetune
    result = finetune(
        ckpt,
        read_task_tsv(args.train),
        read_task_tsv(args.val),
        epochs=f.epochs,
        lr=f.lr,
        batch_size=f.batch_size,
        backbone_lr_scale=f.backbone_lr_scale,
        patience=f.patience,
        seed=f.seed,
        out_dir=out,
    )
    print(f"best validation accuracy {result.best_val_accuracy:.4f} at epoch {result.best_epoch}")
    return EXIT_OK


def cmd_compare(args, cfg, manifest, out: Path) -> int:
    d = cfg.data
    corpus = _records(d.corpus, d.synth_records, d.synth_length, d.synth_seed, manifest)
    test = _test_set(cfg, manifest, cfg.train.seq_len)
    pair = (
        replace(cfg.train, objective="janus"),
        replace(cfg.train, objective="mlm"),
    )
    result = compare_paradigms(cfg.model, pair, corpus, test, cfg.eval.every, out_csv=out / "curves.csv")
    j, m = result.final("janus"), result.final("mlm")
    print(f"final accuracy: janus {j.accuracy:.4f}, mlm {m.accuracy:.4f}")
    return EXIT_OK


def cmd_mask_dump(args, manifest, out: Path) -> int:
    if args.T < 2:
        raise UsageError("--T must be at least 2")
    mask = build_mask(args.T)
    manifest.extra["T"] = args.T
    (out / f"mask_T{args.T}.txt").write_text(mask.to_text())
    (out / f"mask_T{args.T}.pbm").write_text(mask.to_pbm())
    sys.stdout.write(mask.to_text())
    return EXIT_OK


def cmd_leakage(args, cfg, manifest, out: Path) -> int:
    dtype = np.float32 if args.dtype == "float32" else np.float64
    tol = args.tol if args.tol is not None else (1e-5 if dtype is np.float32 else 1e-10)
    if args.T < 2:
        raise UsageError("--T must be at least 2")
    report = leakage_check(cfg.model, cfg.model.seed, args.T, dtype=dtype)
    manifest.extra["result"] = {"max_diff": report.max_diff, "tol": tol}
    sign = "≤" if report.passed(tol) else ">"
    print(f"max diff {compact_float(report.max_diff)} {sign} {compact_float(tol, 0)}")
    if not report.passed(tol):
        print(report.failure(tol), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def micro_model_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(d_model=8, n_layers=2, n_experts=4, n_heads=2, mid_attention=0, fusion_rel_window=2, seed=seed)


def micro_grad_check(seed: int, T: int, max_coords: int | None = None) -> nx.GradCheckReport:
    """Check every parameter of a micro model against central differences."""
    cfg = micro_model_config(seed)
    with nx.precision(np.float64):
        model = JanusModel(cfg, dtype=np.float64)
        ids = np.random.default_rng([seed, 3]).integers(0, 4, size=(2, T))
        batch = SequenceBatch.from_ids(ids)

        def loss():
            return janus_loss(batch, model).total

        return nx.grad_check(loss, model.params, max_coords=max_coords, seed=seed)


def cmd_grad_check(args, cfg, manifest, out: Path) -> int:
    report = micro_grad_check(cfg.model.seed, args.T, args.max_coords)
    err = report.max_rel_error
    manifest.extra["result"] = {"max_rel_error": err, "tol": args.tol}
    ok = report.passed(args.tol)
    print(f"max relative error {compact_float(err)} {'<' if ok else '≥'} {compact_float(args.tol, 0)} over {report.n_coords} coordinates")
    if not ok:
        print(f"worst: {report.worst}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_audit(args, cfg, manifest, out: Path) -> int:
    audit = audit_params(cfg.model)
    manifest.extra["result"] = {"total": audit.total, "activated": audit.activated}
    print(audit.report())
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "eval": cmd_eval,
    "finetune": cmd_finetune,
    "compare": cmd_compare,
    "leakage-check": cmd_leakage,
    "grad-check": cmd_grad_check,
    "audit-params": cmd_audit,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    manifest = Manifest(args, argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "mask-dump":
            code = cmd_mask_dump(args, manifest, out)
        else:
            cfg = _resolve(args, manifest)
            code = COMMANDS[args.command](args, cfg, manifest, out)
    except (UsageError, cfgmod.ConfigError, CheckpointError, FastaParseError, FileNotFoundError, ValueError) as exc:
        print(f"janus {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
