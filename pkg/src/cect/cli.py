"""Command-line runner: ``cect <command> [options]``.

Exit codes: 0 success, 1 validation or configuration error, 2 numeric or
runtime error, 3 ingestion or other IO error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import reporting
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, RunConfig, dump_config, load_config
from .data import ImageSet, SplitSpec, load_manifest, split, synth_generate
from .errors import CectError, ConfigError, IngestionError, NonFiniteError
from .evaluation import evaluate, infer
from .experiments import ABLATION_COLUMNS, SWEEP_COLUMNS, Splits, ablate, sweep, train_and_test
from .gradcheck import check_model
from .model import CECT
from .rng import Rng
from .tsne import EmbeddingSet, tsne

log = logging.getLogger("cect")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file, or a preset name (reference, tiny, micro)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="base preset applied before --config")
    common.add_argument("--out", help="output directory (default: $CECT_OUT)")
    common.add_argument("--seed", type=int, help="run seed; overrides the config")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, repeatable")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="store_true")
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset directory or CSV manifest (default: synthetic data)")
    data.add_argument("--test", help="external test manifest; switches to a two-way split")

    p = _Parser(prog="cect", description="Multi-scale CNN + shifted-window transformer classifier.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    t = sub.add_parser("train", parents=[common, data], help="train and test one model")
    t.add_argument("--resume", action="store_true", help="continue from last.ckpt in the output directory")
    e = sub.add_parser("eval", parents=[common, data], help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    sub.add_parser("sweep", parents=[common, data], help="train one model per coefficient group")
    sub.add_parser("ablate", parents=[common, data], help="train the block/scale ablation rows")
    m = sub.add_parser("embed", parents=[common, data], help="export penultimate features and a t-SNE map")
    m.add_argument("--checkpoint", help="weights to embed with (default: freshly initialized)")
    s = sub.add_parser("synth", parents=[common], help="write the synthetic two-class dataset")
    s.add_argument("--n", type=int, help="images per class (default: data.synth_n)")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the whole model")
    g.add_argument("--draws", type=int, default=3, help="independent parameter/input draws")
    g.add_argument("--coords", type=int, default=2, help="coordinates sampled per tensor")
    g.add_argument("--batch", type=int, default=2)
    return p


def resolve_config(args) -> RunConfig:
    preset = args.preset or "reference"
    path = None
    if args.config:
        if Path(args.config).exists():
            path = args.config
        elif args.config in PRESETS:
            if args.preset and args.preset != args.config:
                raise ConfigError(f"--config {args.config} conflicts with --preset {args.preset}")
            preset = args.config
        else:
            raise FileNotFoundError(f"{args.config}: config file not found (and not a preset name)")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    return load_config(path, overrides, preset)


def output_dir(args) -> Path:
    out = args.out or os.environ.get("CECT_OUT")
    if not out:
        raise ConfigError("no output directory: pass --out or set CECT_OUT")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_splits(args, cfg: RunConfig, out: Path) -> Splits:
    r = cfg.model.input_resolution
    if args.data:
        manifest = load_manifest(args.data)
    else:
        manifest = synth_generate(cfg.data.synth_n, r, cfg.seed, out / "data")
        log.info("using %d synthetic images under %s", len(manifest), out / "data")
    if args.test:
        spec = SplitSpec(cfg.data.ratios, cfg.seed, "two-way")
        parts = split(manifest, spec, external_test=load_manifest(args.test))
    else:
        parts = split(manifest, SplitSpec(cfg.data.ratios, cfg.seed))
    for name, part in zip(("train", "val", "test"), parts):
        part.write_csv(out / f"split_{name}.csv")
    train, val, test = (ImageSet(m, r, cfg.augment) for m in parts)
    return Splits(train, val, test)


def _emit_eval(ev, out: Path, stem: str) -> None:
    reporting.emit_json(ev.to_dict(), out / f"{stem}.json")
    reporting.emit_csv([ev.to_dict()], list(ev.to_dict()), out / f"{stem}.csv")
    reporting.emit_confusion(ev.report.cm, out / f"{stem}_confusion.svg", title=stem)


def cmd_train(args, cfg, out):
    splits = load_splits(args, cfg, out)
    model = CECT(cfg.model, cfg.seed)
    if args.resume:
        from .training import fit
        run = fit(model, splits.train, splits.val, cfg.train, cfg.seed, out, cfg.model, resume=True, log=log.info)
        images, labels = splits.test.batch(range(len(splits.test)))
        ev = evaluate(model, images, labels, cfg.train.eval_batch_size)
    else:
        outcome = train_and_test(model, splits, cfg, out, log=log.info)
        run, ev = outcome.run, outcome.test
    reporting.emit_csv([{"step": i, "loss": v} for i, v in enumerate(run.step_losses)], ("step", "loss"),
                       out / "loss_trace.csv")
    save_checkpoint(out / "final.ckpt", model.state_dict(), cfg.model)
    _emit_eval(ev, out, "test_metrics")
    log.info("test acc %.4f", ev.report.acc)


def cmd_eval(args, cfg, out):
    splits = load_splits(args, cfg, out)
    model = CECT(cfg.model, cfg.seed)
    model.load_state_dict(load_checkpoint(args.checkpoint, cfg.model))
    images, labels = splits.test.batch(range(len(splits.test)))
    ev = evaluate(model, images, labels, cfg.train.eval_batch_size)
    _emit_eval(ev, out, "eval_metrics")
    log.info("acc %.4f on %d test images", ev.report.acc, len(labels))


def cmd_sweep(args, cfg, out):
    rows = sweep(cfg, load_splits(args, cfg, out), out_dir=out / "sweep", log=log.info)
    table = [r.to_dict() for r in rows]
    reporting.emit_csv(table, SWEEP_COLUMNS, out / "sweep.csv")
    reporting.emit_json([{**t, "error": r.outcome.error} for t, r in zip(table, rows)], out / "sweep.json")
    failed = [r for r in rows if r.outcome.error]
    if failed:
        raise NonFiniteError(f"{len(failed)} of {len(rows)} sweep groups failed; see sweep.json")


def cmd_ablate(args, cfg, out):
    results = ablate(cfg, load_splits(args, cfg, out), out_dir=out / "ablate", log=log.info)
    table = [r.to_dict() for r in results]
    reporting.emit_csv(table, ABLATION_COLUMNS, out / "ablation.csv")
    reporting.emit_json([{**t, "error": r.outcome.error} for t, r in zip(table, results)], out / "ablation.json")
    failed = [r for r in results if r.outcome.error]
    if failed:
        raise NonFiniteError(f"{len(failed)} of {len(results)} ablation rows failed; see ablation.json")


def cmd_embed(args, cfg, out):
    splits = load_splits(args, cfg, out)
    model = CECT(cfg.model, cfg.seed)
    if args.checkpoint:
        model.load_state_dict(load_checkpoint(args.checkpoint, cfg.model))
    feats, labels, tags = [], [], []
    for name, part in (("validation", splits.val), ("test", splits.test)):
        images, y = part.batch(range(len(part)))
        feats.append(infer(model, images, cfg.train.eval_batch_size, fn=model.extract_penultimate))
        labels.append(y)
        tags += [name] * len(y)
    emb = EmbeddingSet(np.concatenate(feats).astype(np.float64), np.concatenate(labels), tuple(tags))
    reporting.emit_embeddings(emb.matrix, emb.labels, out / "embeddings.csv")
    res = tsne(emb, cfg.tsne, cfg.seed)
    rows = [{"x": float(p[0]), "y": float(p[1]), "label": int(lab), "subset": tag}
            for p, lab, tag in zip(res.points, emb.labels, emb.subsets)]
    reporting.emit_csv(rows, ("x", "y", "label", "subset"), out / "tsne.csv")
    reporting.emit_json({"perplexity": res.perplexity, "kl_trace": res.kl_trace}, out / "tsne.json")
    log.info("embedded %d samples of width %d; final KL %.4f", *emb.matrix.shape, res.kl_trace[-1])


def cmd_synth(args, cfg, out):
    n = args.n if args.n is not None else cfg.data.synth_n
    m = synth_generate(n, cfg.model.input_resolution, cfg.seed, out)
    log.info("wrote %d images to %s", len(m), out)


def cmd_gradcheck(args, cfg, out):
    reports = []
    for draw in range(args.draws):
        model = CECT(cfg.model, cfg.seed + draw)
        rng = Rng(cfg.seed).child("gradcheck", draw)
        r = cfg.model.input_resolution
        images = rng.normal(size=(args.batch, cfg.model.input_channels, r, r))
        labels = np.arange(args.batch) % 2
        rep = check_model(model, images, labels, coords_per_tensor=args.coords, seed=cfg.seed + draw)
        log.info("draw %d: max rel err %.3e over %d coordinates (worst tensor %s, %d kinked skipped)", draw,
                 rep.max_rel_err, rep.n_checked, rep.worst_tensor, rep.n_kinked)
        reports.append(rep.to_dict())
    worst = max(r["max_rel_err"] for r in reports)
    reporting.emit_json({"max_rel_err": worst, "tol": reports[0]["tol"], "passed": worst < reports[0]["tol"],
                         "draws": reports}, out / "gradcheck.json")
    if worst >= reports[0]["tol"]:
        raise NonFiniteError(f"gradient check failed: max relative error {worst:.3e}")


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "ablate": cmd_ablate,
            "embed": cmd_embed, "synth": cmd_synth, "gradcheck": cmd_gradcheck}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (IngestionError, OSError)):
        return 3
    if isinstance(exc, (CectError, ValueError)) and not isinstance(exc, ArithmeticError):
        return 1
    return 2


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose else logging.INFO)
        logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr, force=True)
        cfg = resolve_config(args)
        out = output_dir(args)
        (out / "config.resolved").write_text(dump_config(cfg))
        HANDLERS[args.command](args, cfg, out)
        return 0
    except Exception as exc:  # mapped onto the documented exit codes
        code = exit_code(exc)
        print(f"cect: error: {exc}", file=sys.stderr)
        if logging.getLogger().isEnabledFor(logging.DEBUG):
            import traceback
            traceback.print_exc()
        return code


def main() -> None:
    sys.exit(run())
