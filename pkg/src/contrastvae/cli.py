"""``contrastvae`` command line: prepare, train, evaluate, analyze.

Exit codes: 0 success, 2 input or usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from contrastvae import schemas
from contrastvae.checkpoint import load_checkpoint, model_from_checkpoint
from contrastvae.config import RunConfig
from contrastvae.data import filter_and_index, leave_one_out_split, load_interactions, load_split, save_split
from contrastvae.errors import CheckpointError, ConfigError, DataError, NumericError
from contrastvae.evaluation import evaluate, lambda_sweep

log = logging.getLogger("contrastvae")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageExit(f"{self.prog}: error: {message}")


class _UsageExit(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="contrastvae", description="Two-branch contrastive VAE for sequential recommendation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pr = sub.add_parser("prepare", help="filter, index and split an interaction TSV")
    pr.add_argument("--input", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--min-count", type=int, default=5)
    pr.add_argument("--max-len", type=int, default=50)

    tr = sub.add_parser(
        "train",
        help="train a model",
        epilog="Any further --section.key value pairs override the config, e.g. --model.d 64 --augmentation MA.",
    )
    tr.add_argument("--config", help="run config JSON (defaults if omitted)")
    tr.add_argument("--split", help="prepared split directory (overrides config)")
    tr.add_argument("--out", help="output directory (overrides config)")
    tr.add_argument("--resume", help="resume from a last.ckpt")

    ev = sub.add_parser("evaluate", help="rank all items for held-out targets")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", required=True)
    ev.add_argument("--out", help="report directory (default: next to the checkpoint)")
    ev.add_argument("--view", choices=("validation", "test"), default="test")
    ev.add_argument("--corrupt", nargs=2, metavar=("MODE", "RATIO"))
    ev.add_argument("--corrupt-seed", type=int, default=0)
    ev.add_argument("--groups", action="store_true", help="also write subgroup CSV tables")
    ev.add_argument("--exclude-seen", action="store_true")

    an = sub.add_parser("analyze", help="posterior diagnostics or lambda sweep")
    an.add_argument("--checkpoint", required=True)
    an.add_argument("--split", required=True)
    an.add_argument("--what", choices=("diagnostics", "lambda-sweep"), required=True)
    an.add_argument("--lambdas", default="0,0.1", help="comma-separated weights for lambda-sweep")
    an.add_argument("--out", help="output directory (default: next to the checkpoint)")
    an.add_argument("--view", choices=("validation", "test"), default="test")
    return p


def parse_overrides(tokens: list[str]) -> list[str]:
    """``--a.b v``, ``--a.b=v`` and bare ``--flag`` (meaning true) to ``k=v``."""
    out, i = [], 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            out.append(key)
            i += 1
        elif i + 1 < len(tokens) and not tokens[i + 1].startswith("--"):
            out.append(f"{key}={tokens[i + 1]}")
            i += 2
        else:
            out.append(f"{key}=true")
            i += 1
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _snapshot(out: Path, doc: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "effective_config.json", doc)


def cmd_prepare(args) -> int:
    inter = load_interactions(args.input)
    seqs, vocab = filter_and_index(inter, min_count=args.min_count)
    split = leave_one_out_split(seqs, n_items=vocab.n_items)
    out = Path(args.out)
    save_split(split, out, vocab, extra={"min_count": args.min_count, "max_len": args.max_len})
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    schemas.validate(manifest, schemas.SPLIT_MANIFEST_SCHEMA)
    _snapshot(out, {"command": "prepare", "input": str(args.input), "min_count": args.min_count, "max_len": args.max_len})
    s = split.stats()
    print(
        f"prepared {out}: users={s['n_users']} items={s['n_items']} "
        f"interactions={s['n_interactions']} avg_len={s['avg_seq_len']:.2f}"
    )
    return EXIT_OK


def cmd_train(args, extra: list[str]) -> int:
    from contrastvae.engine import train

    overrides = parse_overrides(extra)
    cfg = RunConfig.load(args.config, overrides)
    if args.split:
        cfg.split = args.split
    if args.out:
        cfg.out = args.out
    if not cfg.split:
        raise ConfigError("no split given (--split or config 'split')")
    split = load_split(cfg.split)
    cfg.model.n_items = split.n_items
    out = Path(cfg.out)
    _snapshot(out, cfg.to_dict())
    try:
        result = train(split, cfg.model, cfg.train, out_dir=out, resume_from=args.resume)
    except NumericError as exc:
        print(f"training halted: {exc}; last good checkpoint kept in {out}", file=sys.stderr)
        return EXIT_NUMERIC
    st = result.state
    rep = evaluate(result.model, split, "validation", batch_size=cfg.train.eval_batch_size)
    print(
        f"trained {st.epoch} epochs (best epoch {st.best_epoch}{', early stop' if st.stopped_early else ''}); "
        f"{rep.summary()}; checkpoint {out / 'best.ckpt'}"
    )
    return EXIT_OK


def _open_model(args):
    if not Path(args.checkpoint).is_file():
        raise CheckpointError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    split = load_split(args.split)
    if ckpt.model_config.n_items != split.n_items:
        raise CheckpointError(f"checkpoint has {ckpt.model_config.n_items} items, split has {split.n_items}")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    return ckpt, model_from_checkpoint(ckpt), split, out


def cmd_evaluate(args) -> int:
    ckpt, model, split, out = _open_model(args)
    corrupt = None
    if args.corrupt:
        mode, ratio = args.corrupt[0], float(args.corrupt[1])
        if mode not in ("delete", "replace") or not 0.0 <= ratio <= 1.0:
            raise ConfigError("--corrupt takes MODE in {delete, replace} and RATIO in [0, 1]")
        corrupt = (mode, ratio)
    rep = evaluate(model, split, args.view, exclude_seen=args.exclude_seen, corrupt=corrupt, corrupt_seed=args.corrupt_seed)
    doc = rep.to_dict()
    schemas.validate(doc, schemas.REPORT_SCHEMA)
    _snapshot(out, {**{k: v for k, v in vars(args).items() if k != "func"}, "model": dataclasses.asdict(ckpt.model_config)})
    (out / "report.json").write_text(rep.to_json(), encoding="utf-8")
    if args.groups:
        for which in ("frequency", "length"):
            text = rep.groups_csv(which)
            schemas.check_csv(text, "groups")
            (out / f"groups_{which}.csv").write_text(text, encoding="utf-8")
    print(rep.summary())
    return EXIT_OK


def cmd_analyze(args) -> int:
    ckpt, model, split, out = _open_model(args)
    _snapshot(out, {**{k: v for k, v in vars(args).items() if k != "func"}, "model": dataclasses.asdict(ckpt.model_config)})
    if args.what == "diagnostics":
        rep = evaluate(model, split, args.view)
        text = rep.diagnostics_csv()
        name = "diagnostics.csv"
        kind = "diagnostics"
    else:
        try:
            lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--lambdas must be comma-separated numbers, got {args.lambdas!r}") from None
        if not lambdas or min(lambdas) < 0:
            raise ConfigError("--lambdas needs at least one value, all >= 0")
        if ckpt.train_config is None:
            raise CheckpointError("checkpoint carries no training config to retrain with")
        rows = lambda_sweep(split, ckpt.model_config, ckpt.train_config, lambdas)
        text = "lambda,recall@40\n" + "".join(f"{r['lambda']!r},{r['recall@40']!r}\n" for r in rows)
        name = "lambda_sweep.csv"
        kind = "lambda_sweep"
    schemas.check_csv(text, kind)
    (out / name).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _limit_threads():
    n = os.environ.get("CONTRASTVAE_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra and args.command != "train":
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
    except _UsageExit as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        if args.command == "prepare":
            return cmd_prepare(args)
        if args.command == "train":
            return cmd_train(args, extra)
        if args.command == "evaluate":
            return cmd_evaluate(args)
        return cmd_analyze(args)
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigError, CheckpointError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
