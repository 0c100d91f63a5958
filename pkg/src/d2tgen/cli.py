"""Command line entry point: ``d2tgen {train,generate,evaluate,assignments}``.

Exit codes: 0 success, 1 runtime error, 2 configuration or usage error.
Set ``D2TGEN_LOG_LEVEL`` (e.g. ``INFO``) for progress logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .decoding import beam_search, nbest_records, output_words
from .errors import ConfigError, D2TError
from .metrics import evaluate
from .mr_data import Vocabulary, load_dataset, parse_mr, tokenize, training_pairs
from .seq2seq import Seq2Seq, init_params
from .training import assignment_purity, member_perplexities, read_assignment_log, smcl_assign
from .training import train as run_training

log = logging.getLogger("d2tgen")


def _load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.override(seed=args.seed, precision=args.precision, threads=args.threads)


def cmd_train(args):
    cfg = _load_config(args).override(
        train_path=args.train, valid_path=args.valid, out_dir=args.out, epochs=args.epochs
    )
    cfg.validate(need_train=True)
    train_ex = load_dataset(cfg.train_path, strict=cfg.strict_schema)
    valid_ex = load_dataset(cfg.valid_path, strict=cfg.strict_schema) if cfg.valid_path else None
    _, report = run_training(cfg, train_ex, valid_ex, cfg.out_dir)
    print(json.dumps({"out_dir": cfg.out_dir, "epochs": len(report["epochs"]),
                      "selected_member": report.get("selected_member")}))
    return 0


def _latest_checkpoints(run_dir, epoch=None):
    run_dir = Path(run_dir)
    found = {}
    for path in run_dir.glob("member*-epoch*.json"):
        member, ep = path.stem[len("member"):].split("-epoch")
        found.setdefault(int(ep), {})[int(member)] = path
    if not found:
        raise ConfigError(f"no checkpoints in {run_dir}")
    ep = max(found) if epoch is None else epoch
    if ep not in found:
        raise ConfigError(f"no checkpoints for epoch {ep} in {run_dir}")
    return [found[ep][k] for k in sorted(found[ep])]


def _load_members(cfg, vocab, checkpoints):
    members = []
    for path in checkpoints:
        params = init_params(cfg.model, len(vocab), np.random.default_rng(0))
        params.load(path)
        members.append(Seq2Seq(cfg.model, params, len(vocab)))
    return members


def cmd_generate(args):
    if args.run:
        run_dir = Path(args.run)
        checkpoints = args.checkpoint or _latest_checkpoints(run_dir, args.epoch)
        args.config = args.config or str(run_dir / "config.json")
    elif args.checkpoint:
        checkpoints = args.checkpoint
        run_dir = Path(checkpoints[0]).parent
    else:
        raise ConfigError("give --run or at least one --checkpoint")
    cfg = _load_config(args)
    cfg = cfg.override(**{
        "decode.alpha": args.alpha, "decode.beta": args.beta, "decode.beam_size": args.beam_size,
        "decode.max_len": args.max_len,
        "decode.block_repeat_beginnings": True if args.block_repeats else None,
    })
    vocab_path = Path(args.vocab) if args.vocab else run_dir / "vocab.json"
    if not vocab_path.is_file():
        raise ConfigError(f"vocabulary not found: {vocab_path}")
    input_path = Path(args.input)
    if not input_path.is_file():
        raise ConfigError(f"input file not found: {input_path}")
    with ad.precision(cfg.precision):
        vocab = Vocabulary.load(vocab_path)
        members = _load_members(cfg, vocab, checkpoints)
        if args.member is not None:
            if not 0 <= args.member < len(members):
                raise ConfigError(f"--member {args.member} out of range for {len(members)} members")
            chosen = args.member
        elif args.valid:
            valid = training_pairs(load_dataset(args.valid, strict=cfg.strict_schema))
            ppl = member_perplexities(members, valid, vocab)
            chosen = smcl_assign(ppl)[0]
            log.info("validation perplexities %s -> member %d", ppl, chosen)
        else:
            chosen = 0
        model = members[chosen]
        lines = [ln.strip() for ln in input_path.read_text(encoding="utf-8").splitlines()]
        mrs = [parse_mr(ln, strict=cfg.strict_schema) for ln in lines if ln]

        def run(mr):
            return beam_search(model, mr, vocab, cfg.decode)

        if cfg.threads > 1 and len(mrs) > 1:
            with ThreadPoolExecutor(cfg.threads) as pool:
                results = list(pool.map(run, mrs))
        else:
            results = [run(mr) for mr in mrs]
    text = "".join(" ".join(output_words(r.best)) + "\n" for r in results)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.nbest:
        with open(args.nbest, "w", encoding="utf-8") as fh:
            for mr, r in zip(mrs, results):
                for rec in nbest_records(mr, r):
                    fh.write(json.dumps(rec) + "\n")
    return 0


def cmd_evaluate(args):
    for path in (args.generated, args.dataset):
        if not Path(path).is_file():
            raise ConfigError(f"file not found: {path}")
    examples = load_dataset(args.dataset, strict=args.strict)
    lines = Path(args.generated).read_text(encoding="utf-8").splitlines()
    outputs = [tokenize(ln) for ln in lines]
    report = evaluate(examples, outputs)
    sys.stdout.write(report.to_table())
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    else:
        sys.stdout.write(report.to_json() + "\n")
    return 0


def cmd_assignments(args):
    if not Path(args.log).is_file():
        raise FileNotFoundError(f"assignment log not found: {args.log}")
    records = read_assignment_log(args.log)
    epoch = args.epoch if args.epoch is not None else max((r[1] for r in records), default=None)
    latest = {}
    for ex_id, ep, members in records:
        if ep == epoch and members:
            latest[ex_id] = members[0]
    counts = {}
    for m in latest.values():
        counts[m] = counts.get(m, 0) + 1
    total = sum(counts.values())
    summary = {"epoch": epoch, "examples": total,
               "counts": {str(k): counts[k] for k in sorted(counts)}}
    print(f"epoch {epoch}: {total} examples")
    for k in sorted(counts):
        print(f"member {k}: {counts[k]} ({100.0 * counts[k] / total:.1f}%)")
    if args.labels:
        labels = [ln.strip() for ln in Path(args.labels).read_text().splitlines() if ln.strip()]
        ids = sorted(latest)
        purity = assignment_purity([latest[i] for i in ids], [labels[i] for i in ids])
        summary["purity"] = purity
        print(f"purity: {purity:.3f}")
    if args.json:
        Path(args.json).write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--precision", type=int, choices=(32, 64))

    parser = argparse.ArgumentParser(prog="d2tgen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train an ensemble")
    p.add_argument("--train", help="training csv (overrides config)")
    p.add_argument("--valid", help="validation csv (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="decode MRs with a trained member")
    p.add_argument("--run", help="training output directory")
    p.add_argument("--checkpoint", action="append", help="member checkpoint (repeat, in order)")
    p.add_argument("--epoch", type=int, help="checkpoint epoch within --run (default: last)")
    p.add_argument("--vocab")
    p.add_argument("--input", required=True, help="one MR per line")
    p.add_argument("--output", help="text output (default: stdout)")
    p.add_argument("--nbest", help="n-best JSON lines output")
    p.add_argument("--valid", help="validation csv for picking the member by perplexity")
    p.add_argument("--member", type=int, help="force this ensemble member")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--beam-size", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--block-repeats", action="store_true",
                   help="prune beams that open two sentences with the same bigram")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generated text against a dataset")
    p.add_argument("--generated", required=True, help="one output per grouped MR")
    p.add_argument("--dataset", required=True, help="mr,ref csv")
    p.add_argument("--json", help="write the JSON report here instead of stdout")
    p.add_argument("--strict", action="store_true", help="enforce the attribute schema")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("assignments", help="summarise an ensemble assignment log")
    p.add_argument("--log", required=True)
    p.add_argument("--labels", help="one label per line, indexed by example id")
    p.add_argument("--epoch", type=int, help="epoch to summarise (default: last)")
    p.add_argument("--json")
    p.set_defaults(func=cmd_assignments)
    return parser


def main(argv=None):
    level = os.environ.get("D2TGEN_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"d2tgen: configuration error: {exc}", file=sys.stderr)
        return 2
    except (D2TError, OSError, ValueError) as exc:
        print(f"d2tgen: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
