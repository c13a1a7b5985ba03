"""Command-line entry point: ``ssrmt {gen-data,init-policy,train,eval,judge,report}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import protocol
from .config import load_run_config, make_backend, make_judge_backend, make_scorer
from .errors import BackendError, ConfigError, InvalidInput, ScorerUnavailable, SSRError
from .evalharness import EvalReport, evaluate, format_report, select_best_checkpoint, write_report
from .plotting import plot_evals, plot_training, read_metrics
from .policy import HttpChatBackend, ToyBackend, ToyInit, generate, init_params
from .task import gen_corpus, read_cipher, read_jsonl, write_cipher, write_jsonl
from .trainer import METRIC_FIELDS, TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("ssrmt")


def cmd_gen_data(args) -> int:
    cipher, corpus = gen_corpus(args.seed, args.vocab, args.pairs, args.len_min, args.len_max, args.test_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "train.jsonl", corpus.train)
    write_jsonl(out / "test.jsonl", corpus.test)
    write_cipher(out / "cipher.json", cipher)
    print(f"wrote {len(corpus.monolingual)} prompts ({len(corpus.train)} train, {len(corpus.test)} test) to {out}")
    return 0


def cmd_init_policy(args) -> int:
    cipher = read_cipher(args.cipher)
    init = ToyInit(prior_strength=args.prior_strength, init_noise=args.init_noise, format_prob=args.format_prob,
                   quote_prob=args.quote_prob, copy_prob=args.copy_prob, seed=args.seed)
    params = init_params(cipher, init)
    path = save_checkpoint(args.out, params, 0, TrainConfig(), [], extra={"toy_init": init.__dict__})
    print(f"wrote untrained policy to {path}")
    return 0


def cmd_train(args) -> int:
    overrides = {"out": args.out, "reward_mode": args.reward_mode, "seed": args.seed, "epochs": args.epochs,
                 "learning_rate": args.learning_rate, "backend": args.backend}
    cfg = load_run_config(args.config, overrides)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    cipher_path = cfg.path("cipher")
    cipher = read_cipher(cipher_path) if cipher_path is not None and cipher_path.exists() else None
    train_prompts = read_jsonl(cfg.path("train"))
    test_path = cfg.path("test")
    test_prompts = read_jsonl(test_path) if test_path is not None and test_path.exists() else None

    backend = make_backend(cfg, cipher)
    scorer = make_scorer(cfg, cipher)
    judge = make_judge_backend(cfg, backend)

    effective = {**cfg.to_json(), "config_hash": cfg.config_hash()}
    (out / "config.json").write_text(json.dumps(effective, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    result = train(backend, train_prompts, cfg.train, out_dir=out, scorer=scorer, judge_backend=judge,
                   test_prompts=test_prompts, cipher=cipher, resume_from=args.resume, max_steps=args.max_steps)
    if result.evals:
        (out / "evals.json").write_text(
            json.dumps({str(k): v.to_json() for k, v in sorted(result.evals.items())}, indent=2, sort_keys=True)
            + "\n", encoding="utf-8")
    print(f"finished at step {result.final_step}; {len(result.checkpoints)} checkpoint(s) in {out / 'checkpoints'}")
    if result.best_step is not None:
        best = result.evals[result.best_step]
        print(f"best checkpoint: step {result.best_step} (aggregated {best.aggregated:.4f}) "
              f"{out / 'checkpoints' / f'step_{result.best_step:06d}.npz'}")
    return 0


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise InvalidInput(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    prompts = read_jsonl(args.testset)
    cipher_path = Path(args.cipher) if args.cipher else Path(args.testset).with_name("cipher.json")
    cipher = read_cipher(cipher_path) if cipher_path.exists() else None
    report = evaluate(ToyBackend(ckpt.params, trainable=False), prompts, cipher, 0.0, args.max_tokens)
    print(format_report(report))
    if args.json:
        write_report(args.json, report)
    return 0


def _judge_backend(args):
    if args.url:
        return HttpChatBackend(args.url, model=args.model, retries=args.retries)
    if not args.checkpoint:
        raise InvalidInput("judge needs --checkpoint (toy) or --url (http backend)")
    return ToyBackend(load_checkpoint(args.checkpoint).params, trainable=False)


def cmd_judge(args) -> int:
    backend = _judge_backend(args)
    prompt = protocol.render_judge_prompt(args.src_lang, args.tgt_lang, args.src, args.mt, args.ref)
    if args.verbose:
        print(prompt, file=sys.stderr)
        print("-" * 40, file=sys.stderr)
    reply = generate(backend, prompt, 0.0, args.max_tokens, seed=0)
    judgment = protocol.parse_score(reply.text)
    print(json.dumps({"score": judgment.score, "parse_ok": judgment.parse_ok, "raw_text": judgment.raw_text,
                      "with_reference": args.ref is not None}, ensure_ascii=False))
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    metrics_path = run / "metrics.csv"
    if not metrics_path.exists():
        raise InvalidInput(f"no metrics.csv in {run}")
    rows = read_metrics(metrics_path)
    evals = {}
    if (run / "evals.json").exists():
        evals = {int(k): EvalReport.from_json(v)
                 for k, v in json.loads((run / "evals.json").read_text(encoding="utf-8")).items()}
    fig_dir = Path(args.figures) if args.figures else run / "figures"
    written = plot_training(rows, fig_dir) + plot_evals(evals, fig_dir)

    w = csv.writer(sys.stdout, delimiter=args.delimiter, lineterminator="\n")
    w.writerow(list(METRIC_FIELDS) + ["eval_aggregated", "eval_raw", "eval_stripped"])
    for r in rows:
        e = evals.get(r["step"])
        extra = [f"{e.aggregated:.6f}", f"{e.raw_score:.6f}", f"{e.stripped_score:.6f}"] if e else ["", "", ""]
        w.writerow([r["step"]] + [f"{r[k]:.6f}" for k in METRIC_FIELDS[1:]] + extra)
    if evals:
        print(f"# best checkpoint: step {select_best_checkpoint(evals)}", file=sys.stderr)
    for p in written:
        print(f"# figure: {p}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssrmt", description=__doc__)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the cipher corpus")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--vocab", type=int, default=20)
    p.add_argument("--pairs", type=int, default=500)
    p.add_argument("--len-min", type=int, default=5)
    p.add_argument("--len-max", type=int, default=12)
    p.add_argument("--test-fraction", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("init-policy", help="write an untrained toy policy checkpoint")
    p.add_argument("--cipher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prior-strength", type=float, default=ToyInit.prior_strength)
    p.add_argument("--init-noise", type=float, default=ToyInit.init_noise)
    p.add_argument("--format-prob", type=float, default=ToyInit.format_prob)
    p.add_argument("--quote-prob", type=float, default=ToyInit.quote_prob)
    p.add_argument("--copy-prob", type=float, default=ToyInit.copy_prob)
    p.set_defaults(func=cmd_init_policy)

    p = sub.add_parser("train", help="run self-rewarding GRPO (or annotate-only over http)")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--reward-mode", choices=("ssr", "ssr_x", "external_only", "llm_judge_external"))
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--backend", choices=("toy", "http"))
    p.add_argument("--max-steps", type=int, help="stop early (a checkpoint is written)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a toy checkpoint on a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--testset", required=True)
    p.add_argument("--cipher")
    p.add_argument("--json", help="also write the report as JSON")
    p.add_argument("--max-tokens", type=int, default=64)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("judge", help="score one translation with the judge prompt")
    p.add_argument("--src", required=True)
    p.add_argument("--mt", required=True)
    p.add_argument("--src-lang", required=True)
    p.add_argument("--tgt-lang", required=True)
    p.add_argument("--ref")
    p.add_argument("--checkpoint")
    p.add_argument("--url")
    p.add_argument("--model", default="default")
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--max-tokens", type=int, default=1024)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("report", help="render figures and a delimited summary for a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--figures", help="figure directory (default RUN/figures)")
    p.add_argument("--delimiter", default=",")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidInput, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (BackendError, ScorerUnavailable, SSRError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
