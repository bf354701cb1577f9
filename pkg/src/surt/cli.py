"""Command-line workflow: simulate -> train -> decode -> score, plus
gradient checking, mask benchmarking, and the decode-width latency sweep.

Every subcommand takes its randomness from --seed (or the SURT_SEED
environment variable) and writes only under its --out path. Exit codes:
0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import dualpath, losses, model, numcore, scoring, simulator, trainer, transducer
from . import autograd as ag
from .errors import SurtError

DEV_BEAM = 4
TEST_BEAM = 8
DEFAULT_DECODE_WIDTH = 35


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("SURT_SEED", "0"))


def _corpus_for(args, tier: str) -> simulator.ToyCorpus:
    fpt = args.frames_per_token or (20 if tier.startswith("delay") else 5)
    cfg = simulator.ToyCorpusConfig(
        vocab=args.vocab,
        feat_dim=args.feat_dim,
        frames_per_token=fpt,
        n_speakers=args.speakers,
        noise=args.noise,
    )
    return simulator.ToyCorpus.build(cfg, seed=_seed(args))


def cmd_simulate(args) -> int:
    seed = _seed(args)
    rng = np.random.default_rng(seed + 1)
    if args.tier == "delay":
        if args.delay is None:
            raise SurtError("--delay is required with --tier delay")
        corpus = _corpus_for(args, f"delay{args.delay:g}")
        tokens = tuple(args.tokens) if args.tokens else (11, 13)
        sessions = simulator.make_delay_dataset(
            corpus, args.delay, args.sessions, rng, token_range=tokens
        )
    else:
        corpus = _corpus_for(args, args.tier)
        tokens = tuple(args.tokens) if args.tokens else (3, 8)
        sessions = simulator.make_tier_dataset(
            simulator.TIERS[args.tier],
            corpus,
            args.sessions,
            rng,
            target_overlap=args.overlap,
            token_range=tokens,
        )
    manifest = simulator.save_sessions(sessions, args.out)
    print(f"wrote {len(sessions)} sessions to {manifest}")
    return 0


def _load_train_config(args) -> trainer.TrainConfig:
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    mcfg = model.ModelConfig.from_dict(raw.get("model", {}))
    sched = numcore.ScheduleConfig(**raw.get("schedule", {}))
    cur = trainer.CurriculumConfig(**raw.get("curriculum", {}))
    cwr = dualpath.CwrConfig(**raw["cwr"]) if raw.get("cwr") else None
    cfg = trainer.TrainConfig(model=mcfg, schedule=sched, curriculum=cur, cwr=cwr,
                              loss=raw.get("loss", "heat"))
    if args.loss:
        cfg.loss = args.loss
    if args.steps:
        cfg.curriculum.total_steps = args.steps
        cfg.schedule = numcore.ScheduleConfig(
            warmup_steps=min(cfg.schedule.warmup_steps, max(1, args.steps // 10)),
            peak_lr=cfg.schedule.peak_lr,
            total_steps=args.steps,
        )
    if args.single_turn_steps is not None:
        cfg.curriculum.single_turn_steps = args.single_turn_steps
    if args.seed is not None:
        cfg.curriculum.seed = args.seed
    return cfg


def cmd_train(args) -> int:
    cfg = _load_train_config(args)
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    data_cfg = raw.get("data", {})

    if args.delay is not None:
        corpus = _corpus_for(args, f"delay{args.delay:g}")
        rng = np.random.default_rng(_seed(args) + 1)
        pool = simulator.make_delay_dataset(corpus, args.delay, args.sessions, rng)
        dev = simulator.make_delay_dataset(
            corpus, args.delay, args.dev_sessions, rng, id_prefix="dev"
        )
        data = {trainer.SINGLE_TURN: pool, trainer.MULTI_TURN: pool}
    else:
        data = {}
        if data_cfg.get("single_turn"):
            data[trainer.SINGLE_TURN] = simulator.load_sessions(data_cfg["single_turn"])
        if data_cfg.get("multi_turn"):
            data[trainer.MULTI_TURN] = simulator.load_sessions(data_cfg["multi_turn"])
        if not data:
            raise SurtError("no training data: pass --delay or a config with data paths")
        if trainer.SINGLE_TURN not in data:
            data[trainer.SINGLE_TURN] = data[trainer.MULTI_TURN]
        if trainer.MULTI_TURN not in data:
            data[trainer.MULTI_TURN] = data[trainer.SINGLE_TURN]
        dev = simulator.load_sessions(data_cfg["dev"]) if data_cfg.get("dev") else None

    result = trainer.run_training(cfg, data, dev=dev, out_dir=args.out, verbose=args.verbose)
    final = result.metrics[-1].loss if result.metrics else float("nan")
    print(f"trained {cfg.curriculum.total_steps} steps, final loss {final:.4f}, "
          f"checkpoints in {args.out}")
    return 0


def cmd_decode(args) -> int:
    store, config, _step = numcore.load_checkpoint(args.ckpt)
    mcfg = model.ModelConfig.from_dict(config)
    sessions = simulator.load_sessions(args.manifest)
    beam = args.beam if args.beam is not None else (TEST_BEAM if args.split == "test" else DEV_BEAM)
    width = args.chunk_width or DEFAULT_DECODE_WIDTH
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for session in sessions:
            h1, h2 = model.decode_channels(store, mcfg, session.features, width, beam=beam)
            rec = {"id": session.session_id, "channels": [list(h1.tokens), list(h2.tokens)]}
            fh.write(json.dumps(rec) + "\n")
    print(f"decoded {len(sessions)} sessions (beam {beam}, width {width}) to {out}")
    return 0


def cmd_score(args) -> int:
    sessions = {s.session_id: s for s in simulator.load_sessions(args.manifest)}
    by_tier: dict[str, dict] = {}
    skipped = 0
    with open(args.hyps) as fh:
        for line in fh:
            rec = json.loads(line)
            session = sessions[rec["id"]]
            if session.n_utterances > scoring.ASSIGNMENT_CAP:
                skipped += 1
                print(f"warning: skipping {session.session_id} "
                      f"({session.n_utterances} utterances)", file=sys.stderr)
                continue
            report = scoring.score_session(session, rec["channels"])
            breakdown = scoring.classify_errors(report, session)
            agg = by_tier.setdefault(session.tier, {"n": 0, "err": 0, "ref": 0, "leak": 0, "omit": 0})
            agg["n"] += 1
            agg["err"] += report.substitutions + report.insertions + report.deletions
            agg["ref"] += report.ref_word_count
            agg["leak"] += breakdown.leakage_insertions
            agg["omit"] += breakdown.omitted_utterances
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tier", "sessions", "wer", "leakage_insertions", "omitted_utterances"])
        for tier in sorted(by_tier):
            a = by_tier[tier]
            wer = a["err"] / a["ref"] if a["ref"] else 0.0
            writer.writerow([tier, a["n"], f"{wer:.6f}", a["leak"], a["omit"]])
    print(f"scored {sum(a['n'] for a in by_tier.values())} sessions "
          f"({skipped} skipped) to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = _seed(args)
    rng = np.random.default_rng(seed)
    ok = True
    if args.which in ("lattice", "all"):
        worst = 0.0
        for _ in range(args.instances):
            T, U, V = int(rng.integers(1, 6)), int(rng.integers(0, 5)), int(rng.integers(2, 5))
            labels = rng.integers(1, V + 1, size=U).tolist()
            store = numcore.ParamStore(np.float64)
            store.add("logits", rng.normal(size=(T, U + 1, V + 1)))
            report = numcore.grad_check(
                lambda leaves: transducer.rnnt_loss_node(leaves["logits"], labels), store
            )
            worst = max(worst, report.max_rel_err)
            ok &= report.passed
        print(f"lattice gradients: max rel err {worst:.2e} "
              f"over {args.instances} instances [{'ok' if ok else 'FAIL'}]")
    if args.which in ("pipeline", "all"):
        worst = 0.0
        pipe_ok = True
        for i in range(args.instances):
            enc = "dp-lstm" if i % 2 == 0 else "dp-transformer"
            report = _pipeline_grad_check(seed + i, enc)
            worst = max(worst, report.max_rel_err)
            pipe_ok &= report.passed
        ok &= pipe_ok
        print(f"pipeline gradients: max rel err {worst:.2e} "
              f"over {args.instances} instances [{'ok' if pipe_ok else 'FAIL'}]")
    return 0 if ok else 1


def _pipeline_grad_check(seed: int, encoder: str, max_coords: int = 60) -> numcore.GradCheckReport:
    rng = np.random.default_rng(seed)
    cfg = model.ModelConfig(encoder=encoder, feat_dim=3, model_dim=4, enc_layers=1,
                            enc_hidden=4, heads=2, ffn_dim=6, pred_embed=3, pred_hidden=4,
                            joint_dim=5, vocab=3, chunk_width=3)
    store = model.init_params(cfg, rng, dtype=np.float64)
    T = int(rng.integers(6, 10))
    x = rng.normal(size=(T, cfg.feat_dim))
    y1 = rng.integers(1, cfg.vocab + 1, size=int(rng.integers(1, 4))).tolist()
    y2 = rng.integers(1, cfg.vocab + 1, size=int(rng.integers(1, 4))).tolist()

    def loss_fn(leaves):
        um = model.unmix(leaves, cfg, ag.leaf(x))
        e1 = model.encode(leaves, cfg, um.ch1, cfg.chunk_width)
        e2 = model.encode(leaves, cfg, um.ch2, cfg.chunk_width)
        return losses.heat_loss(
            lambda y, e: model.channel_loss_node(leaves, cfg, e, y), e1, e2, y1, y2
        )

    return numcore.grad_check(loss_fn, store, h=1e-3, order=4, max_coords=max_coords,
                              rng=np.random.default_rng(seed))


def cmd_mask_bench(args) -> int:
    lengths = [int(v) for v in args.lengths.split(",")]
    patterns = args.patterns.split(",")
    rows = []
    for length in lengths:
        width = args.width or math.isqrt(length - 1) + 1
        for pattern in patterns:
            rows.append(dualpath.bench_pattern(pattern, length, width,
                                               streaming=args.streaming))
    writer = csv.writer(open(args.out, "w", newline="") if args.out else sys.stdout)
    writer.writerow(["pattern", "l", "W", "nonzeros", "build_micros", "reach2"])
    for r in rows:
        writer.writerow([r["pattern"], r["l"], r["W"], r["nonzeros"],
                         f"{r['build_micros']:.1f}", int(r["reach2"])])
    return 0


def cmd_latency_sweep(args) -> int:
    store, config, _ = numcore.load_checkpoint(args.ckpt)
    mcfg = model.ModelConfig.from_dict(config)
    sessions = simulator.load_sessions(args.manifest)
    widths = [int(w) for w in args.widths.split(",")]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chunk_width", "latency_ms", "wer"])
        for width in widths:
            report = trainer.evaluate(store, mcfg, sessions, beam=args.beam,
                                      decode_w=width, threads=args.threads)
            writer.writerow([width, report.latency_ms, f"{report.overall_wer:.6f}"])
    print(f"swept widths {widths} to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="RNG seed (default: $SURT_SEED or 0)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads; 1 guarantees bitwise determinism")

    p = sub.add_parser("simulate", help="generate a synthetic session manifest")
    common(p)
    p.add_argument("--tier", choices=["t1", "t2", "t3", "delay"], required=True)
    p.add_argument("--sessions", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--overlap", type=float, default=None,
                   help="fixed overlap target (default: uniform in [0, 0.4])")
    p.add_argument("--delay", type=float, default=None,
                   help="start-to-start delay in seconds (tier=delay)")
    p.add_argument("--tokens", type=int, nargs=2, default=None, metavar=("LO", "HI"))
    p.add_argument("--vocab", type=int, default=6)
    p.add_argument("--feat-dim", type=int, default=8)
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--frames-per-token", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", required=True)
    p.add_argument("--loss", choices=["heat", "pit"], default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--single-turn-steps", type=int, default=None)
    p.add_argument("--delay", type=float, default=None,
                   help="train on synthesized fixed-delay two-utterance mixtures")
    p.add_argument("--sessions", type=int, default=64)
    p.add_argument("--dev-sessions", type=int, default=16)
    p.add_argument("--vocab", type=int, default=6)
    p.add_argument("--feat-dim", type=int, default=8)
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--frames-per-token", type=int, default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode a manifest with a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int, default=None,
                   help=f"beam width (default: {DEV_BEAM} dev / {TEST_BEAM} test)")
    p.add_argument("--split", choices=["dev", "test"], default="dev")
    p.add_argument("--chunk-width", type=int, default=None)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="score decode output against a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--hyps", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(p)
    p.add_argument("--which", choices=["lattice", "pipeline", "all"], default="all")
    p.add_argument("--instances", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("mask-bench", help="attention-pattern size benchmark")
    common(p)
    p.add_argument("--lengths", default="64,256,1024")
    p.add_argument("--patterns", default="dualpath,strided,block,axial")
    p.add_argument("--width", type=int, default=None, help="default: ceil(sqrt(l))")
    p.add_argument("--streaming", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_mask_bench)

    p = sub.add_parser("latency-sweep", help="WER versus decode chunk width")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--widths", default="15,25,35,45")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_latency_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SurtError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
