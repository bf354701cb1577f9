"""Training loop with curriculum staging, width randomization, and evaluation.

One step: sample a batch from the stage the curriculum dictates, draw a
chunk width if randomization is on, run unmix -> encode -> joint -> lattice
loss per channel, backprop, clip to the configured norm, and take an AdamW
step on the warmup/decay schedule. Per-step logs carry the batch loss and a
loss-based output-assignment accuracy (identity cheaper than swap); decoded
held-out accuracy and WER come from the periodic evaluation pass.
"""

from __future__ import annotations

import csv
import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import losses, model, numcore, scoring, transducer
from .dualpath import CwrConfig, sample_chunk_width
from .errors import NonFiniteLoss
from .model import ModelConfig
from .numcore import ParamStore, ScheduleConfig
from .simulator import Session

SINGLE_TURN = "single-turn"
MULTI_TURN = "multi-turn"
FRAME_MS = 10


@dataclass
class CurriculumConfig:
    single_turn_steps: int = 200
    total_steps: int = 2000
    batch_size: int = 4
    eval_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.single_turn_steps <= self.total_steps):
            raise ValueError("need 0 <= single_turn_steps <= total_steps")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")


def curriculum_schedule(step: int, cfg: CurriculumConfig) -> str:
    """Stage for a step: single-turn first, then the multi-turn pool (which
    may itself still contain single-turn sessions)."""
    return SINGLE_TURN if step < cfg.single_turn_steps else MULTI_TURN


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    cwr: CwrConfig | None = None
    loss: str = "heat"  # heat | pit
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.loss not in ("heat", "pit"):
            raise ValueError("loss must be 'heat' or 'pit'")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d


@dataclass
class MetricsRow:
    step: int
    loss: float
    assign_acc: float
    lr: float
    chunk_width: int


@dataclass
class EvalPoint:
    step: int
    wer: float
    assign_acc: float


@dataclass
class TrainResult:
    store: ParamStore
    metrics: list[MetricsRow]
    dev_history: list[EvalPoint]
    best_step: int
    best_wer: float


def run_training(
    cfg: TrainConfig,
    data: dict[str, list[Session]],
    dev: list[Session] | None = None,
    out_dir: str | Path | None = None,
    verbose: bool = False,
) -> TrainResult:
    cur = cfg.curriculum
    needed = set()
    if cur.single_turn_steps > 0:
        needed.add(SINGLE_TURN)
    if cur.single_turn_steps < cur.total_steps:
        needed.add(MULTI_TURN)
    for tag in needed:
        if not data.get(tag):
            raise ValueError(f"curriculum needs a non-empty {tag!r} pool")

    rng = np.random.default_rng(cur.seed)
    store = model.init_params(cfg.model, rng)
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics: list[MetricsRow] = []
    dev_history: list[EvalPoint] = []
    best_wer = np.inf
    best_step = -1
    last_good = {k: v.copy() for k, v in store.params.items()}
    decode_w = cfg.cwr.decode_w if cfg.cwr else cfg.model.chunk_width

    for step in range(cur.total_steps):
        pool = data[curriculum_schedule(step, cur)]
        batch = [pool[int(i)] for i in rng.integers(0, len(pool), size=cur.batch_size)]
        width = (
            sample_chunk_width(cfg.cwr, rng)
            if cfg.cwr and cfg.model.encoder != "lstm"
            else cfg.model.chunk_width
        )
        def abort(reason):
            if out_dir is not None:
                aborted = ParamStore(store.dtype)
                for name, value in last_good.items():
                    aborted.add(name, value)
                numcore.save_checkpoint(aborted, out_dir / "ckpt-abort", cfg.model.to_dict(), step)
            raise NonFiniteLoss(f"{reason} at step {step}")

        leaves = store.leaves()
        sample_nodes = []
        correct = 0
        for session in batch:
            mcfg = cfg.model
            x = ag.leaf(np.asarray(session.features, dtype=np.float32))
            um = model.unmix(leaves, mcfg, x)
            e1, e2 = model.encode_channels(leaves, mcfg, um, width)
            if not (np.all(np.isfinite(e1.value)) and np.all(np.isfinite(e2.value))):
                abort("encoder output not finite")
            y1 = session.channel_tokens(0)
            y2 = session.channel_tokens(1)

            cache: dict = {}
            preds: dict = {}

            def pred_states(labels):
                key = tuple(labels)
                if key not in preds:
                    preds[key] = model.predict_states(leaves, mcfg, labels)
                return preds[key]

            def channel_loss(labels, enc):
                key = (id(enc), tuple(labels))
                if key not in cache:
                    cache[key] = model.channel_loss_node(
                        leaves, mcfg, enc, labels, pred=pred_states(labels)
                    )
                return cache[key]

            def channel_value(labels, enc):
                key = (id(enc), tuple(labels))
                if key in cache:
                    return float(cache[key].value)
                logits = model.joint_logits(leaves, mcfg, enc, labels, pred=pred_states(labels))
                return transducer.rnnt_loss_forward(logits.value, labels)

            if cfg.loss == "heat":
                node = losses.heat_loss(channel_loss, e1, e2, y1, y2)
            else:
                node, _perm = losses.pit_loss_2ch(channel_loss, e1, e2, y1, y2)
            c11 = channel_value(y1, e1)
            c22 = channel_value(y2, e2)
            c12 = channel_value(y1, e2)
            c21 = channel_value(y2, e1)
            correct += losses.assignment_correct_from_costs(c11, c22, c12, c21)
            sample_nodes.append(node)

        batch_node = ag.scale_shift(ag.add_n(sample_nodes), 1.0 / cur.batch_size, 0.0)
        loss_val = float(batch_node.value)
        if not np.isfinite(loss_val):
            abort(f"loss became {loss_val}")

        ag.backward(batch_node)
        store.zero_grads()
        store.accumulate_grads(leaves)
        numcore.clip_gradients(store, cfg.clip_norm)
        lr = numcore.lr_at_step(step, cfg.schedule)
        numcore.adamw_step(store, lr, cfg.betas, cfg.eps, cfg.weight_decay)
        last_good = {k: v.copy() for k, v in store.params.items()}
        metrics.append(MetricsRow(step, loss_val, correct / cur.batch_size, lr, width))

        if dev and (step + 1) % cur.eval_every == 0:
            point = _dev_eval(store, cfg.model, dev, step, decode_w)
            dev_history.append(point)
            if out_dir is not None:
                numcore.save_checkpoint(store, out_dir / "ckpt-last", cfg.model.to_dict(), step)
                if point.wer < best_wer:
                    numcore.save_checkpoint(store, out_dir / "ckpt-best", cfg.model.to_dict(), step)
            if point.wer < best_wer:
                best_wer = point.wer
                best_step = step
            if verbose:
                print(
                    f"step {step + 1}: loss {loss_val:.3f} dev_wer {point.wer:.3f} "
                    f"dev_assign {point.assign_acc:.2f}"
                )

    if out_dir is not None:
        numcore.save_checkpoint(store, out_dir / "ckpt-last", cfg.model.to_dict(), cur.total_steps)
        if not dev_history:
            numcore.save_checkpoint(store, out_dir / "ckpt-best", cfg.model.to_dict(), cur.total_steps)
        write_metrics(out_dir / "metrics.csv", metrics)
    return TrainResult(store, metrics, dev_history, best_step, float(best_wer))


def _dev_eval(store, mcfg, dev, step, decode_w) -> EvalPoint:
    total_err = 0
    total_ref = 0
    pairs = []
    for session in dev:
        h1, h2 = model.decode_channels(store, mcfg, session.features, decode_w)
        report = scoring.score_session(session, (list(h1.tokens), list(h2.tokens)))
        total_err += report.substitutions + report.insertions + report.deletions
        total_ref += report.ref_word_count
        pairs.append(
            (
                (list(h1.tokens), list(h2.tokens)),
                (session.channel_tokens(0), session.channel_tokens(1)),
            )
        )
    wer = total_err / total_ref if total_ref else 0.0
    return EvalPoint(step=step, wer=wer, assign_acc=losses.assignment_accuracy(pairs))


def write_metrics(path: str | Path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "assign_acc", "lr", "chunk_width"])
        for r in rows:
            writer.writerow([r.step, repr(r.loss), repr(r.assign_acc), repr(r.lr), r.chunk_width])


def steps_to_accuracy(metrics: list[MetricsRow], threshold: float = 0.9, window: int = 10) -> int | None:
    """First step whose trailing-window mean assignment accuracy clears the
    threshold; None when never reached. The window must be full, so the
    symmetric all-ties start (which counts as correct) cannot trigger it."""
    acc = [m.assign_acc for m in metrics]
    for i in range(window - 1, len(acc)):
        if sum(acc[i - window + 1:i + 1]) / window >= threshold:
            return metrics[i].step
    return None


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class TierScore:
    sessions: int
    wer: float
    assign_acc: float
    leakage_insertions: int
    omitted_utterances: int


@dataclass
class EvalReport:
    per_tier: dict[str, TierScore]
    latency_ms: int
    skipped: int

    @property
    def overall_wer(self) -> float:
        return float(np.mean([t.wer for t in self.per_tier.values()])) if self.per_tier else 0.0


def evaluate(
    store: ParamStore,
    mcfg: ModelConfig,
    sessions: list[Session],
    beam: int = 1,
    decode_w: int | None = None,
    threads: int = 1,
    cap: int = scoring.ASSIGNMENT_CAP,
) -> EvalReport:
    """Decode every session, score with best-assignment WER, aggregate per
    tier. Sessions with more utterances than the cap are skipped (the 2**N
    search would not finish) and counted."""
    decode_w = decode_w if decode_w is not None else mcfg.chunk_width
    work = [s for s in sessions if s.n_utterances <= cap]
    skipped = len(sessions) - len(work)

    def decode_one(session):
        h1, h2 = model.decode_channels(store, mcfg, session.features, decode_w, beam=beam)
        return session, (list(h1.tokens), list(h2.tokens))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            decoded = list(pool.map(decode_one, work))
    else:
        decoded = [decode_one(s) for s in work]

    by_tier: dict[str, dict] = {}
    for session, hyps in decoded:
        report = scoring.score_session(session, hyps, cap=cap)
        breakdown = scoring.classify_errors(report, session)
        agg = by_tier.setdefault(
            session.tier,
            {"err": 0, "ref": 0, "n": 0, "correct": 0, "leak": 0, "omit": 0},
        )
        agg["err"] += report.substitutions + report.insertions + report.deletions
        agg["ref"] += report.ref_word_count
        agg["n"] += 1
        agg["correct"] += losses.assignment_correct(
            hyps, (session.channel_tokens(0), session.channel_tokens(1))
        )
        agg["leak"] += breakdown.leakage_insertions
        agg["omit"] += breakdown.omitted_utterances

    per_tier = {
        tier: TierScore(
            sessions=a["n"],
            wer=a["err"] / a["ref"] if a["ref"] else 0.0,
            assign_acc=a["correct"] / a["n"] if a["n"] else 0.0,
            leakage_insertions=a["leak"],
            omitted_utterances=a["omit"],
        )
        for tier, a in sorted(by_tier.items())
    }
    return EvalReport(per_tier=per_tier, latency_ms=decode_w * FRAME_MS, skipped=skipped)
