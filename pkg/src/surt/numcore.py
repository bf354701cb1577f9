"""Parameter storage, optimizer, learning-rate schedule, clipping, grad checking.

Training runs in float32; gradient checking and oracle comparisons require
float64 stores, where central finite differences are actually trustworthy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd, tensorio
from .errors import GradientMissing, NonFiniteGradient, NonFiniteObjective, OutOfSchedule


@dataclass
class ScheduleConfig:
    """Linear warmup to ``peak_lr`` followed by linear decay to zero.

    Desk-scale defaults; the full-scale recipe this mirrors used 10k warmup
    steps to a peak of 3e-4.
    """

    warmup_steps: int = 100
    peak_lr: float = 3e-3
    total_steps: int = 2000

    def __post_init__(self):
        if not (0 < self.warmup_steps < self.total_steps):
            raise ValueError(f"need 0 < warmup_steps < total_steps, got {self.warmup_steps}/{self.total_steps}")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")


def lr_at_step(step: int, cfg: ScheduleConfig) -> float:
    if step < 0 or step > cfg.total_steps:
        raise OutOfSchedule(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


class ParamStore:
    """Named parameters with matching gradient and AdamW moment slots.

    Single-writer contract: exactly one caller mutates parameters, moments,
    or the step counter at a time. Reads between steps are safe from any
    thread.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m1: dict[str, np.ndarray] = {}
        self.m2: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.asarray(value, dtype=self.dtype)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m1[name] = np.zeros_like(arr)
        self.m2[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return list(self.params)

    def n_values(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def leaves(self) -> dict[str, autograd.Node]:
        """Fresh tape leaves for one forward/backward pass."""
        return {name: autograd.leaf(value) for name, value in self.params.items()}

    def accumulate_grads(self, leaves: dict[str, autograd.Node]) -> None:
        for name, node in leaves.items():
            if node.grad is not None:
                self.grads[name] += node.grad

    def astype(self, dtype) -> "ParamStore":
        clone = ParamStore(dtype)
        for name, value in self.params.items():
            clone.add(name, value.astype(dtype))
        clone.step = self.step
        return clone


def clip_gradients(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. Idempotent: a second application is a no-op.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient for {name!r} is not finite")
        total += float(np.vdot(g, g))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for g in store.grads.values():
            g *= scale
    return norm


def adamw_step(
    store: ParamStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """Decoupled-weight-decay adaptive-moment update with bias correction."""
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in store.params.items():
        if name not in store.grads:
            raise GradientMissing(f"no gradient slot for {name!r}")
        g = store.grads[name]
        m1 = store.m1[name]
        m2 = store.m2[name]
        m1 *= b1
        m1 += (1.0 - b1) * g
        m2 *= b2
        m2 += (1.0 - b2) * g * g
        mhat = m1 / c1
        vhat = m2 / c2
        p -= lr * (mhat / (np.sqrt(vhat) + eps))
        p -= lr * weight_decay * p


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_coords: int
    worst: tuple[str, int, float, float] | None = None  # (param, flat index, analytic, numeric)
    failures: list[tuple[str, int, float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(
    loss_fn,
    store: ParamStore,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    order: int = 2,
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` maps a dict of parameter leaves (see :meth:`ParamStore.leaves`)
    to a scalar node. Relative error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``. When ``max_coords`` is given, that many
    coordinates are sampled uniformly instead of sweeping every one.

    ``order=2`` is the textbook (f(x+h) - f(x-h)) / 2h rule. ``order=4``
    uses the five-point symmetric stencil, which tolerates a much larger h;
    use it for deep compositions where coordinates with near-zero gradients
    would otherwise drown in the two-point roundoff floor.
    """
    if store.dtype != np.float64:
        raise ValueError("grad_check requires a float64 store")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    leaves = store.leaves()
    out = loss_fn(leaves)
    base = float(out.value)
    if not np.isfinite(base):
        raise NonFiniteObjective(f"objective is {base}")
    autograd.backward(out)
    analytic = {
        name: (node.grad if node.grad is not None else np.zeros_like(node.value))
        for name, node in leaves.items()
    }

    coords = [(name, idx) for name, p in store.params.items() for idx in range(p.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in picks]

    def probe(name, idx, delta):
        flat = store.params[name].reshape(-1)
        saved = flat[idx]
        flat[idx] = saved + delta
        value = float(loss_fn(store.leaves()).value)
        flat[idx] = saved
        if not np.isfinite(value):
            raise NonFiniteObjective("objective not finite at perturbed point")
        return value

    report = GradCheckReport(max_rel_err=0.0, tol=tol, n_coords=len(coords))
    for name, idx in coords:
        if order == 2:
            numeric = (probe(name, idx, h) - probe(name, idx, -h)) / (2.0 * h)
        else:
            f_m2, f_m1, f_p1, f_p2 = (probe(name, idx, d) for d in (-2 * h, -h, h, 2 * h))
            numeric = (f_m2 - 8.0 * f_m1 + 8.0 * f_p1 - f_p2) / (12.0 * h)
        a = float(analytic[name].reshape(-1)[idx])
        rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        if rel > report.max_rel_err:
            report.max_rel_err = rel
            report.worst = (name, idx, a, numeric)
        if rel >= tol:
            report.failures.append((name, idx, a, numeric, rel))
    return report


# ---------------------------------------------------------------------------
# checkpoints: one tensor file per parameter plus a JSON header
# ---------------------------------------------------------------------------


def save_checkpoint(store: ParamStore, directory: str | Path, config: dict, step: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, (name, value) in enumerate(store.params.items()):
        fname = f"p{i:04d}.surt"
        tensorio.save_tensor(directory / fname, value)
        files[name] = fname
    header = {"config": config, "step": step, "params": files}
    with open(directory / "header.json", "w") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[ParamStore, dict, int]:
    directory = Path(directory)
    with open(directory / "header.json") as fh:
        header = json.load(fh)
    store = ParamStore(np.float32)
    for name, fname in header["params"].items():
        store.add(name, tensorio.load_tensor(directory / fname))
    store.step = int(header["step"])
    return store, header["config"], int(header["step"])
