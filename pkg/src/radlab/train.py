"""Stage configs, learning-rate schedules, AdamW and the stage runner."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .checkpoint import Checkpoint
from .denoise import corrupt, example_rng
from .tensor import ContractError
from .tokenizer import Vocabulary

log = logging.getLogger(__name__)

STAGE_KINDS = ("pretrain", "midtrain", "finetune")
STAGE_CODES = {k: i for i, k in enumerate(STAGE_KINDS)}
DECAYS = ("anneal-to-min", "linear-to-zero", "constant")


class StageError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageConfig:
    kind: str
    objective: str
    max_lr: float
    min_lr: float = 0.0
    warmup: float = 0  # fraction of total steps if < 1, else absolute steps
    decay: str = "constant"
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int | None = None
    total_steps: int | None = None
    max_src_len: int = 512
    max_tgt_len: int = 128
    corruption_rate: float = 0.15
    mean_span: float = 3.0
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = None
    eval_every: int | None = None
    patience: int = 3
    min_delta: float = 1e-3

    def __post_init__(self) -> None:
        if self.kind not in STAGE_KINDS:
            raise ContractError(f"stage kind must be one of {STAGE_KINDS}, got {self.kind!r}")
        if self.objective not in ("denoise", "supervised"):
            raise ContractError(f"objective must be denoise or supervised, got {self.objective!r}")
        if self.decay not in DECAYS:
            raise ContractError(f"decay must be one of {DECAYS}, got {self.decay!r}")
        if not 0 <= self.min_lr <= self.max_lr:
            raise ContractError(f"need 0 <= min_lr <= max_lr, got {self.min_lr} and {self.max_lr}")
        if self.warmup < 0:
            raise ContractError("warmup must be non-negative")
        if (self.epochs is None) == (self.total_steps is None):
            raise ContractError("set exactly one of epochs or total_steps")
        if not 1 <= self.max_src_len <= M.MAX_CONTEXT or not 1 <= self.max_tgt_len <= M.MAX_CONTEXT:
            raise ContractError(f"truncation lengths must lie in [1, {M.MAX_CONTEXT}]")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")

    def warmup_steps(self, total_steps: int) -> int:
        """Warmup length in steps, never longer than the stage itself."""
        w = int(round(self.warmup * total_steps)) if 0 < self.warmup < 1 else int(self.warmup)
        return min(w, total_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    def with_(self, **changes) -> "StageConfig":
        return replace(self, **changes)


# Published hyperparameters of the three stages.
PUBLISHED_PRETRAIN = StageConfig(
    kind="pretrain", objective="denoise", max_lr=1e-4, min_lr=1e-5, warmup=0.01,
    decay="anneal-to-min", weight_decay=0.01, total_steps=1000,
)
PUBLISHED_MIDTRAIN = StageConfig(
    kind="midtrain", objective="denoise", max_lr=1e-6, min_lr=0.0, warmup=200,
    decay="linear-to-zero", batch_size=16, epochs=2,
)
PUBLISHED_FINETUNE = StageConfig(
    kind="finetune", objective="supervised", max_lr=5e-5, min_lr=5e-5, warmup=0,
    decay="constant", batch_size=16, epochs=1, max_src_len=512, max_tgt_len=128,
)


def lr_at(cfg: StageConfig, step: int, total_steps: int) -> float:
    """Linear warmup to ``max_lr``, then the configured decay down to the final step."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if cfg.decay == "constant":
        w = cfg.warmup_steps(total_steps)
        return cfg.max_lr * step / w if step < w else cfg.max_lr
    w = cfg.warmup_steps(total_steps)
    if step <= w:
        return cfg.max_lr * step / w if w else cfg.max_lr
    remaining = (total_steps - step) / (total_steps - w)
    floor = cfg.min_lr if cfg.decay == "anneal-to-min" else 0.0
    return floor + (cfg.max_lr - floor) * remaining


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class Moments:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray]) -> "Moments":
        return cls({k: np.zeros_like(a) for k, a in arrays.items()}, {k: np.zeros_like(a) for k, a in arrays.items()})


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    moments: Moments,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[dict[str, np.ndarray], Moments]:
    """One bias-corrected AdamW update with decoupled weight decay.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``. Returns
    new arrays; the inputs are left untouched.
    """
    b1, b2 = betas
    t = moments.t + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m, v = moments.m[name], moments.v[name]
        if not p.shape == g.shape == m.shape == v.shape:
            raise ContractError(f"adamw: shape mismatch for {name}: param {p.shape}, grad {g.shape}, moments {m.shape}/{v.shape}")
        g64 = g.astype(np.float64)
        m2 = b1 * m + (1 - b1) * g64
        v2 = b2 * v + (1 - b2) * g64 * g64
        update = (m2 / c1) / (np.sqrt(v2 / c2) + eps) + weight_decay * p
        new_p[name] = (p - lr * update).astype(p.dtype)
        new_m[name] = m2.astype(m.dtype)
        new_v[name] = v2.astype(v.dtype)
    return new_p, Moments(new_m, new_v, t)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total <= max_norm or total == 0:
        return grads, total
    factor = max_norm / total
    return {k: (g * factor).astype(g.dtype) for k, g in grads.items()}, total


# ---------------------------------------------------------------------------
# Stage runner
# ---------------------------------------------------------------------------


@dataclass
class TrainingLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)
    stopped_early: bool = False

    def append(self, step: int, lr: float, loss: float) -> None:
        self.rows.append((step, lr, loss))

    @property
    def losses(self) -> list[float]:
        return [r[2] for r in self.rows]

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "lr", "loss"])
            for step, lr, loss in self.rows:
                w.writerow([step, repr(lr), f"{loss:.6f}"])


def _plan_steps(cfg: StageConfig, n: int) -> tuple[int, int]:
    """(effective batch size, total steps). Batches drop the ragged tail."""
    batch = min(cfg.batch_size, n)
    per_epoch = n // batch
    total = cfg.total_steps if cfg.total_steps is not None else cfg.epochs * per_epoch
    return batch, total


def _denoise_pairs(data, cfg: StageConfig, vocab: Vocabulary, epoch: int, indices) -> list:
    pairs = []
    code = STAGE_CODES[cfg.kind]
    for i in indices:
        tokens = data[i][: cfg.max_src_len]
        ex = corrupt(tokens, cfg.corruption_rate, cfg.mean_span, example_rng(cfg.seed, code, epoch, int(i)), vocab)
        target = list(ex.target_ids[:-1])[: cfg.max_tgt_len - 1]
        pairs.append((list(ex.input_ids), target))
    return pairs


def _supervised_pairs(data, cfg: StageConfig, indices) -> list:
    return [(list(data[i][0])[: cfg.max_src_len], list(data[i][1])[: cfg.max_tgt_len - 1]) for i in indices]


def _check_data(cfg: StageConfig, data: Sequence) -> None:
    if len(data) == 0:
        raise StageError(f"{cfg.kind}: empty dataset")
    first = data[0]
    is_pair = isinstance(first, tuple) and len(first) == 2 and not isinstance(first[0], (int, np.integer))
    if cfg.objective == "supervised" and not is_pair:
        raise StageError(f"{cfg.kind}: supervised objective needs (source, target) pairs")
    if cfg.objective == "denoise" and is_pair:
        raise StageError(f"{cfg.kind}: denoise objective needs raw token sequences, got pairs")


def make_batches(cfg: StageConfig, data: Sequence, vocab: Vocabulary, epoch: int, order: np.ndarray, batch: int):
    for start in range(0, len(order) - batch + 1, batch):
        idx = order[start : start + batch]
        if cfg.objective == "denoise":
            pairs = _denoise_pairs(data, cfg, vocab, epoch, idx)
        else:
            pairs = _supervised_pairs(data, cfg, idx)
        yield M.collate(pairs)


# Epoch slot reserved for the fixed held-out corruption draw; training epochs never reach it.
HELDOUT_EPOCH = 2**32 - 1


def evaluate_loss(params: M.ModelParams, cfg: StageConfig, data: Sequence, vocab: Vocabulary, batch_size: int = 32) -> float:
    """Token-weighted mean loss over ``data`` with a fixed corruption draw."""
    total, count = 0.0, 0
    order = np.arange(len(data))
    with T.no_grad():
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            if cfg.objective == "denoise":
                pairs = _denoise_pairs(data, cfg, vocab, HELDOUT_EPOCH, idx)
            else:
                pairs = _supervised_pairs(data, cfg, idx)
            b = M.collate(pairs)
            total += M.batch_loss(params, b).item() * b.n_tokens
            count += b.n_tokens
    return total / count


def run_stage(
    start: Checkpoint,
    cfg: StageConfig,
    data: Sequence,
    vocab: Vocabulary,
    heldout: Sequence | None = None,
) -> tuple[Checkpoint, TrainingLog]:
    """Train one stage from ``start`` and return the new checkpoint and its log.

    ``data`` holds token sequences for denoise stages and ``(src, tgt)`` id
    pairs for supervised ones. Each stage starts a fresh optimizer. When
    ``cfg.eval_every`` is set and ``heldout`` is given, training stops once the
    held-out loss fails to improve by ``min_delta`` for ``patience`` checks.
    """
    _check_data(cfg, data)
    if start.config.vocab_size != vocab.vocab_size:
        raise StageError(f"{cfg.kind}: model vocab {start.config.vocab_size} != tokenizer vocab {vocab.vocab_size}")
    batch, total = _plan_steps(cfg, len(data))
    if total < 1:
        raise StageError(f"{cfg.kind}: no optimizer steps planned")
    arrays = {k: v.copy() for k, v in start.params.items()}
    moments = Moments.zeros_like(arrays)
    rng = np.random.default_rng([cfg.seed, STAGE_CODES[cfg.kind]])
    train_log = TrainingLog()
    best, bad = math.inf, 0
    best_arrays = None
    step, epoch = 0, 0
    log.info("%s: %d examples, batch %d, %d steps", cfg.kind, len(data), batch, total)
    while step < total:
        order = rng.permutation(len(data))
        for b in make_batches(cfg, data, vocab, epoch, order, batch):
            step += 1
            params = M.ModelParams.from_arrays(start.config, arrays)
            with T.Tape() as tape:
                loss = M.batch_loss(params, b)
            grads = _named_grads(T.backward(tape, loss), params)
            if cfg.clip_norm:
                grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
            lr = lr_at(cfg, step, total)
            arrays, moments = adamw_step(arrays, grads, moments, lr, cfg.betas, cfg.eps, cfg.weight_decay)
            train_log.append(step, lr, loss.item())
            if cfg.eval_every and heldout is not None and step % cfg.eval_every == 0:
                value = evaluate_loss(M.ModelParams.from_arrays(start.config, arrays, False), cfg, heldout, vocab)
                train_log.evals.append((step, value))
                if value < best - cfg.min_delta:
                    best, bad, best_arrays = value, 0, arrays
                else:
                    bad += 1
                    if bad >= cfg.patience:
                        train_log.stopped_early = True
                        arrays = best_arrays if best_arrays is not None else arrays
                        break
            if step >= total:
                break
        if train_log.stopped_early:
            break
        epoch += 1
    ckpt = Checkpoint(
        config=start.config,
        params=arrays,
        m=moments.m,
        v=moments.v,
        step=moments.t,
        provenance=tuple(start.provenance) + (cfg.kind,),
    )
    return ckpt, train_log


def _named_grads(grads: dict, params: M.ModelParams) -> dict[str, np.ndarray]:
    return {name: grads[t] for name, t in params.items() if t in grads}
