"""Optimization loop: decoupled-weight-decay adaptive-moment updates, a
cosine learning-rate schedule, per-epoch dead-code maintenance, and seeded
end-to-end determinism."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import BeatConfig, BeatParams, backward, forward_losses, init_model
from .preprocess import SegmentPair
from .quantizer import Codebook, UsageStats, init_codebooks, reinit_dead_codes

HISTORY_FIELDS = ("epoch", "l_recon", "l_pred", "l_vq", "l_total", "utilization_pct", "lr")


@dataclass
class OptimizerState:
    """Per-array first/second moments plus the update hyperparameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 32

    @classmethod
    def for_params(cls, params: BeatParams, **kwargs) -> "OptimizerState":
        names = params.learnable_names()
        return cls(
            m={n: np.zeros_like(params[n]) for n in names},
            v={n: np.zeros_like(params[n]) for n in names},
            **kwargs,
        )


@dataclass
class TrainHistory:
    """One row of evaluation metrics per completed epoch."""

    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append({k: row[k] for k in HISTORY_FIELDS})

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
            writer.writeheader()
            writer.writerows(self.rows)

    @classmethod
    def read_csv(cls, path) -> "TrainHistory":
        history = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                history.rows.append(
                    {
                        "epoch": int(row["epoch"]),
                        **{k: float(row[k]) for k in HISTORY_FIELDS if k != "epoch"},
                    }
                )
        return history


def adamw_step(
    params: BeatParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float | None = None,
) -> None:
    """One in-place update. Weight decay is decoupled: p -= lr * wd * p,
    independent of the gradient-driven term."""
    if lr is None:
        lr = state.lr
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        update = lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay != 0.0:
            update = update + lr * state.weight_decay * p
        params[name] = p - update


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Half-cosine decay from base_lr at step 0 to min_lr at total_steps."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + np.cos(np.pi * step / total_steps))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm > 0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def _harvest_query_vectors(params: BeatParams, pairs: list[SegmentPair]) -> np.ndarray:
    from .model import encode

    rows = []
    for pair in pairs:
        rows.append(encode(params, pair.context).h_latent_q)
    return np.concatenate(rows, axis=0)


def _pad_codebook(entries: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    if entries.shape[0] == size:
        return entries
    extra = rng.normal(0.0, 1e-3, size=(size - entries.shape[0], entries.shape[1]))
    return np.concatenate([entries, entries.mean(axis=0) + extra], axis=0)


def warm_start_codebooks(params: BeatParams, pairs: list[SegmentPair], seed: int) -> None:
    """Replace the placeholder codebooks with k-means centroids of the
    encoder's query outputs (level 1) and of the stage-1 residuals (level 2).

    When there are fewer vectors than codebook entries, k-means runs at the
    reduced size and the remaining entries are filled near the sample mean.
    """
    cfg = params.config
    vectors = _harvest_query_vectors(params, pairs)
    rng = np.random.default_rng(seed)
    k1 = min(cfg.codebook_size1, vectors.shape[0])
    k2 = min(cfg.codebook_size2, vectors.shape[0]) if cfg.levels == 2 else None
    c1, c2 = init_codebooks(vectors, k1, k2, seed=seed)
    params["codebook1"] = _pad_codebook(c1.entries, cfg.codebook_size1, rng)
    if c2 is not None:
        params["codebook2"] = _pad_codebook(c2.entries, cfg.codebook_size2, rng)


def train(
    config: BeatConfig,
    train_set: list[SegmentPair],
    eval_set: list[SegmentPair],
    epochs: int,
    seed: int = 0,
    base_lr: float = 1e-4,
    min_lr: float = 0.0,
    batch_size: int = 32,
    weight_decay: float = 0.0,
    clip_norm: float = 1.0,
    dead_code_reinit: bool = True,
) -> tuple[BeatParams, TrainHistory]:
    """Train a tokenizer from scratch.

    Order of operations: seeded init, one warm-up encoder pass to k-means the
    codebooks, then per epoch a seeded shuffle, batched
    forward/backward/update steps under the cosine schedule, a dead-code
    reset, and an evaluation pass appended to the history. Bit-reproducible
    for a fixed seed and thread count.
    """
    if not train_set:
        raise ValueError("train_set is empty")
    if not eval_set:
        raise ValueError("eval_set is empty")
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")

    seed_seq = np.random.SeedSequence(seed)
    init_seed, warm_seed, shuffle_seed, reinit_seed = (
        int(s.generate_state(1)[0]) for s in seed_seq.spawn(4)
    )
    params = init_model(config, seed=init_seed)
    warm_start_codebooks(params, train_set, seed=warm_seed)

    history = TrainHistory()
    if epochs == 0:
        return params, history

    opt = OptimizerState.for_params(
        params, lr=base_lr, weight_decay=weight_decay, batch_size=batch_size
    )
    shuffle_rng = np.random.default_rng(shuffle_seed)
    reinit_rng = np.random.default_rng(reinit_seed)

    steps_per_epoch = int(np.ceil(len(train_set) / batch_size))
    total_steps = epochs * steps_per_epoch
    global_step = 0

    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        epoch_stats = UsageStats((config.codebook_size1, config.codebook_size2))
        recent_queries = []
        for start in range(0, len(order), batch_size):
            batch = [train_set[i] for i in order[start : start + batch_size]]
            lr = cosine_lr(global_step, total_steps, base_lr, min_lr)
            grads = None
            for pair in batch:
                bundle, cache = forward_losses(params, pair, stats=epoch_stats)
                if not np.isfinite(bundle.l_total):
                    raise FloatingPointError(
                        f"training diverged at epoch {epoch}: l_total={bundle.l_total}"
                    )
                recent_queries.append(cache.h_latent_q)
                pair_grads = backward(params, pair)
                if grads is None:
                    grads = pair_grads
                else:
                    for name in grads:
                        grads[name] += pair_grads[name]
            for name in grads:
                grads[name] /= len(batch)
            if clip_norm > 0:
                clip_grads(grads, clip_norm)
            adamw_step(params, grads, opt, lr=lr)
            global_step += 1

        if dead_code_reinit:
            recent = np.concatenate(recent_queries, axis=0)
            _reinit_params_codebooks(params, epoch_stats, recent, reinit_rng)

        metrics = _eval_epoch(params, eval_set)
        lr_now = cosine_lr(min(global_step, total_steps), total_steps, base_lr, min_lr)
        history.append(epoch=epoch, lr=lr_now, **metrics)
    return params, history


def _eval_epoch(params: BeatParams, eval_set: list[SegmentPair]) -> dict:
    """Mean losses and utilization over the evaluation pairs, one pass."""
    stats = UsageStats((params.config.codebook_size1, params.config.codebook_size2))
    sums = {"l_recon": 0.0, "l_pred": 0.0, "l_vq": 0.0, "l_total": 0.0}
    for pair in eval_set:
        bundle, _ = forward_losses(params, pair, stats=stats)
        sums["l_recon"] += bundle.l_recon
        sums["l_pred"] += bundle.l_pred
        sums["l_vq"] += bundle.l_vq
        sums["l_total"] += bundle.l_total
    n = len(eval_set)
    out = {k: v / n for k, v in sums.items()}
    k2 = params.config.codebook_size2 if params.config.levels == 2 else 0
    active_hits = stats.hits if k2 else stats.hits[:1]
    distinct = sum(int(np.count_nonzero(h)) for h in active_hits)
    out["utilization_pct"] = 100.0 * distinct / (params.config.codebook_size1 + k2)
    return out


def _reinit_params_codebooks(
    params: BeatParams,
    stats: UsageStats,
    recent: np.ndarray,
    rng: np.random.Generator,
) -> None:
    cfg = params.config
    c1 = Codebook(params["codebook1"], level=1)
    seed1 = int(rng.integers(0, 2**31 - 1))
    params["codebook1"] = reinit_dead_codes(c1, stats.hits[0], recent, seed=seed1).entries
    if cfg.levels == 2:
        # level-2 replacements come from residuals against the level-1 book
        c2 = Codebook(params["codebook2"], level=2)
        seed2 = int(rng.integers(0, 2**31 - 1))
        from .quantizer import _pairwise_sq_dists

        assign = np.argmin(_pairwise_sq_dists(recent, params["codebook1"]), axis=1)
        residuals = recent - params["codebook1"][assign]
        params["codebook2"] = reinit_dead_codes(
            c2, stats.hits[1], residuals, seed=seed2
        ).entries
