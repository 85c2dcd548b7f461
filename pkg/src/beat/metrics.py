"""Tokenizer evaluation: reconstruction loss, prediction loss, codebook
utilization, the weighted quality score, and the ablation matrix over
quantizer structure, codebook size, and input length."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .model import BeatConfig, BeatParams, forward_losses
from .preprocess import SegmentPair
from .quantizer import UsageStats

SCORE_UTILIZATION_WEIGHT = 0.2
SCORE_LOSS_WEIGHT = 0.4

ABLATION_COLUMNS = (
    "configuration",
    "residual_levels",
    "codebook_size",
    "total_length",
    "utilization_pct",
    "loss_r",
    "loss_p",
    "score",
)


@dataclass
class EvalReport:
    loss_r: float
    loss_p: float
    utilization_pct: float
    score: float
    config: BeatConfig
    configuration: str = "original"


def eval_model(params: BeatParams, eval_set: Sequence[SegmentPair]) -> EvalReport:
    """Mean reconstruction and prediction MSE plus codebook utilization over
    an evaluation set. Usage counting starts fresh; the score field is filled
    by the caller once baselines are known (0.0 until then)."""
    if not eval_set:
        raise ValueError("evaluation set is empty")
    cfg = params.config
    stats = UsageStats((cfg.codebook_size1, cfg.codebook_size2))
    sum_r = 0.0
    sum_p = 0.0
    for pair in eval_set:
        bundle, _ = forward_losses(params, pair, stats=stats)
        sum_r += bundle.l_recon
        sum_p += bundle.l_pred
    n = len(eval_set)
    k2 = cfg.codebook_size2 if cfg.levels == 2 else 0
    active = stats.hits if k2 else stats.hits[:1]
    distinct = sum(int(np.count_nonzero(h)) for h in active)
    utilization_pct = 100.0 * distinct / (cfg.codebook_size1 + k2)
    return EvalReport(
        loss_r=sum_r / n,
        loss_p=sum_p / n,
        utilization_pct=utilization_pct,
        score=0.0,
        config=cfg,
    )


def score(
    utilization_pct: float,
    loss_r: float,
    loss_p: float,
    loss_r_base: float,
    loss_p_base: float,
) -> float:
    """Weighted quality score.

    (0.2 * utilization_fraction + 0.4 * loss_r_base / loss_r
     + 0.4 * loss_p_base / loss_p) * 100, with utilization entering as a
    fraction of 1, not a percent.
    """
    if not 0.0 <= utilization_pct <= 100.0:
        raise ValueError(f"utilization_pct must be in [0, 100], got {utilization_pct}")
    for name, value in (
        ("loss_r", loss_r), ("loss_p", loss_p),
        ("loss_r_base", loss_r_base), ("loss_p_base", loss_p_base),
    ):
        if value <= 0:
            raise ValueError(f"{name} must be positive, got {value}")
    return (
        SCORE_UTILIZATION_WEIGHT * (utilization_pct / 100.0)
        + SCORE_LOSS_WEIGHT * (loss_r_base / loss_r)
        + SCORE_LOSS_WEIGHT * (loss_p_base / loss_p)
    ) * 100.0


def run_ablation(
    base_config: BeatConfig,
    data_for: Callable[[BeatConfig], tuple[list[SegmentPair], list[SegmentPair]]],
    variants: Sequence[tuple[str, dict]],
    seed: int = 0,
    epochs: int = 10,
    base_lr: float = 1e-4,
    batch_size: int = 32,
) -> list[EvalReport]:
    """Train the base configuration and each variant with an identical seed
    and budget, scoring every row against the base losses.

    ``data_for`` builds (train, eval) pairs matching a config's input length,
    so length variants get correctly sized datasets. ``variants`` are
    (name, config-overrides) tuples, overrides limited to the quantizer
    structure, codebook sizes, and input length.
    """
    from .trainer import train

    allowed = {"levels", "codebook_size1", "codebook_size2", "context_len"}
    reports: list[EvalReport] = []

    def run_one(name: str, config: BeatConfig) -> EvalReport:
        train_set, eval_set = data_for(config)
        params, _ = train(
            config, train_set, eval_set, epochs=epochs, seed=seed,
            base_lr=base_lr, batch_size=batch_size,
        )
        report = eval_model(params, eval_set)
        report.configuration = name
        return report

    base_report = run_one("original", base_config)
    base_report.score = score(
        base_report.utilization_pct,
        base_report.loss_r, base_report.loss_p,
        base_report.loss_r, base_report.loss_p,
    )
    reports.append(base_report)

    for name, overrides in variants:
        unknown = set(overrides) - allowed
        if unknown:
            raise ValueError(f"variant {name!r} modifies unsupported fields: {sorted(unknown)}")
        config = replace(base_config, **overrides)
        report = run_one(name, config)
        report.score = score(
            report.utilization_pct,
            report.loss_r, report.loss_p,
            base_report.loss_r, base_report.loss_p,
        )
        reports.append(report)
    return reports


def table5_variants(base_config: BeatConfig) -> list[tuple[str, dict]]:
    """The standard ablation rows: single-level quantization, doubled and
    halved codebooks, doubled and halved input length."""
    k = base_config.codebook_size1
    t = base_config.context_len
    return [
        ("single_level", {"levels": 1}),
        ("larger_codebook", {"codebook_size1": 2 * k, "codebook_size2": 2 * k}),
        ("smaller_codebook", {"codebook_size1": k // 2, "codebook_size2": k // 2}),
        ("longer_input", {"context_len": 2 * t}),
        ("shorter_input", {"context_len": t // 2}),
    ]


def write_ablation_csv(reports: list[EvalReport], path, baseline_note: str = "") -> None:
    """Emit the ablation table. The header comment records that scores are
    relative to the first (original) row's losses."""
    with open(path, "w", newline="") as fh:
        if baseline_note:
            fh.write(f"# {baseline_note}\n")
        writer = csv.writer(fh)
        writer.writerow(ABLATION_COLUMNS)
        for r in reports:
            writer.writerow(
                [
                    r.configuration,
                    r.config.levels,
                    r.config.codebook_size1,
                    r.config.context_len,
                    f"{r.utilization_pct:.4f}",
                    f"{r.loss_r:.6f}",
                    f"{r.loss_p:.6f}",
                    f"{r.score:.4f}",
                ]
            )
