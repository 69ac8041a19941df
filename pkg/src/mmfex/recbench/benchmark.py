"""Split -> train VBPR (best validation epoch) -> test metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from mmfex.ingest import InteractionSet
from mmfex.recbench.metrics import MetricsReport, evaluate
from mmfex.recbench.split import SplitBundle, holdout_split
from mmfex.recbench.vbpr import VBPRHyperParams, VBPRModel, train_vbpr

log = logging.getLogger(__name__)


@dataclass
class BenchmarkResult:
    split: SplitBundle
    model: VBPRModel
    report: MetricsReport


def run_benchmark(interactions: InteractionSet, features, hp: VBPRHyperParams | None = None,
                  seed: int = 42, k: int = 20) -> BenchmarkResult:
    hp = hp or VBPRHyperParams()
    split = holdout_split(interactions, seed)
    log.info("split: train=%d validation=%d test=%d (dropped users %d)",
             len(split.train), len(split.validation), len(split.test), split.dropped_users)
    model = train_vbpr(split.train, features, hp, seed, validation=split.validation)
    return BenchmarkResult(split, model, evaluate(model, split, k))
