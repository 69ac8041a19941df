from mmfex.recbench.benchmark import BenchmarkResult, run_benchmark
from mmfex.recbench.metrics import (
    MetricsReport,
    UserMetrics,
    evaluate,
    evaluate_ranker,
    topk,
    user_metrics,
    write_report,
)
from mmfex.recbench.split import SplitBundle, holdout_split
from mmfex.recbench.vbpr import (
    DivergenceError,
    MissingEmbeddingError,
    PopularityModel,
    UnknownUserError,
    VBPRHyperParams,
    VBPRModel,
    predict_scores,
    train_vbpr,
)

__all__ = [
    "BenchmarkResult",
    "DivergenceError",
    "MetricsReport",
    "MissingEmbeddingError",
    "PopularityModel",
    "SplitBundle",
    "UnknownUserError",
    "UserMetrics",
    "VBPRHyperParams",
    "VBPRModel",
    "evaluate",
    "evaluate_ranker",
    "holdout_split",
    "predict_scores",
    "run_benchmark",
    "topk",
    "train_vbpr",
    "user_metrics",
    "write_report",
]
