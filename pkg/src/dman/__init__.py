"""Dynamic memory-augmented attention for long user behaviour sequences.

NumPy only: a small reverse-mode tape (:mod:`dman.autodiff`) drives the
recurrent and long-term attention layers, the dynamic-routing memory and the
two-phase training loop.  :class:`DMANRecommender` is the scikit-learn style
entry point; ``python -m dman`` is the command line.
"""
from .data import BehaviorLog, SegmentedHistory, generate_synthetic, ingest, segment
from .estimator import DMANRecommender
from .evaluation import RankingMetrics, efficiency_bench, rank_eval
from .model import DMAN, ModelConfig

__all__ = [
    "BehaviorLog", "SegmentedHistory", "generate_synthetic", "ingest", "segment",
    "DMANRecommender", "RankingMetrics", "efficiency_bench", "rank_eval",
    "DMAN", "ModelConfig",
]
__version__ = "0.1.0"
