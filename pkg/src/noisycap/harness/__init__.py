from .config import ConfigError, ExperimentSpec, load_spec
from .report import write_report
from .suites import (
    SUITES,
    RunRecord,
    data_hash,
    run_ablations,
    run_controllability,
    run_memorization,
    run_noise_curve,
    score_bands,
)

__all__ = [
    "ConfigError",
    "ExperimentSpec",
    "RunRecord",
    "SUITES",
    "data_hash",
    "load_spec",
    "run_ablations",
    "run_controllability",
    "run_memorization",
    "run_noise_curve",
    "score_bands",
    "write_report",
]
