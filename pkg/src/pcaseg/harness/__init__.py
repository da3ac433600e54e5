"""Experiment orchestration, CLI and chart output."""

from .experiment import (ABLATION_ROWS, DEFAULT_SEEDS, DESK_SYNTH, DataSource, DirectionalResult, ExperimentPlan,
                         ResultTable, RunRow, RunSpec, ablation_plan, aggregate, directional_check,
                         geometry_self_test, run_ablation, run_experiment, run_one, table_from_outputs)
from .svg import emit_ablation_chart, emit_learning_curve, learning_curve_svg

__all__ = ["ABLATION_ROWS", "DEFAULT_SEEDS", "DESK_SYNTH", "DataSource", "DirectionalResult", "ExperimentPlan",
           "ResultTable", "RunRow", "RunSpec", "ablation_plan", "aggregate", "directional_check",
           "geometry_self_test", "run_ablation", "run_experiment", "run_one", "table_from_outputs",
           "emit_ablation_chart", "emit_learning_curve", "learning_curve_svg"]
