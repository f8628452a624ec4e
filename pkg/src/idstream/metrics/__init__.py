"""Benchmark metric engine over precomputed measurement bundles."""

from .aggregation import agg_seg, agg_tr, percentile, planner_weights
from .bundle import BundleError, MeasurementBundle, load_bundle, parse_bundle, score_bundle
from .scores import GROUPS, METRICS, MetricReport, group_and_overall

__all__ = [
    "agg_seg", "agg_tr", "percentile", "planner_weights",
    "BundleError", "MeasurementBundle", "load_bundle", "parse_bundle", "score_bundle",
    "GROUPS", "METRICS", "MetricReport", "group_and_overall",
]
