"""
Per-layer structure of fine-tuning updates relative to the base weights.

For a base matrix W and an update D (both d x k) and the top-t singular vectors
U, V of W:

    m1 = |W^T D| / (|W| |D|)      column-space overlap with W
    m2 = |U U^T D| / |D|          share of D inside W's top column subspace
    m3 = |W D^T| / (|W| |D|)      row-space overlap with W
    m4 = |V V^T D^T| / |D|        share of D inside W's top row subspace

All norms are Frobenius. Since U and V are orthonormal, |U U^T D| = |U^T D| and
|V V^T D^T| = |D V|, which is what gets computed.
"""

import csv
import io
import json
import logging
import re

from collections import defaultdict
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from typing import Any, NamedTuple

import numpy as np

from . import linalg
from .checkpoint import DeltaSource, materialize_delta
from .container import TENSOR_PATH, TensorMap
from .errors import DegenerateNormError, InputError, ShapeError
from .linalg import Matrix, TruncatedSVD

logger = logging.getLogger(__name__)

DEFAULT_TOP_T = 16

MODULE_TYPES = {
    "q_proj",
    "k_proj",
    "v_proj",
    "o_proj",
    "gate_proj",
    "up_proj",
    "down_proj",
}
OTHER_MODULE = "other"

# embeddings and output heads are carried through but never analyzed or merged
SKIP_MARKERS = ("embed", "lm_head")

LAYER_COLUMNS = [
    "path",
    "layer_index",
    "module_type",
    "d",
    "k",
    "stable_rank",
    "m1",
    "m2",
    "m3",
    "m4",
    "base_fro_norm",
    "delta_fro_norm",
]

AGGREGATE_COLUMNS = [
    "module_type",
    "layers",
    "zero_layers",
    "stable_rank",
    "m1",
    "m2",
    "m3",
    "m4",
]

METRIC_FIELDS = ("m1", "m2", "m3", "m4")

LAYER_INDEX_RE = re.compile(r"(?:^|\.)(\d+)(?:\.|$)")


class AlignmentMetrics(NamedTuple):
    m1: float
    m2: float
    m3: float
    m4: float


class LayerReport(NamedTuple):
    path: TENSOR_PATH
    layer_index: int | None
    module_type: str
    d: int
    k: int
    stable_rank: float | None
    metrics: AlignmentMetrics | None
    base_fro_norm: float
    delta_fro_norm: float
    top_t: int

    @property
    def is_zero(self) -> bool:
        return self.metrics is None


class ModuleAggregate(NamedTuple):
    layers: int
    zero_layers: int
    stable_rank: float | None
    metrics: AlignmentMetrics | None


class AggregateReport(NamedTuple):
    modules: dict[str, ModuleAggregate]


def parse_layer_index(path: TENSOR_PATH) -> int | None:
    "the first purely numeric path segment, e.g. 12 in model.layers.12.mlp.up_proj.weight"
    match = LAYER_INDEX_RE.search(path)
    return int(match.group(1)) if match else None


def parse_module_type(path: TENSOR_PATH) -> str:
    parts = path.split(".")
    if len(parts) >= 2 and parts[-2] in MODULE_TYPES:
        return parts[-2]
    return OTHER_MODULE


def is_analyzable(tmap: TensorMap, path: TENSOR_PATH) -> bool:
    if path in tmap.flat:
        return False
    return not any(marker in path for marker in SKIP_MARKERS)


def alignment_metrics(
    W: Matrix, delta: Matrix, top_t: int = DEFAULT_TOP_T, svd: TruncatedSVD | None = None
) -> AlignmentMetrics:
    """
    The four overlap ratios of `delta` against `W`. `svd`, when given, must hold
    at least top_t triplets of W and saves recomputing them.
    """
    W = linalg.as_matrix(W, "base")
    delta = linalg.as_matrix(delta, "delta")
    if W.shape != delta.shape:
        raise ShapeError(f"base shape {W.shape} != delta shape {delta.shape}")
    if not 1 <= top_t <= min(W.shape):
        raise InputError(f"top_t={top_t} outside [1, {min(W.shape)}]")
    w_norm = linalg.frobenius_norm(W)
    d_norm = linalg.frobenius_norm(delta)
    if w_norm == 0.0:
        raise DegenerateNormError("alignment metrics are undefined for an all-zero base")
    if d_norm == 0.0:
        raise DegenerateNormError("alignment metrics are undefined for an all-zero delta")

    if svd is None or svd.t < top_t:
        svd = linalg.truncated_svd(W, top_t)
    U = svd.U[:, :top_t]
    V = svd.V[:, :top_t]

    return AlignmentMetrics(
        m1=linalg.frobenius_norm(W.T @ delta) / (w_norm * d_norm),
        m2=linalg.frobenius_norm(U.T @ delta) / d_norm,
        m3=linalg.frobenius_norm(W @ delta.T) / (w_norm * d_norm),
        m4=linalg.frobenius_norm(delta @ V) / d_norm,
    )


def analyze_layer(
    path: TENSOR_PATH, W: Matrix, delta: DeltaSource, top_t: int = DEFAULT_TOP_T
) -> LayerReport:
    """
    Stable rank, overlap metrics and norms of one layer's update. An all-zero
    update is reported with stable_rank and metrics set to None.
    """
    if top_t < 1:
        raise InputError(f"top_t must be >= 1, got {top_t}")
    W = linalg.as_matrix(W, path)
    D = materialize_delta(delta, W.shape)
    t = min(top_t, min(W.shape))
    if t < top_t:
        logger.warning(f"{path}: top_t={top_t} clamped to {t} for shape {W.shape}")

    delta_norm = linalg.frobenius_norm(D)
    if delta_norm == 0.0:
        logger.info(f"{path}: zero update")
        srank = None
        metrics = None
    else:
        srank = linalg.stable_rank(D)
        metrics = alignment_metrics(W, D, t)

    return LayerReport(
        path=path,
        layer_index=parse_layer_index(path),
        module_type=parse_module_type(path),
        d=W.shape[0],
        k=W.shape[1],
        stable_rank=srank,
        metrics=metrics,
        base_fro_norm=linalg.frobenius_norm(W),
        delta_fro_norm=delta_norm,
        top_t=t,
    )


def analyze_checkpoint(
    base: TensorMap,
    deltas: Mapping[TENSOR_PATH, DeltaSource],
    top_t: int = DEFAULT_TOP_T,
    threads: int = 1,
) -> list[LayerReport]:
    "analyze_layer over every analyzable update, sorted by path"
    missing = [path for path in deltas if path not in base]
    if missing:
        raise InputError(f"updates target tensors missing from base: {missing[:5]}")
    paths = [path for path in sorted(deltas) if is_analyzable(base, path)]
    skipped = len(deltas) - len(paths)
    if skipped:
        logger.info(f"skipping {skipped} non-analyzable tensors (1-D, embeddings, heads)")

    def run(path: TENSOR_PATH) -> LayerReport:
        return analyze_layer(path, base[path], deltas[path], top_t)

    if threads > 1 and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(run, paths))
    else:
        reports = [run(path) for path in paths]
    logger.info(f"analyzed {len(reports)} layers")
    return sorted(reports, key=lambda r: r.path)


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def aggregate_reports(reports: list[LayerReport]) -> AggregateReport:
    """
    Per-module-type means of stable rank and metrics. Zero-update layers count
    toward `layers` and `zero_layers` but not toward the means.
    """
    if not reports:
        raise InputError("cannot aggregate an empty list of layer reports")

    by_module: dict[str, list[LayerReport]] = defaultdict(list)
    for report in sorted(reports, key=lambda r: r.path):
        by_module[report.module_type].append(report)

    modules = {}
    for module_type, group in sorted(by_module.items()):
        nonzero = [r for r in group if not r.is_zero]
        metrics = None
        if nonzero:
            metrics = AlignmentMetrics(
                *(_mean([getattr(r.metrics, f) for r in nonzero]) for f in METRIC_FIELDS)
            )
        modules[module_type] = ModuleAggregate(
            layers=len(group),
            zero_layers=len(group) - len(nonzero),
            stable_rank=_mean([r.stable_rank for r in nonzero]),
            metrics=metrics,
        )
    return AggregateReport(modules)


def _layer_record(report: LayerReport) -> dict[str, Any]:
    metrics = report.metrics._asdict() if report.metrics else dict.fromkeys(METRIC_FIELDS)
    return {
        "path": report.path,
        "layer_index": report.layer_index,
        "module_type": report.module_type,
        "d": report.d,
        "k": report.k,
        "stable_rank": report.stable_rank,
        **metrics,
        "base_fro_norm": report.base_fro_norm,
        "delta_fro_norm": report.delta_fro_norm,
    }


def _aggregate_record(module_type: str, agg: ModuleAggregate) -> dict[str, Any]:
    metrics = agg.metrics._asdict() if agg.metrics else dict.fromkeys(METRIC_FIELDS)
    return {
        "module_type": module_type,
        "layers": agg.layers,
        "zero_layers": agg.zero_layers,
        "stable_rank": agg.stable_rank,
        **metrics,
    }


def build_layer_table(reports: list[LayerReport]) -> tuple[list[str], list[Any]]:
    rows = [
        [_layer_record(r)[col] for col in LAYER_COLUMNS]
        for r in sorted(reports, key=lambda r: r.path)
    ]
    return LAYER_COLUMNS, rows


def build_aggregate_table(report: AggregateReport) -> tuple[list[str], list[Any]]:
    rows = [
        [_aggregate_record(module_type, agg)[col] for col in AGGREGATE_COLUMNS]
        for module_type, agg in sorted(report.modules.items())
    ]
    return AGGREGATE_COLUMNS, rows


def _fixed(value: Any) -> Any:
    "floats rounded to 9 significant digits; everything else unchanged"
    if isinstance(value, float):
        return float(f"{value:.9g}")
    if isinstance(value, dict):
        return {k: _fixed(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_fixed(v) for v in value]
    return value


def _csv_cell(value: Any) -> str:
    match value:
        case None:
            return ""
        case float():
            return f"{value:.9g}"
        case _:
            return str(value)


def _emit_csv(cols: list[str], rows: list[Any]) -> bytes:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(cols)
    for row in rows:
        writer.writerow([_csv_cell(v) for v in row])
    return out.getvalue().encode("utf-8")


def emit_report(
    report: AggregateReport | list[LayerReport], fmt: str, top_t: int = DEFAULT_TOP_T
) -> bytes:
    """
    Deterministic CSV or JSON bytes.

    A list of layer reports gives the per-layer CSV, or the JSON document
    {"layers", "aggregates", "config"}. An AggregateReport gives one row per
    module type, or the JSON document without "layers".
    """
    if fmt not in ("csv", "json"):
        raise InputError(f"unknown report format {fmt!r}")

    if isinstance(report, AggregateReport):
        aggregate = report
        layers = None
    else:
        layers = sorted(report, key=lambda r: r.path)
        aggregate = aggregate_reports(layers) if layers else AggregateReport({})

    if fmt == "csv":
        if layers is None:
            return _emit_csv(*build_aggregate_table(aggregate))
        return _emit_csv(*build_layer_table(layers))

    doc: dict[str, Any] = {
        "aggregates": {
            module_type: {
                k: v for k, v in _aggregate_record(module_type, agg).items() if k != "module_type"
            }
            for module_type, agg in aggregate.modules.items()
        },
        "config": {"top_t": top_t},
    }
    if layers is not None:
        doc["layers"] = [_layer_record(r) for r in layers]
    text = json.dumps(_fixed(doc), sort_keys=True, indent=2, allow_nan=False)
    return (text + "\n").encode("utf-8")
