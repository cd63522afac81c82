"""
Merging updates into base weights.

    vanilla     W + D
    ortho_col   W + (I - U_k U_k^T) D
    ortho_both  W + lam (I - U_k U_k^T) D (I - V_k V_k^T)

U_k, V_k are the top-k singular vectors of the base weight W, and D is the
materialized update with the adapter scaling already applied.
"""

import logging
import math
import threading

from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from typing import Any, NamedTuple

from . import linalg
from .analysis import is_analyzable
from .checkpoint import DeltaSource, materialize_delta
from .container import TENSOR_PATH, TensorMap
from .errors import ConfigError, InputError
from .linalg import Matrix, TruncatedSVD

logger = logging.getLogger(__name__)

MERGE_MODES = ("vanilla", "ortho_col", "ortho_both")
DEFAULT_K = 64
DEFAULT_LAMBDA = 1.0

# swept in this order, unsorted
LAMBDA_SWEEP = (1, 1.15, 1.75, 1.2, 1.25)


class MergeConfig(NamedTuple):
    mode: str = "vanilla"
    k: int = DEFAULT_K
    lam: float = DEFAULT_LAMBDA
    passthrough_missing: bool = True


class MergeResult(NamedTuple):
    tensors: TensorMap
    manifest: dict[str, Any]


def check_merge_config(cfg: MergeConfig) -> MergeConfig:
    if cfg.mode not in MERGE_MODES:
        raise ConfigError(f"unknown merge mode {cfg.mode!r}, choose from {', '.join(MERGE_MODES)}")
    if isinstance(cfg.k, bool) or not isinstance(cfg.k, int) or cfg.k < 0:
        raise ConfigError(f"k must be a nonnegative integer, got {cfg.k!r}")
    if not (isinstance(cfg.lam, (int, float)) and math.isfinite(cfg.lam) and cfg.lam > 0):
        raise ConfigError(f"lambda must be a positive number, got {cfg.lam!r}")
    return cfg


def effective_rank(k: int, shape: tuple[int, ...]) -> int:
    "k, or min(shape) - 1 when a rank-k projector would remove the whole update"
    return min(k, min(shape) - 1)


def clamp_rank(k: int, shape: tuple[int, ...], path: str = "") -> int:
    clamped = effective_rank(k, shape)
    if clamped < k:
        logger.warning(f"{path or 'layer'}: k={k} clamped to {clamped} for shape {tuple(shape)}")
    return clamped


def _basis(W: Matrix, k: int, svd: TruncatedSVD | None) -> TruncatedSVD:
    if svd is None or svd.t < k:
        return linalg.truncated_svd(W, k)
    return svd


def merge_vanilla(W: Matrix, delta: DeltaSource) -> Matrix:
    W = linalg.as_matrix(W, delta.target)
    return W + materialize_delta(delta, W.shape)


def ortho_merge_col(
    W: Matrix, delta: DeltaSource, k: int = DEFAULT_K, svd: TruncatedSVD | None = None
) -> Matrix:
    W = linalg.as_matrix(W, delta.target)
    D = materialize_delta(delta, W.shape)
    k = clamp_rank(k, W.shape, delta.target)
    if k == 0:
        return W + D
    basis = _basis(W, k, svd)
    return W + linalg.project_col_complement(D, basis.U[:, :k])


def ortho_merge_both(
    W: Matrix,
    delta: DeltaSource,
    k: int = DEFAULT_K,
    lam: float = DEFAULT_LAMBDA,
    svd: TruncatedSVD | None = None,
) -> Matrix:
    if not lam > 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    W = linalg.as_matrix(W, delta.target)
    D = materialize_delta(delta, W.shape)
    k = clamp_rank(k, W.shape, delta.target)
    if k == 0:
        return W + lam * D
    basis = _basis(W, k, svd)
    projected = linalg.project_row_complement(
        linalg.project_col_complement(D, basis.U[:, :k]), basis.V[:, :k]
    )
    return W + lam * projected


class SvdCache(Mapping):
    """
    Lazily computed truncated SVDs of base tensors, keyed by tensor path.

    Each entry is computed on first access with rank `effective_rank(k, shape)`.
    Concurrent readers may race on the first computation of an entry; the first
    result inserted wins and every caller gets that one.
    """

    def __init__(self, base: TensorMap, k: int):
        self._base = base
        self.k = k
        self._svds: dict[TENSOR_PATH, TruncatedSVD] = {}
        self._lock = threading.Lock()

    def __getitem__(self, path: TENSOR_PATH) -> TruncatedSVD:
        if path not in self._base:
            raise KeyError(path)
        with self._lock:
            if path in self._svds:
                return self._svds[path]
        W = self._base[path]
        svd = linalg.truncated_svd(W, effective_rank(self.k, W.shape))
        with self._lock:
            return self._svds.setdefault(path, svd)

    def __iter__(self):
        return iter(self._base)

    def __len__(self):
        return len(self._base)

    @property
    def computed(self) -> int:
        with self._lock:
            return len(self._svds)


def merge_layer(
    W: Matrix, delta: DeltaSource, cfg: MergeConfig, svd: TruncatedSVD | None = None
) -> Matrix:
    match cfg.mode:
        case "vanilla":
            return merge_vanilla(W, delta)
        case "ortho_col":
            return ortho_merge_col(W, delta, cfg.k, svd)
        case "ortho_both":
            return ortho_merge_both(W, delta, cfg.k, cfg.lam, svd)
        case _:
            raise ConfigError(f"unknown merge mode {cfg.mode!r}")


def merge_checkpoint(
    base: TensorMap,
    deltas: Mapping[TENSOR_PATH, DeltaSource],
    cfg: MergeConfig = MergeConfig(),
    cache: SvdCache | None = None,
    threads: int = 1,
) -> MergeResult:
    """
    Merges every analyzable targeted layer. Tensors that are not merged are
    listed in the manifest's layers_skipped; they are copied unchanged when
    cfg.passthrough_missing, else left out of the output.
    """
    cfg = check_merge_config(cfg)
    missing = sorted(path for path in deltas if path not in base)
    if missing:
        raise InputError(f"updates target tensors missing from base: {missing[:5]}")

    ortho = cfg.mode != "vanilla"
    if ortho and cache is None:
        cache = SvdCache(base, cfg.k)

    merged_paths = [path for path in sorted(deltas) if is_analyzable(base, path)]
    for path in sorted(set(deltas) - set(merged_paths)):
        logger.warning(f"{path}: not mergeable (1-D, embedding or head), left unchanged")
    skipped = [path for path in base if path not in set(merged_paths)]

    clamped = []
    if ortho:
        for path in merged_paths:
            k_eff = effective_rank(cfg.k, base[path].shape)
            if k_eff < cfg.k:
                clamped.append({"path": path, "k": k_eff})

    def run(path: TENSOR_PATH) -> Matrix:
        W = base[path]
        svd = None
        if ortho and effective_rank(cfg.k, W.shape) > 0:
            svd = cache[path]
        return merge_layer(W, deltas[path], cfg, svd)

    if threads > 1 and len(merged_paths) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = dict(zip(merged_paths, pool.map(run, merged_paths)))
    else:
        results = {path: run(path) for path in merged_paths}

    drop = () if cfg.passthrough_missing else skipped
    tensors = base.replace(results, drop=drop)
    manifest = {
        "mode": cfg.mode,
        "k": cfg.k,
        "lambda": cfg.lam,
        "layers_merged": merged_paths,
        "layers_skipped": skipped,
        "clamped_layers": clamped,
    }
    logger.info(f"merged {len(merged_paths)} layers ({cfg.mode}), {len(skipped)} skipped")
    return MergeResult(tensors, manifest)


def sweep_lambda(
    base: TensorMap,
    deltas: Mapping[TENSOR_PATH, DeltaSource],
    cfg: MergeConfig,
    lambdas=LAMBDA_SWEEP,
    threads: int = 1,
) -> list[tuple[float, MergeResult]]:
    "one ortho_both merge per lambda, all sharing one SVD cache"
    if cfg.mode != "ortho_both":
        raise ConfigError(f"lambda sweep needs mode ortho_both, got {cfg.mode!r}")
    cache = SvdCache(base, cfg.k)
    results = []
    for lam in lambdas:
        results.append((lam, merge_checkpoint(base, deltas, cfg._replace(lam=lam), cache, threads)))
    return results
