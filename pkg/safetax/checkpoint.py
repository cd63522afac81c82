"""
Adapters, update sources and full-checkpoint diffs.

An update to one weight matrix is a `DeltaSource`: either a `Dense` matrix
(full fine-tuning diff) or a `LowRank` adapter pair whose update is
(alpha / r) * B @ A.
"""

import json
import logging
import os

from collections import defaultdict
from collections.abc import Mapping
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from .container import TENSOR_PATH, TensorMap, load_tensor_map
from .errors import AdapterError, InputError, ShapeError
from .linalg import Matrix, as_matrix

logger = logging.getLogger(__name__)

DEFAULT_RANK = 4
DEFAULT_ALPHA = 16.0


class AdapterNamingConvention(NamedTuple):
    """
    How adapter tensors are named inside a container.

    The default is the PEFT layout: "<prefix><stem>.lora_A.weight" (r x k) and
    "<prefix><stem>.lora_B.weight" (d x r) targeting "<stem>.weight" in the base.
    `path_map` maps a stem straight to a base tensor path for checkpoints that
    don't follow that rule.
    """

    a_suffix: str = ".lora_A.weight"
    b_suffix: str = ".lora_B.weight"
    strip_prefix: str = "base_model.model."
    target_suffix: str = ".weight"
    sidecar_name: str = "adapter_config.json"
    weights_name: str = "adapter_model.safetensors"
    path_map: Mapping[str, TENSOR_PATH] | None = None

    def target_for(self, stem: str) -> TENSOR_PATH:
        if self.path_map and stem in self.path_map:
            return self.path_map[stem]
        if self.strip_prefix and stem.startswith(self.strip_prefix):
            stem = stem[len(self.strip_prefix) :]
        return stem + self.target_suffix


DEFAULT_CONVENTION = AdapterNamingConvention()


class AdapterPair(NamedTuple):
    target: TENSOR_PATH
    A: Matrix
    B: Matrix
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def shape(self) -> tuple[int, int]:
        return (self.B.shape[0], self.A.shape[1])


def build_adapter_pair(target: TENSOR_PATH, A, B, alpha: float) -> AdapterPair:
    "validates factor shapes: A is r x k, B is d x r, r <= min(d, k)"
    A = as_matrix(A, f"{target}: A")
    B = as_matrix(B, f"{target}: B")
    r = A.shape[0]
    if B.shape[1] != r:
        raise ShapeError(f"{target}: rank mismatch, A has {r} rows but B has {B.shape[1]} columns")
    if r > min(B.shape[0], A.shape[1]):
        raise ShapeError(f"{target}: rank {r} exceeds min(d, k) of {B.shape[0]}x{A.shape[1]}")
    if not (isinstance(alpha, (int, float)) and np.isfinite(alpha) and alpha > 0):
        raise InputError(f"{target}: alpha must be a positive number, got {alpha!r}")
    return AdapterPair(target, A, B, float(alpha))


class Dense(NamedTuple):
    target: TENSOR_PATH
    matrix: Matrix


class LowRank(NamedTuple):
    pair: AdapterPair

    @property
    def target(self) -> TENSOR_PATH:
        return self.pair.target


type DeltaSource = Dense | LowRank


def materialize_delta(src: DeltaSource, shape: tuple[int, ...] | None = None) -> Matrix:
    """
    The dense update for `src`. When `shape` is given the result must match it,
    which is how callers check an update against its base weight.
    """
    match src:
        case Dense(target, matrix):
            delta = matrix
        case LowRank(pair):
            if pair.B.shape[1] != pair.A.shape[0]:
                raise ShapeError(f"{pair.target}: B {pair.B.shape} and A {pair.A.shape} do not chain")
            delta = pair.scale * (pair.B @ pair.A)
            target = pair.target
        case _:
            raise TypeError(f"not a delta source: {src!r}")
    if shape is not None and delta.shape != tuple(shape):
        raise ShapeError(f"{target}: update shape {delta.shape} does not match base {tuple(shape)}")
    return delta


def deltas_from_adapters(pairs: list[AdapterPair]) -> dict[TENSOR_PATH, DeltaSource]:
    deltas: dict[TENSOR_PATH, DeltaSource] = {}
    for pair in pairs:
        if pair.target in deltas:
            raise AdapterError(f"{pair.target}: more than one adapter targets this tensor")
        deltas[pair.target] = LowRank(pair)
    return deltas


class CheckpointDiff(NamedTuple):
    deltas: dict[TENSOR_PATH, DeltaSource]
    only_base: list[TENSOR_PATH]
    only_tuned: list[TENSOR_PATH]


def diff_checkpoints(base: TensorMap, tuned: TensorMap) -> CheckpointDiff:
    "Dense(tuned - base) for every shared path; unshared paths are reported"
    deltas: dict[TENSOR_PATH, DeltaSource] = {}
    for path in base:
        if path not in tuned:
            continue
        if base[path].shape != tuned[path].shape:
            raise ShapeError(f"{path}: base shape {base[path].shape} != tuned shape {tuned[path].shape}")
        deltas[path] = Dense(path, tuned[path] - base[path])

    only_base = [path for path in base if path not in tuned]
    only_tuned = [path for path in tuned if path not in base]
    if only_base:
        logger.warning(f"{len(only_base)} tensors only in base, not diffed: {only_base[:5]}")
    if only_tuned:
        logger.warning(f"{len(only_tuned)} tensors only in tuned, not diffed: {only_tuned[:5]}")
    return CheckpointDiff(deltas, only_base, only_tuned)


def _locate_adapter(path: Path, convention: AdapterNamingConvention) -> tuple[Path, Path]:
    if path.is_dir():
        return path / convention.weights_name, path / convention.sidecar_name
    return path, path.parent / convention.sidecar_name


def load_sidecar(path: str | os.PathLike) -> dict[str, Any]:
    """
    Reads the adapter config JSON. "lora_alpha" is accepted in place of "alpha"
    since that is what PEFT writes.
    """
    path = Path(path)
    try:
        config = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as ex:
        raise AdapterError(f"{path}: adapter sidecar not found") from ex
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as ex:
        raise AdapterError(f"{path}: unreadable adapter sidecar: {ex}") from ex
    if not isinstance(config, dict):
        raise AdapterError(f"{path}: adapter sidecar must be a JSON object")

    alpha = config.get("alpha", config.get("lora_alpha"))
    if isinstance(alpha, bool) or not isinstance(alpha, (int, float)) or not alpha > 0:
        raise AdapterError(f"{path}: sidecar alpha must be a positive number, got {alpha!r}")
    r = config.get("r")
    if r is not None and (isinstance(r, bool) or not isinstance(r, int) or r < 1):
        raise AdapterError(f"{path}: sidecar r must be a positive integer, got {r!r}")
    modules = config.get("target_modules") or []
    if isinstance(modules, str):
        modules = [modules]
    return {"alpha": float(alpha), "r": r, "target_modules": list(modules)}


def load_adapters(
    path: str | os.PathLike, convention: AdapterNamingConvention = DEFAULT_CONVENTION
) -> list[AdapterPair]:
    """
    Pairs every A tensor with its B tensor and returns the pairs sorted by target.
    `path` is either the weights file or a directory holding it and the sidecar.
    """
    weights, sidecar_path = _locate_adapter(Path(path), convention)
    sidecar = load_sidecar(sidecar_path)
    tensors = load_tensor_map(weights)

    factors: dict[str, dict[str, Matrix]] = defaultdict(dict)
    for name, values in tensors.items():
        if name.endswith(convention.a_suffix):
            factors[name[: -len(convention.a_suffix)]]["A"] = values
        elif name.endswith(convention.b_suffix):
            factors[name[: -len(convention.b_suffix)]]["B"] = values
        else:
            logger.warning(f"{weights}: ignoring non-adapter tensor {name}")

    pairs = []
    for stem, found in sorted(factors.items()):
        if "A" not in found or "B" not in found:
            missing = "B" if "A" in found else "A"
            raise AdapterError(f"{weights}: adapter {stem!r} has no lora_{missing} tensor")
        try:
            pair = build_adapter_pair(convention.target_for(stem), found["A"], found["B"], sidecar["alpha"])
        except ShapeError as ex:
            raise AdapterError(f"{weights}: adapter {stem!r}: {ex}") from ex
        if sidecar["r"] is not None and pair.rank != sidecar["r"]:
            raise AdapterError(
                f"{weights}: adapter {stem!r} has rank {pair.rank} but the sidecar says r={sidecar['r']}"
            )
        module = stem.rsplit(".", 1)[-1]
        if sidecar["target_modules"] and module not in sidecar["target_modules"]:
            logger.warning(f"{weights}: {stem} is not among sidecar target_modules")
        pairs.append(pair)

    pairs.sort(key=lambda pair: pair.target)
    logger.info(f"loaded {len(pairs)} adapter pairs from {weights}")
    return pairs
