"""
Reader and writer for the safetensors container layout.

    8 bytes   little-endian u64 header length N
    N bytes   UTF-8 JSON header: {"__metadata__": {str: str}, name: {dtype, shape, data_offsets}}
    ...       raw little-endian payload, tensors packed back to back

Framing and the F64/F32/F16 tensors go through the safetensors package. numpy
has no bfloat16, so BF16 payloads are converted here by bit-shifting float32.
The header is checked here first so that errors name the file and tensor.
"""

import json
import logging
import math
import os

from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any

import numpy as np
import safetensors

from safetensors import SafetensorError, safe_open

from .errors import ContainerError, ShapeError
from .linalg import Matrix, as_matrix

logger = logging.getLogger(__name__)

type TENSOR_PATH = str

METADATA_KEY = "__metadata__"
MAX_HEADER_BYTES = 100 * 1024 * 1024

DTYPES = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "BF16": np.dtype("<u2"),
}

# dtype names safetensors.serialize expects
SERIALIZE_NAMES = {"F64": "float64", "F32": "float32", "F16": "float16", "BF16": "bfloat16"}

PRECISIONS = {"fp64": "F64", "fp32": "F32", "fp16": "F16", "bf16": "BF16"}


def check_name(name: Any) -> str:
    "raises ContainerError for names that cannot be stored in a header"
    if not isinstance(name, str) or not name:
        raise ContainerError(f"illegal tensor name {name!r}: must be a non-empty string")
    if name == METADATA_KEY:
        raise ContainerError(f"illegal tensor name {name!r}: reserved for metadata")
    if any(ord(c) < 0x20 or ord(c) == 0x7F for c in name):
        raise ContainerError(f"illegal tensor name {name!r}: contains control characters")
    try:
        name.encode("utf-8")
    except UnicodeEncodeError as ex:
        raise ContainerError(f"illegal tensor name {name!r}: not valid UTF-8") from ex
    return name


def _frozen(values: Matrix) -> Matrix:
    m = np.array(values, dtype=np.float64, copy=True)
    m.flags.writeable = False
    return m


class TensorMap(Mapping):
    """
    Immutable, path-sorted map of float64 matrices.

    `flat` names the tensors stored on disk as 1-D (biases, norms); they are held
    as 1 x n matrices. `dtypes` records the container dtype each tensor was read
    with so that an unchanged tensor can be written back the same way.
    """

    def __init__(
        self,
        tensors: Mapping[TENSOR_PATH, Any] | None = None,
        metadata: Mapping[str, str] | None = None,
        flat: Iterable[TENSOR_PATH] = (),
        dtypes: Mapping[TENSOR_PATH, str] | None = None,
    ):
        tensors = tensors or {}
        self._tensors: dict[TENSOR_PATH, Matrix] = {}
        for name in sorted(tensors, key=check_name):
            self._tensors[name] = _frozen(as_matrix(tensors[name], name))

        self.metadata = dict(metadata or {})
        for key, value in self.metadata.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise ContainerError(f"metadata entries must be strings: {key!r}={value!r}")

        self.flat = frozenset(name for name in flat if name in self._tensors)
        for name in self.flat:
            if self._tensors[name].shape[0] != 1:
                raise ShapeError(
                    f"{name}: flat tensor must be 1 x n, got {self._tensors[name].shape}"
                )

        dtypes = dtypes or {}
        self.dtypes = {name: dtypes.get(name, "F64") for name in self._tensors}
        for name, code in self.dtypes.items():
            if code not in DTYPES:
                raise ContainerError(f"{name}: unsupported dtype {code!r}")

    def __getitem__(self, key: TENSOR_PATH) -> Matrix:
        return self._tensors[key]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def __repr__(self):
        return f"TensorMap({len(self)} tensors)"

    def replace(
        self, updates: Mapping[TENSOR_PATH, Any], drop: Iterable[TENSOR_PATH] = ()
    ) -> "TensorMap":
        "a new map with `updates` swapped in and `drop` removed; dtypes are kept"
        drop = set(drop)
        tensors: dict[TENSOR_PATH, Any] = {
            name: value for name, value in self._tensors.items() if name not in drop
        }
        for name, value in updates.items():
            if name in tensors and np.shape(value) != tensors[name].shape:
                raise ShapeError(
                    f"{name}: replacement shape {np.shape(value)} != {tensors[name].shape}"
                )
            tensors[name] = value
        return TensorMap(tensors, self.metadata, self.flat, self.dtypes)


def _decode_bf16(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.uint32) << 16).view(np.float32).astype(np.float64)


def _encode_bf16(values: Matrix) -> np.ndarray:
    bits = values.astype(np.float32).view(np.uint32)
    # round to nearest, ties to even, on the upper 16 bits
    return ((bits + ((bits >> 16) & 1) + np.uint32(0x7FFF)) >> 16).astype("<u2")


def _tensor_view(name: TENSOR_PATH, values: Matrix, code: str, shape: list[int]) -> dict:
    "one tensor in the form safetensors.serialize takes"
    if code == "BF16":
        encoded = _encode_bf16(values)
        check = _decode_bf16(encoded)
    else:
        encoded = check = values.astype(DTYPES[code])
    if not np.all(np.isfinite(check)):
        raise ContainerError(f"{name}: values overflow {code}")
    return {"dtype": SERIALIZE_NAMES[code], "shape": shape, "data": encoded.tobytes()}


def _no_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    result: dict[str, Any] = {}
    for key, value in pairs:
        if key in result:
            raise ContainerError(f"duplicate name {key!r} in header")
        result[key] = value
    return result


def _read_header(raw: bytes, path: Path) -> tuple[dict[str, Any], int]:
    if len(raw) < 8:
        raise ContainerError(f"{path}: malformed header, file is only {len(raw)} bytes")
    n = int.from_bytes(raw[:8], "little")
    if n < 2 or n > MAX_HEADER_BYTES or 8 + n > len(raw):
        raise ContainerError(f"{path}: malformed header, bad header length {n}")
    try:
        header = json.loads(raw[8 : 8 + n].decode("utf-8"), object_pairs_hook=_no_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as ex:
        raise ContainerError(f"{path}: malformed header, {ex}") from ex
    if not isinstance(header, dict):
        raise ContainerError(f"{path}: malformed header, expected a JSON object")
    return header, 8 + n


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def _tensor_entry(name: str, info: Any, path: Path) -> tuple[str, list[int], int, int]:
    if not isinstance(info, dict):
        raise ContainerError(f"{path}: tensor {name!r} has a malformed header entry")
    code = info.get("dtype")
    shape = info.get("shape")
    offsets = info.get("data_offsets")
    if code not in DTYPES:
        raise ContainerError(f"{path}: tensor {name!r} has unsupported dtype {code!r}")
    if not isinstance(shape, list) or not all(_is_int(d) for d in shape):
        raise ContainerError(f"{path}: tensor {name!r} has a malformed shape {shape!r}")
    if len(shape) not in (1, 2):
        raise ContainerError(
            f"{path}: tensor {name!r} has {len(shape)} dimensions, only 1-D and 2-D are supported"
        )
    if 0 in shape:
        raise ContainerError(f"{path}: tensor {name!r} has an empty dimension {shape}")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(_is_int(o) for o in offsets)
        or offsets[0] > offsets[1]
    ):
        raise ContainerError(f"{path}: tensor {name!r} has malformed data_offsets {offsets!r}")
    begin, end = offsets
    if end - begin != math.prod(shape) * DTYPES[code].itemsize:
        raise ContainerError(
            f"{path}: tensor {name!r} byte length {end - begin} does not match {code}{shape}"
        )
    return code, shape, begin, end


def _check_layout(entries: dict[str, tuple[str, list[int], int, int]], size: int, path: Path):
    spans = sorted((begin, end, name) for name, (_, _, begin, end) in entries.items())
    position = 0
    for begin, end, name in spans:
        if end > size:
            raise ContainerError(
                f"{path}: truncated payload, tensor {name!r} ends at byte {end} of {size}"
            )
        if begin != position:
            raise ContainerError(f"{path}: tensor {name!r} data is not contiguous")
        position = end
    if position != size:
        raise ContainerError(f"{path}: {size - position} trailing bytes after payload")


def _library_tensors(path: Path, names: list[str]) -> dict[str, np.ndarray]:
    "F64/F32/F16 tensors decoded by safetensors, as float64"
    if not names:
        return {}
    try:
        with safe_open(path, framework="np") as f:
            return {name: f.get_tensor(name).astype(np.float64) for name in names}
    except SafetensorError as ex:
        raise ContainerError(f"{path}: {ex}") from ex


def load_tensor_map(path: str | os.PathLike) -> TensorMap:
    "reads a safetensors file; every tensor comes back as float64"
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as ex:
        raise ContainerError(f"{path}: {ex.strerror or ex}") from ex

    header, start = _read_header(raw, path)
    payload = memoryview(raw)[start:]

    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict):
        raise ContainerError(f"{path}: {METADATA_KEY} must be an object")

    entries = {name: _tensor_entry(name, info, path) for name, info in header.items()}
    _check_layout(entries, len(payload), path)

    decoded = _library_tensors(path, [n for n, entry in entries.items() if entry[0] != "BF16"])

    tensors: dict[str, np.ndarray] = {}
    flat: list[str] = []
    dtypes: dict[str, str] = {}
    for name, (code, shape, begin, end) in entries.items():
        if code == "BF16":
            values = _decode_bf16(np.frombuffer(payload[begin:end], dtype="<u2"))
        else:
            values = decoded[name]
        if not np.all(np.isfinite(values)):
            raise ContainerError(f"{path}: tensor {name!r} contains NaN or Inf")
        if len(shape) == 1:
            flat.append(name)
        tensors[name] = values.reshape(-1, shape[-1])
        dtypes[name] = code

    logger.debug(f"loaded {len(tensors)} tensors from {path}")
    return TensorMap(tensors, metadata, flat, dtypes)


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    "writes to a sibling temp file and renames it into place"
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def dump_tensor_map(tmap: TensorMap, precision: str | None = None) -> bytes:
    "the container bytes for `tmap`; precision None keeps each tensor's source dtype"
    if precision is not None and precision not in PRECISIONS:
        raise ContainerError(
            f"unsupported precision {precision!r}, choose from {', '.join(PRECISIONS)}"
        )

    views = {}
    for name, values in tmap.items():
        code = PRECISIONS[precision] if precision else tmap.dtypes[name]
        shape = [values.shape[1]] if name in tmap.flat else list(values.shape)
        views[name] = _tensor_view(name, values, code, shape)
    try:
        return safetensors.serialize(views, metadata=tmap.metadata or None)
    except SafetensorError as ex:
        raise ContainerError(f"cannot serialize tensors: {ex}") from ex


def save_tensor_map(
    tmap: TensorMap, path: str | os.PathLike, precision: str | None = "fp64"
) -> None:
    data = dump_tensor_map(tmap, precision)
    atomic_write(path, data)
    logger.debug(f"saved {len(tmap)} tensors to {path} ({len(data)} bytes)")
