import json

from pathlib import Path

import numpy as np

from safetax.container import TensorMap, save_tensor_map

GOLDEN = Path(__file__).parent / "golden"

ONE_LAYER = "model.layers.0.mlp.down_proj.weight"


def orthonormal(rng: np.random.Generator, n: int, t: int) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.standard_normal((n, t)))
    return Q


def random_shape(rng: np.random.Generator, low: int = 2, high: int = 64) -> tuple[int, int]:
    d = int(rng.integers(low, high + 1))
    k = int(rng.integers(low, min(high, 48) + 1))
    return d, k


def dense_metrics(W: np.ndarray, D: np.ndarray, t: int) -> tuple[float, float, float, float]:
    "the four ratios evaluated literally from a full SVD with dense projectors"
    U, _, Vt = np.linalg.svd(W)
    Ut = U[:, :t]
    Vt = Vt[:t].T
    fro = np.linalg.norm
    w, d = fro(W), fro(D)
    return (
        fro(W.T @ D) / (w * d),
        fro(Ut @ Ut.T @ D) / d,
        fro(W @ D.T) / (w * d),
        fro(Vt @ Vt.T @ D.T) / d,
    )


def write_checkpoint(path: Path, tensors: dict, flat=(), metadata=None) -> Path:
    save_tensor_map(TensorMap(tensors, metadata, flat), path, "fp64")
    return path


def write_adapter(
    directory: Path,
    factors: dict[str, tuple[np.ndarray, np.ndarray]],
    alpha: float,
    r: int | None = None,
    target_modules=None,
    prefix: str = "base_model.model.",
) -> Path:
    """
    PEFT-style adapter directory. `factors` maps a stem such as
    "model.layers.0.mlp.down_proj" to its (A, B) factors.
    """
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for stem, (A, B) in factors.items():
        tensors[f"{prefix}{stem}.lora_A.weight"] = A
        tensors[f"{prefix}{stem}.lora_B.weight"] = B
    write_checkpoint(directory / "adapter_model.safetensors", tensors)
    sidecar = {"lora_alpha": alpha}
    if r is not None:
        sidecar["r"] = r
    if target_modules is not None:
        sidecar["target_modules"] = target_modules
    (directory / "adapter_config.json").write_text(json.dumps(sidecar))
    return directory


def write_jsonl(path: Path, records: list[dict]) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path
