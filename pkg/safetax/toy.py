"""
A desk-scale interference experiment.

Task A is regression onto a random two-layer tanh network (the "reasoning"
model), which also serves as the base. Task B's target network differs from
task A's by a rank-1 change in the output layer (the "safety" skill). Fine-tuning
the base on task B then costs task-A loss; the harness measures how much under
full fine-tuning, LoRA and LoRA with an orthogonality penalty.

Every constant in a scenario is this harness's own construction, and reports
say so in their config echo.
"""

import json
import logging
import math
import os

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from . import linalg
from .analysis import DEFAULT_TOP_T, METRIC_FIELDS, LayerReport, analyze_layer
from .checkpoint import (
    DEFAULT_ALPHA,
    DEFAULT_RANK,
    AdapterPair,
    Dense,
    LowRank,
    build_adapter_pair,
)
from .errors import InputError, ScenarioError, TrainingDivergedError
from .linalg import Matrix
from .merge import merge_vanilla
from .penalty import (
    EXACT_BASE,
    PenaltyConfig,
    check_penalty_config,
    delta_penalty,
    penalty_grads,
    prepare_base,
)

logger = logging.getLogger(__name__)

DEFAULT_SEED = 17
DEFAULT_DIMS = (32, 48, 32)
DEFAULT_N_SAMPLES = 512
DEFAULT_EPOCHS = 200
RECIPE_LEARNING_RATE = 5e-5
LEARNING_RATE_SCALE = 100
DEFAULT_LEARNING_RATE = RECIPE_LEARNING_RATE * LEARNING_RATE_SCALE
DEFAULT_WEIGHT_DECAY = 1e-4
DEFAULT_PENALTY_WARMUP = 20

# size of the rank-1 change separating the task-B target from task A's
TASK_B_SIGMA = 1.0

TRAIN_MODES = ("full", "lora")
MATRIX_NAMES = ("W1", "W2")

RANK_CEILING_SLACK = 1e-6


class ToyModel(NamedTuple):
    """x -> W2 tanh(W1 x), with W1 h x d_in and W2 d_out x h"""

    W1: Matrix
    W2: Matrix

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.W1.shape[1], self.W1.shape[0], self.W2.shape[0])

    def forward(self, X: Matrix) -> Matrix:
        return np.tanh(X @ self.W1.T) @ self.W2.T

    def matrices(self) -> dict[str, Matrix]:
        return dict(zip(MATRIX_NAMES, self))


class Dataset(NamedTuple):
    X: Matrix
    Y: Matrix
    teacher: ToyModel

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]


class ToyRunConfig(NamedTuple):
    seed: int = DEFAULT_SEED
    epochs: int = DEFAULT_EPOCHS
    lr: float = DEFAULT_LEARNING_RATE
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    mode: str = "lora"
    r: int = DEFAULT_RANK
    alpha: float = DEFAULT_ALPHA
    penalty: PenaltyConfig | None = None
    penalty_warmup: int = DEFAULT_PENALTY_WARMUP
    track_retention: bool = False


class RetentionPoint(NamedTuple):
    "task losses of the merged model after a given epoch's update"

    epoch: int
    task_a_loss: float
    task_b_loss: float


class ToyScenario(NamedTuple):
    dims: tuple[int, int, int] = DEFAULT_DIMS
    n_samples: int = DEFAULT_N_SAMPLES
    run: ToyRunConfig = ToyRunConfig()


class TrainResult(NamedTuple):
    """
    The trained artifact: a new model in full mode, adapter pairs keyed by
    matrix name in lora mode. trace holds the objective of every epoch;
    history, when retention was tracked, the task losses after every epoch.
    """

    model: ToyModel | None
    adapters: dict[str, AdapterPair] | None
    trace: list[float]
    config: ToyRunConfig
    history: list[RetentionPoint] | None = None

    def merged(self, base: ToyModel) -> ToyModel:
        if self.model is not None:
            return self.model
        assert self.adapters is not None
        W = base.matrices()
        return ToyModel(*(merge_vanilla(W[name], LowRank(self.adapters[name])) for name in MATRIX_NAMES))


class RetentionReport(NamedTuple):
    task_a_loss_before: float
    task_a_loss_after: float
    task_b_loss_before: float
    task_b_loss_after: float
    layers: dict[str, LayerReport]
    trace: list[float]
    config: dict[str, Any]
    history: list[RetentionPoint] | None = None

    @property
    def task_a_increase(self) -> float:
        return self.task_a_loss_after - self.task_a_loss_before

    def mean_metric(self, field: str) -> float | None:
        "mean of an alignment metric over the updated matrices"
        values = [getattr(r.metrics, field) for r in self.layers.values() if r.metrics]
        return float(np.mean(values)) if values else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_a": {
                "loss_before": self.task_a_loss_before,
                "loss_after": self.task_a_loss_after,
                "increase": self.task_a_increase,
            },
            "task_b": {
                "loss_before": self.task_b_loss_before,
                "loss_after": self.task_b_loss_after,
            },
            "layers": {
                name: {
                    "stable_rank": r.stable_rank,
                    **(r.metrics._asdict() if r.metrics else dict.fromkeys(METRIC_FIELDS)),
                    "base_fro_norm": r.base_fro_norm,
                    "delta_fro_norm": r.delta_fro_norm,
                    "top_t": r.top_t,
                }
                for name, r in self.layers.items()
            },
            "mean_metrics": {field: self.mean_metric(field) for field in METRIC_FIELDS},
            "trace": self.trace,
            "history": [p._asdict() for p in self.history] if self.history is not None else None,
            "config": self.config,
        }


def report_json(report: RetentionReport | dict[str, Any]) -> bytes:
    doc = report.to_dict() if isinstance(report, RetentionReport) else report
    return (json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n").encode("utf-8")


def _check_dims(dims, n_samples: int) -> tuple[int, int, int]:
    dims = tuple(dims)
    if len(dims) != 3 or not all(isinstance(d, int) and not isinstance(d, bool) and d >= 1 for d in dims):
        raise InputError(f"dims must be three positive integers (d_in, h, d_out), got {dims!r}")
    if isinstance(n_samples, bool) or not isinstance(n_samples, int) or n_samples < 1:
        raise InputError(f"n_samples must be a positive integer, got {n_samples!r}")
    return dims  # type: ignore[return-value]


def gen_interference_tasks(
    seed: int = DEFAULT_SEED, dims=DEFAULT_DIMS, n_samples: int = DEFAULT_N_SAMPLES
) -> tuple[Dataset, Dataset]:
    """
    Task A regresses onto a random full-rank teacher with W ~ N(0, 1/fan_in).
    Task B's teacher is task A's with W2 + sigma u v^T for random unit u, v.
    Both input sets are drawn independently from N(0, I).
    """
    d_in, h, d_out = _check_dims(dims, n_samples)
    rng = np.random.default_rng(seed)
    W1 = rng.standard_normal((h, d_in)) / math.sqrt(d_in)
    W2 = rng.standard_normal((d_out, h)) / math.sqrt(h)
    u = rng.standard_normal(d_out)
    v = rng.standard_normal(h)
    u /= np.linalg.norm(u)
    v /= np.linalg.norm(v)

    teacher_a = ToyModel(W1, W2)
    teacher_b = ToyModel(W1.copy(), W2 + TASK_B_SIGMA * np.outer(u, v))
    X_a = rng.standard_normal((n_samples, d_in))
    X_b = rng.standard_normal((n_samples, d_in))
    return (
        Dataset(X_a, teacher_a.forward(X_a), teacher_a),
        Dataset(X_b, teacher_b.forward(X_b), teacher_b),
    )


def task_loss(model: ToyModel, data: Dataset) -> float:
    "(1 / 2n) sum_i |f(x_i) - y_i|^2"
    E = model.forward(data.X) - data.Y
    return 0.5 * float(np.sum(E * E)) / data.n_samples


def loss_and_grads(model: ToyModel, data: Dataset) -> tuple[float, list[Matrix]]:
    "task loss and its gradients with respect to W1 and W2"
    H = np.tanh(data.X @ model.W1.T)
    E = H @ model.W2.T - data.Y
    n = data.n_samples
    R = E / n
    gW2 = R.T @ H
    dZ = (R @ model.W2) * (1.0 - H * H)
    gW1 = dZ.T @ data.X
    return 0.5 * float(np.sum(E * E)) / n, [gW1, gW2]


def check_run_config(cfg: ToyRunConfig) -> ToyRunConfig:
    def is_int(value, low):
        return isinstance(value, int) and not isinstance(value, bool) and value >= low

    def is_num(value, low):
        return (
            isinstance(value, (int, float))
            and not isinstance(value, bool)
            and math.isfinite(value)
            and value >= low
        )

    if cfg.mode not in TRAIN_MODES:
        raise ScenarioError(f"mode must be full or lora, got {cfg.mode!r}")
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ScenarioError(f"seed must be an integer, got {cfg.seed!r}")
    if not is_int(cfg.epochs, 0):
        raise ScenarioError(f"epochs must be a nonnegative integer, got {cfg.epochs!r}")
    if not is_num(cfg.lr, 0):
        raise ScenarioError(f"lr must be a nonnegative number, got {cfg.lr!r}")
    if not is_num(cfg.weight_decay, 0):
        raise ScenarioError(f"weight_decay must be a nonnegative number, got {cfg.weight_decay!r}")
    if not is_int(cfg.r, 1):
        raise ScenarioError(f"r must be a positive integer, got {cfg.r!r}")
    if not is_num(cfg.alpha, 0) or cfg.alpha == 0:
        raise ScenarioError(f"alpha must be a positive number, got {cfg.alpha!r}")
    if not is_int(cfg.penalty_warmup, 0):
        raise ScenarioError(f"penalty_warmup must be a nonnegative integer, got {cfg.penalty_warmup!r}")
    if not isinstance(cfg.track_retention, bool):
        raise ScenarioError(f"track_retention must be true or false, got {cfg.track_retention!r}")
    if cfg.penalty is not None:
        try:
            check_penalty_config(cfg.penalty)
        except InputError as ex:
            raise ScenarioError(f"penalty: {ex}") from ex
    return cfg


def max_adapter_rank(dims) -> int:
    "largest r that fits both toy matrices, W1 (h x d_in) and W2 (d_out x h)"
    return min(dims)


def check_scenario(scenario: ToyScenario, lora: bool | None = None) -> ToyScenario:
    """
    Run config checks plus the ones that depend on dims. `lora` forces the
    rank check on (compare_arms always trains adapters); by default it applies
    in lora mode only.
    """
    run = check_run_config(scenario.run)
    try:
        dims = _check_dims(scenario.dims, scenario.n_samples)
    except InputError as ex:
        raise ScenarioError(str(ex)) from ex
    if lora is None:
        lora = run.mode == "lora"
    if lora and run.r > max_adapter_rank(dims):
        raise ScenarioError(
            f"r={run.r} exceeds min(d, k)={max_adapter_rank(dims)} of the toy matrices for dims {list(dims)}"
        )
    return scenario._replace(dims=dims, run=run)


def _check_finite(epoch: int, objective: float, matrices: list[Matrix]) -> None:
    if not math.isfinite(objective) or not all(np.all(np.isfinite(m)) for m in matrices):
        raise TrainingDivergedError(epoch, objective)


def _penalized(cfg: ToyRunConfig, epoch: int) -> bool:
    return cfg.penalty is not None and epoch >= cfg.penalty_warmup


def _retention_point(epoch: int, model: ToyModel, monitor: tuple[Dataset, Dataset]) -> RetentionPoint:
    return RetentionPoint(epoch, task_loss(model, monitor[0]), task_loss(model, monitor[1]))


def _train_full(
    model: ToyModel, data: Dataset, cfg: ToyRunConfig, monitor: tuple[Dataset, Dataset] | None
) -> TrainResult:
    base = list(model)
    W = [m.copy() for m in model]
    targets = [prepare_base(m, cfg.penalty) for m in base] if cfg.penalty else []
    trace = []
    history = [] if monitor else None
    for epoch in range(cfg.epochs):
        objective, grads = loss_and_grads(ToyModel(*W), data)
        if _penalized(cfg, epoch):
            for i, target in enumerate(targets):
                D = W[i] - base[i]
                if linalg.frobenius_norm(D) > cfg.penalty.eps:
                    value, grad = delta_penalty(target, D, cfg.penalty)
                    objective += value
                    grads[i] = grads[i] + grad
        _check_finite(epoch, objective, W)
        trace.append(objective)
        W = [w - cfg.lr * (g + cfg.weight_decay * w) for w, g in zip(W, grads)]
        _check_finite(epoch, objective, W)
        if history is not None:
            history.append(_retention_point(epoch, ToyModel(*W), monitor))
    return TrainResult(ToyModel(*W), None, trace, cfg, history)


def init_adapters(model: ToyModel, cfg: ToyRunConfig) -> list[AdapterPair]:
    "B = 0 and A ~ U(-1/sqrt(k), 1/sqrt(k)), so the merged model starts as the base"
    rng = np.random.default_rng(cfg.seed)
    pairs = []
    for name, W in model.matrices().items():
        d, k = W.shape
        bound = 1.0 / math.sqrt(k)
        A = rng.uniform(-bound, bound, size=(cfg.r, k))
        pairs.append(build_adapter_pair(name, A, np.zeros((d, cfg.r)), cfg.alpha))
    return pairs


def _train_lora(
    model: ToyModel, data: Dataset, cfg: ToyRunConfig, monitor: tuple[Dataset, Dataset] | None
) -> TrainResult:
    base = list(model)
    pairs = init_adapters(model, cfg)
    s = pairs[0].scale
    B = [p.B.copy() for p in pairs]
    A = [p.A.copy() for p in pairs]
    targets = [prepare_base(m, cfg.penalty) for m in base] if cfg.penalty else []
    trace = []
    history = [] if monitor else None
    for epoch in range(cfg.epochs):
        deltas = [s * (b @ a) for b, a in zip(B, A)]
        merged = ToyModel(*(w + d for w, d in zip(base, deltas)))
        objective, grads = loss_and_grads(merged, data)
        grad_B = [s * (g @ a.T) for g, a in zip(grads, A)]
        grad_A = [s * (b.T @ g) for g, b in zip(grads, B)]
        if _penalized(cfg, epoch):
            for i, target in enumerate(targets):
                if linalg.frobenius_norm(deltas[i]) > cfg.penalty.eps:
                    pair = AdapterPair(MATRIX_NAMES[i], A[i], B[i], cfg.alpha)
                    value, pen_B, pen_A = penalty_grads(target, pair, cfg.penalty)
                    objective += value
                    grad_B[i] = grad_B[i] + pen_B
                    grad_A[i] = grad_A[i] + pen_A
        _check_finite(epoch, objective, B + A)
        trace.append(objective)
        B = [b - cfg.lr * (g + cfg.weight_decay * b) for b, g in zip(B, grad_B)]
        A = [a - cfg.lr * (g + cfg.weight_decay * a) for a, g in zip(A, grad_A)]
        _check_finite(epoch, objective, B + A)
        if history is not None:
            merged = ToyModel(*(w + s * (b @ a) for w, b, a in zip(base, B, A)))
            history.append(_retention_point(epoch, merged, monitor))

    adapters = {
        name: build_adapter_pair(name, a, b, cfg.alpha) for name, a, b in zip(MATRIX_NAMES, A, B)
    }
    return TrainResult(None, adapters, trace, cfg, history)


def train(
    model: ToyModel,
    data: Dataset,
    cfg: ToyRunConfig = ToyRunConfig(),
    monitor: tuple[Dataset, Dataset] | None = None,
) -> TrainResult:
    """
    Full-batch gradient descent with weight decay on `data`, one step per epoch.
    In full mode W1 and W2 are trained; in lora mode the base is frozen and an
    adapter pair per matrix is trained instead. With a penalty configured, the
    penalty is added to the objective from epoch penalty_warmup on.

    With `monitor` (task A, task B) the task losses of the merged model are
    recorded after every epoch's update.
    """
    cfg = check_run_config(cfg)
    if data.X.shape[1] != model.dims[0] or data.Y.shape[1] != model.dims[2]:
        raise InputError(f"dataset shapes {data.X.shape}/{data.Y.shape} do not fit model dims {model.dims}")
    if cfg.mode == "lora" and cfg.r > max_adapter_rank(model.dims):
        raise ScenarioError(f"r={cfg.r} exceeds min(d, k)={max_adapter_rank(model.dims)} of the toy matrices")
    logger.info(f"training {cfg.mode} for {cfg.epochs} epochs, lr={cfg.lr}")
    match cfg.mode:
        case "full":
            result = _train_full(model, data, cfg, monitor)
        case "lora":
            result = _train_lora(model, data, cfg, monitor)
    if result.trace:
        logger.info(f"{cfg.mode}: objective {result.trace[0]:.6g} -> {result.trace[-1]:.6g}")
    return result


def config_echo(cfg: ToyRunConfig, dims, n_samples: int | None, top_t: int) -> dict[str, Any]:
    return {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "learning_rate": cfg.lr,
        "recipe_learning_rate": RECIPE_LEARNING_RATE,
        "weight_decay": cfg.weight_decay,
        "mode": cfg.mode,
        "r": cfg.r,
        "alpha": cfg.alpha,
        "penalty": cfg.penalty._asdict() if cfg.penalty else None,
        "penalty_warmup": cfg.penalty_warmup,
        "track_retention": cfg.track_retention,
        "dims": list(dims),
        "n_samples": n_samples,
        "top_t": top_t,
        "constructed": True,
    }


def evaluate_retention(
    base: ToyModel,
    result: TrainResult | ToyModel,
    datasets: tuple[Dataset, Dataset],
    top_t: int = DEFAULT_TOP_T,
) -> RetentionReport:
    """
    Losses on both tasks before and after training, plus stable rank and
    alignment metrics of each matrix's update against the base. Adapters are
    merged vanilla-style first.
    """
    data_a, data_b = datasets
    if isinstance(result, ToyModel):
        result = TrainResult(result, None, [], ToyRunConfig(mode="full", epochs=0))
    merged = result.merged(base)

    layers = {}
    for name, W in base.matrices().items():
        if result.adapters is not None:
            delta = LowRank(result.adapters[name])
        else:
            delta = Dense(name, merged.matrices()[name] - W)
        layers[name] = analyze_layer(name, W, delta, top_t)

    return RetentionReport(
        task_a_loss_before=task_loss(base, data_a),
        task_a_loss_after=task_loss(merged, data_a),
        task_b_loss_before=task_loss(base, data_b),
        task_b_loss_after=task_loss(merged, data_b),
        layers=layers,
        trace=list(result.trace),
        config=config_echo(result.config, base.dims, data_a.n_samples, min(top_t, *base.dims)),
        history=list(result.history) if result.history is not None else None,
    )


class ScenarioRun(NamedTuple):
    base: ToyModel
    datasets: tuple[Dataset, Dataset]
    result: TrainResult
    report: RetentionReport


def run_scenario(scenario: ToyScenario = ToyScenario(), top_t: int = DEFAULT_TOP_T) -> ScenarioRun:
    "generate both tasks, fine-tune the task-A teacher on task B, evaluate retention"
    scenario = check_scenario(scenario)
    run = scenario.run
    datasets = gen_interference_tasks(run.seed, scenario.dims, scenario.n_samples)
    teacher = datasets[0].teacher
    base = ToyModel(teacher.W1.copy(), teacher.W2.copy())
    result = train(base, datasets[1], run, datasets if run.track_retention else None)
    report = evaluate_retention(base, result, datasets, top_t)
    return ScenarioRun(base, datasets, result, report)


class ArmComparison(NamedTuple):
    full: RetentionReport
    lora: RetentionReport
    lora_penalized: RetentionReport
    rank_sweep: dict[int, RetentionReport]
    checks: dict[str, bool]

    def to_dict(self) -> dict[str, Any]:
        return {
            "full": self.full.to_dict(),
            "lora": self.lora.to_dict(),
            "lora_penalized": self.lora_penalized.to_dict(),
            "rank_sweep": {str(r): report.to_dict() for r, report in self.rank_sweep.items()},
            "checks": self.checks,
        }


def compare_arms(
    scenario: ToyScenario = ToyScenario(), ranks=(), threads: int = 1, top_t: int = DEFAULT_TOP_T
) -> ArmComparison:
    """
    Runs the full, lora and penalized lora arms on one scenario and compares them:

    - full_forgets_more: full fine-tuning raises task-A loss more than lora
    - lora_rank_ceiling: every lora update has stable rank <= r
    - penalty_reduces_overlap: the penalized arm's mean m1 and m3 are no larger

    `ranks` adds a lora arm per rank; ranks above a toy matrix's min(d, k) are skipped.
    """
    scenario = check_scenario(scenario, lora=True)
    run = scenario.run
    penalty = run.penalty or PenaltyConfig(variant="both", beta=1.0)
    arms = {
        "full": run._replace(mode="full", penalty=None),
        "lora": run._replace(mode="lora", penalty=None),
        "lora_penalized": run._replace(mode="lora", penalty=penalty),
    }
    max_rank = max_adapter_rank(scenario.dims)
    for r in ranks:
        if r > max_rank:
            logger.warning(f"rank sweep: r={r} exceeds min(d, k)={max_rank}, skipped")
            continue
        arms[f"rank_{r}"] = run._replace(mode="lora", penalty=None, r=r)

    def go(cfg: ToyRunConfig) -> RetentionReport:
        return run_scenario(scenario._replace(run=cfg), top_t).report

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = dict(zip(arms, pool.map(go, arms.values())))
    else:
        reports = {name: go(cfg) for name, cfg in arms.items()}

    full, lora, penalized = reports["full"], reports["lora"], reports["lora_penalized"]
    checks = {
        "full_forgets_more": full.task_a_increase > lora.task_a_increase,
        "lora_rank_ceiling": all(
            r.stable_rank is None or r.stable_rank <= run.r + RANK_CEILING_SLACK
            for r in lora.layers.values()
        ),
        "penalty_reduces_overlap": all(
            (penalized.mean_metric(f) or 0.0) <= (lora.mean_metric(f) or 0.0) for f in ("m1", "m3")
        ),
    }
    for name, ok in checks.items():
        logger.info(f"{name}: {'yes' if ok else 'no'}")
    rank_sweep = {
        int(name.removeprefix("rank_")): report
        for name, report in reports.items()
        if name.startswith("rank_")
    }
    return ArmComparison(full, lora, penalized, rank_sweep, checks)


SCENARIO_KEYS = {
    "seed",
    "epochs",
    "lr",
    "learning_rate",
    "weight_decay",
    "mode",
    "r",
    "alpha",
    "penalty",
    "penalty_warmup",
    "track_retention",
    "dims",
    "n_samples",
}


def scenario_from_dict(doc: Any) -> ToyScenario:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    unknown = sorted(set(doc) - SCENARIO_KEYS)
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {', '.join(unknown)}")
    if "lr" in doc and "learning_rate" in doc:
        raise ScenarioError("give either lr or learning_rate, not both")

    penalty = doc.get("penalty")
    if penalty is not None:
        if not isinstance(penalty, dict) or not set(penalty) <= set(PenaltyConfig._fields):
            raise ScenarioError(f"penalty must be an object with keys {PenaltyConfig._fields}")
        if penalty.get("base_rank") == EXACT_BASE:
            penalty = {**penalty, "base_rank": None}
        penalty = PenaltyConfig(**penalty)

    defaults = ToyRunConfig()
    run = ToyRunConfig(
        seed=doc.get("seed", defaults.seed),
        epochs=doc.get("epochs", defaults.epochs),
        lr=doc.get("lr", doc.get("learning_rate", defaults.lr)),
        weight_decay=doc.get("weight_decay", defaults.weight_decay),
        mode=doc.get("mode", defaults.mode),
        r=doc.get("r", defaults.r),
        alpha=doc.get("alpha", defaults.alpha),
        penalty=penalty,
        penalty_warmup=doc.get("penalty_warmup", defaults.penalty_warmup),
        track_retention=doc.get("track_retention", defaults.track_retention),
    )
    dims = doc.get("dims", list(DEFAULT_DIMS))
    if not isinstance(dims, list):
        raise ScenarioError(f"dims must be a list of three integers, got {dims!r}")
    n_samples = doc.get("n_samples", DEFAULT_N_SAMPLES)
    return check_scenario(ToyScenario(tuple(dims), n_samples, run))


def load_scenario(path: str | os.PathLike) -> ToyScenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as ex:
        raise ScenarioError(f"{path}: scenario file not found") from ex
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as ex:
        raise ScenarioError(f"{path}: unreadable scenario: {ex}") from ex
    try:
        return scenario_from_dict(doc)
    except ScenarioError as ex:
        raise ScenarioError(f"{path}: {ex}") from ex
