import json

import numpy as np
import pytest

from safetax import linalg
from safetax.errors import InputError, ScenarioError, TrainingDivergedError
from safetax.penalty import PenaltyConfig
from safetax.toy import (
    Dataset,
    ToyModel,
    ToyRunConfig,
    ToyScenario,
    check_run_config,
    check_scenario,
    compare_arms,
    evaluate_retention,
    gen_interference_tasks,
    load_scenario,
    loss_and_grads,
    report_json,
    run_scenario,
    scenario_from_dict,
    task_loss,
    train,
)

SMALL = ToyScenario(dims=(6, 8, 5), n_samples=40, run=ToyRunConfig(epochs=30, lr=0.05))


def test_tasks_are_deterministic():
    first = gen_interference_tasks(17, (5, 7, 4), 30)
    second = gen_interference_tasks(17, (5, 7, 4), 30)
    for a, b in zip(first, second):
        assert a.X.tobytes() == b.X.tobytes()
        assert a.Y.tobytes() == b.Y.tobytes()
    other = gen_interference_tasks(18, (5, 7, 4), 30)
    assert not np.array_equal(first[0].X, other[0].X)


def test_singleton_datasets():
    task_a, task_b = gen_interference_tasks(3, (5, 7, 4), 1)
    for data in (task_a, task_b):
        assert data.X.shape == (1, 5)
        assert data.Y.shape == (1, 4)
        assert data.n_samples == 1


def test_task_b_teacher_differs_by_rank_one():
    task_a, task_b = gen_interference_tasks(17, (32, 48, 32), 8)
    np.testing.assert_array_equal(task_a.teacher.W1, task_b.teacher.W1)
    diff = task_b.teacher.W2 - task_a.teacher.W2
    assert linalg.stable_rank(diff) == pytest.approx(1.0, abs=1e-9)
    assert linalg.spectral_norm(diff) == pytest.approx(1.0, rel=1e-9)
    assert task_loss(task_a.teacher, task_a) == 0.0


@pytest.mark.parametrize("dims, n", [((3, 4), 5), ((3, 0, 2), 5), ((3, 4, 2), 0), ((3.0, 4, 2), 5)])
def test_bad_task_shapes(dims, n):
    with pytest.raises(InputError):
        gen_interference_tasks(1, dims, n)


def test_gradients_match_finite_differences(rng):
    task_a, _ = gen_interference_tasks(5, (4, 6, 3), 12)
    model = ToyModel(rng.standard_normal((6, 4)), rng.standard_normal((3, 6)))
    _, grads = loss_and_grads(model, task_a)
    h = 1e-6
    for which in range(2):
        for idx in np.ndindex(model[which].shape):
            plus = [m.copy() for m in model]
            minus = [m.copy() for m in model]
            plus[which][idx] += h
            minus[which][idx] -= h
            fd = (task_loss(ToyModel(*plus), task_a) - task_loss(ToyModel(*minus), task_a)) / (2 * h)
            assert grads[which][idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)


@pytest.mark.parametrize("mode", ["full", "lora"])
def test_zero_epochs_is_a_no_op(mode):
    task_a, task_b = gen_interference_tasks(2, (5, 7, 4), 20)
    base = task_a.teacher
    result = train(base, task_b, ToyRunConfig(mode=mode, epochs=0))
    assert result.trace == []
    merged = result.merged(base)
    for before, after in zip(base, merged):
        assert after.tobytes() == before.tobytes()


@pytest.mark.parametrize("mode", ["full", "lora"])
def test_zero_learning_rate_is_a_no_op(mode):
    task_a, task_b = gen_interference_tasks(2, (5, 7, 4), 20)
    base = task_a.teacher
    result = train(base, task_b, ToyRunConfig(mode=mode, epochs=7, lr=0.0))
    assert len(result.trace) == 7
    for before, after in zip(base, result.merged(base)):
        np.testing.assert_array_equal(after, before)


@pytest.mark.parametrize("weight_decay", [0.0, 0.1])
def test_single_full_step_matches_hand_derivation(rng, weight_decay):
    W1 = rng.standard_normal((5, 3))
    W2 = rng.standard_normal((2, 5))
    x = rng.standard_normal(3)
    y = rng.standard_normal(2)
    data = Dataset(x[None, :], y[None, :], ToyModel(W1, W2))
    lr = 0.3

    h = np.tanh(W1 @ x)
    e = W2 @ h - y
    g2 = np.outer(e, h)
    g1 = np.outer((W2.T @ e) * (1 - h**2), x)
    expected = (W1 - lr * (g1 + weight_decay * W1), W2 - lr * (g2 + weight_decay * W2))

    cfg = ToyRunConfig(mode="full", epochs=1, lr=lr, weight_decay=weight_decay)
    result = train(ToyModel(W1, W2), data, cfg)
    np.testing.assert_allclose(result.model.W1, expected[0], atol=1e-10)
    np.testing.assert_allclose(result.model.W2, expected[1], atol=1e-10)
    assert result.trace == [pytest.approx(0.5 * e @ e, rel=1e-12)]


def test_divergence_reports_the_epoch():
    task_a, task_b = gen_interference_tasks(4, (5, 7, 4), 20)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDivergedError) as info:
            train(task_a.teacher, task_b, ToyRunConfig(mode="full", epochs=500, lr=1e6))
    assert 0 <= info.value.epoch < 500


def test_training_reduces_task_b_loss():
    run = run_scenario(SMALL)
    assert run.report.task_b_loss_after < run.report.task_b_loss_before
    assert len(run.result.trace) == 30
    assert run.report.config["constructed"] is True


def test_lora_adapters_have_the_configured_rank():
    run = run_scenario(SMALL._replace(run=SMALL.run._replace(r=2)))
    for pair in run.result.adapters.values():
        assert pair.rank == 2
    assert set(run.report.layers) == {"W1", "W2"}


def test_retention_of_the_base_itself():
    task_a, task_b = gen_interference_tasks(9, (5, 7, 4), 25)
    base = task_a.teacher
    report = evaluate_retention(base, base, (task_a, task_b))
    assert report.task_a_increase == 0.0
    assert all(layer.is_zero for layer in report.layers.values())
    assert report.mean_metric("m1") is None


def test_rank_one_adapter_update():
    run = run_scenario(SMALL._replace(run=SMALL.run._replace(r=1, epochs=5)))
    for layer in run.report.layers.values():
        assert layer.stable_rank == pytest.approx(1.0, abs=1e-9)


def test_report_json_is_deterministic():
    first = report_json(run_scenario(SMALL).report)
    assert report_json(run_scenario(SMALL).report) == first
    doc = json.loads(first)
    assert doc["config"]["seed"] == 17
    assert doc["config"]["dims"] == [6, 8, 5]
    assert set(doc["layers"]) == {"W1", "W2"}


def test_penalized_run_records_the_penalty():
    cfg = SMALL.run._replace(penalty=PenaltyConfig("both", 0.5), penalty_warmup=5)
    run = run_scenario(SMALL._replace(run=cfg))
    assert run.report.config["penalty"]["variant"] == "both"
    assert all(np.isfinite(run.result.trace))


def test_full_mode_penalty_runs():
    cfg = SMALL.run._replace(mode="full", penalty=PenaltyConfig("col"), penalty_warmup=2)
    run = run_scenario(SMALL._replace(run=cfg))
    assert run.result.model is not None
    assert len(run.result.trace) == 30


def test_arms_with_threads_match_serial():
    serial = compare_arms(SMALL)
    threaded = compare_arms(SMALL, threads=3)
    assert report_json(serial.to_dict()) == report_json(threaded.to_dict())


def test_rank_sweep_skips_oversized_ranks(caplog):
    comparison = compare_arms(SMALL, ranks=(1, 2, 64))
    assert sorted(comparison.rank_sweep) == [1, 2]
    assert "r=64" in caplog.text


def test_default_scenario_interference():
    comparison = compare_arms(ToyScenario())
    assert comparison.full.task_a_increase > comparison.lora.task_a_increase
    assert comparison.checks == {
        "full_forgets_more": True,
        "lora_rank_ceiling": True,
        "penalty_reduces_overlap": True,
    }
    for layer in comparison.lora.layers.values():
        assert layer.stable_rank <= 4 + 1e-6


@pytest.mark.parametrize(
    "cfg",
    [
        ToyRunConfig(mode="adapter"),
        ToyRunConfig(epochs=-1),
        ToyRunConfig(lr=float("nan")),
        ToyRunConfig(r=0),
        ToyRunConfig(alpha=0),
        ToyRunConfig(penalty=PenaltyConfig("row")),
        ToyRunConfig(track_retention=1),
    ],
)
def test_bad_run_configs(cfg):
    with pytest.raises(ScenarioError):
        check_run_config(cfg)


def test_load_scenario(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(
        json.dumps(
            {
                "seed": 3,
                "epochs": 5,
                "learning_rate": 0.01,
                "dims": [4, 6, 3],
                "r": 2,
                "n_samples": 10,
                "penalty": {"variant": "both", "beta": 0.5},
            }
        )
    )
    scenario = load_scenario(path)
    assert scenario.dims == (4, 6, 3)
    assert scenario.n_samples == 10
    assert scenario.run.lr == 0.01
    assert scenario.run.penalty == PenaltyConfig("both", 0.5)


@pytest.mark.parametrize(
    "doc, message",
    [
        ({"epoch": 5}, "unknown scenario keys: epoch"),
        ({"lr": 0.1, "learning_rate": 0.1}, "either lr or learning_rate"),
        ({"dims": [4, 6]}, "dims"),
        ({"dims": "4x6x3"}, "dims"),
        ({"penalty": {"kind": "both"}}, "penalty"),
        ({"mode": "partial"}, "mode"),
        ([1, 2, 3], "JSON object"),
        ({"dims": [4, 6, 3]}, r"r=4 exceeds min\(d, k\)=3"),
        ({"penalty": {"base_rank": "full"}}, "base_rank"),
    ],
)
def test_bad_scenarios(tmp_path, doc, message):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ScenarioError, match=message):
        load_scenario(path)


def test_missing_scenario(tmp_path):
    with pytest.raises(ScenarioError, match="not found"):
        load_scenario(tmp_path / "none.json")


def test_adapter_rank_must_fit_the_toy_matrices():
    tiny = ToyScenario(dims=(4, 6, 3), n_samples=5, run=ToyRunConfig(epochs=2))
    with pytest.raises(ScenarioError, match="r=4 exceeds"):
        run_scenario(tiny)
    with pytest.raises(ScenarioError, match="r=4 exceeds"):
        compare_arms(tiny._replace(run=tiny.run._replace(mode="full")))
    assert check_scenario(tiny._replace(run=tiny.run._replace(r=3))).run.r == 3
    assert run_scenario(tiny._replace(run=tiny.run._replace(mode="full"))).result.model is not None
    task_a, task_b = gen_interference_tasks(1, (4, 6, 3), 5)
    with pytest.raises(ScenarioError):
        train(task_a.teacher, task_b, ToyRunConfig(epochs=1))


def test_exact_base_rank_in_scenario():
    scenario = scenario_from_dict({"penalty": {"variant": "both", "base_rank": "exact"}})
    assert scenario.run.penalty == PenaltyConfig("both", base_rank=None)


@pytest.mark.parametrize("mode", ["full", "lora"])
def test_retention_history(mode):
    run = run_scenario(SMALL._replace(run=SMALL.run._replace(mode=mode, track_retention=True)))
    history = run.report.history
    assert [p.epoch for p in history] == list(range(30))
    assert history[-1].task_a_loss == pytest.approx(run.report.task_a_loss_after, rel=1e-12)
    assert history[-1].task_b_loss == pytest.approx(run.report.task_b_loss_after, rel=1e-12)
    doc = json.loads(report_json(run.report))
    assert doc["history"][0] == history[0]._asdict()
    assert doc["config"]["track_retention"] is True


def test_history_is_off_by_default():
    report = run_scenario(SMALL).report
    assert report.history is None
    assert json.loads(report_json(report))["history"] is None


def test_compare_arms_uses_top_t():
    comparison = compare_arms(SMALL._replace(run=SMALL.run._replace(epochs=5)), top_t=2)
    for report in (comparison.full, comparison.lora, comparison.lora_penalized):
        assert report.config["top_t"] == 2
        assert all(layer.top_t == 2 for layer in report.layers.values())
