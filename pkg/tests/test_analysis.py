import json
import random

import numpy as np
import pytest

from safetax.analysis import (
    AggregateReport,
    AlignmentMetrics,
    LayerReport,
    aggregate_reports,
    alignment_metrics,
    analyze_checkpoint,
    analyze_layer,
    emit_report,
    parse_layer_index,
    parse_module_type,
)
from safetax.checkpoint import Dense, LowRank, build_adapter_pair
from safetax.container import TensorMap
from safetax.errors import DegenerateNormError, InputError, ShapeError

from .helpers import GOLDEN, ONE_LAYER, dense_metrics, orthonormal, random_shape


def report(path, m1, stable_rank=2.0, module_type=None, zero=False):
    metrics = None if zero else AlignmentMetrics(m1, 0.5, 0.25, 1.0)
    return LayerReport(
        path=path,
        layer_index=parse_layer_index(path),
        module_type=module_type or parse_module_type(path),
        d=4,
        k=4,
        stable_rank=None if zero else stable_rank,
        metrics=metrics,
        base_fro_norm=2.0,
        delta_fro_norm=0.0 if zero else 1.0,
        top_t=4,
    )


def one_layer_report():
    return analyze_layer(ONE_LAYER, 2 * np.eye(2), Dense(ONE_LAYER, np.array([[0.0, 1.0], [0.0, 0.0]])))


def test_identity_base_gives_inverse_sqrt_n(rng):
    m = alignment_metrics(np.eye(4), rng.standard_normal((4, 4)), 4)
    assert m.m1 == pytest.approx(0.5, abs=1e-12)
    assert m.m3 == pytest.approx(0.5, abs=1e-12)


def test_orthogonal_columns():
    m = alignment_metrics(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]), 1)
    assert m.m1 == 0.0
    assert m.m2 == pytest.approx(0.0, abs=1e-15)
    # one column means a one-dimensional row space, shared by any update
    assert m.m3 == pytest.approx(1.0)
    assert m.m4 == pytest.approx(1.0)


def test_orthogonal_rows():
    m = alignment_metrics(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), 1)
    assert m.m3 == 0.0
    assert m.m4 == pytest.approx(0.0, abs=1e-15)
    assert m.m1 == pytest.approx(1.0)


def test_update_inside_top_subspace(rng):
    W = rng.standard_normal((40, 30))
    U = np.linalg.svd(W)[0][:, :16]
    m = alignment_metrics(W, U @ rng.standard_normal((16, 30)), 16)
    assert m.m2 == pytest.approx(1.0, abs=1e-9)


def test_random_24x20_matches_dense_formulas(rng):
    W = rng.standard_normal((24, 20))
    D = rng.standard_normal((24, 20))
    np.testing.assert_allclose(alignment_metrics(W, D, 4), dense_metrics(W, D, 4), atol=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_metrics_oracle(seed):
    rng = np.random.default_rng(1000 + seed)
    d, k = random_shape(rng)
    t = int(rng.integers(1, min(d, k) + 1))
    W = rng.standard_normal((d, k))
    D = rng.standard_normal((d, k))
    m = alignment_metrics(W, D, t)
    np.testing.assert_allclose(m, dense_metrics(W, D, t), atol=1e-9)
    assert all(0.0 <= v <= 1.0 + 1e-12 for v in m)

    scaled = alignment_metrics(-3.0 * W, 0.01 * D, t)
    np.testing.assert_allclose(scaled, m, atol=1e-10)

    flipped = alignment_metrics(W.T, D.T, t)
    np.testing.assert_allclose(flipped, (m.m3, m.m4, m.m1, m.m2), atol=1e-9)


def test_top_subspace_share_grows_with_t(rng):
    W = rng.standard_normal((15, 15))
    D = rng.standard_normal((15, 15))
    shares = [alignment_metrics(W, D, t).m2 for t in range(1, 16)]
    assert all(a <= b + 1e-12 for a, b in zip(shares, shares[1:]))
    assert shares[-1] == pytest.approx(1.0, abs=1e-9)


def test_precomputed_svd_is_reused(rng):
    from safetax.linalg import truncated_svd

    W = rng.standard_normal((10, 8))
    D = rng.standard_normal((10, 8))
    assert alignment_metrics(W, D, 3, svd=truncated_svd(W, 5)) == pytest.approx(
        alignment_metrics(W, D, 3), abs=1e-12
    )


def test_metric_errors():
    with pytest.raises(ShapeError):
        alignment_metrics(np.eye(3), np.eye(2))
    with pytest.raises(DegenerateNormError):
        alignment_metrics(np.eye(3), np.zeros((3, 3)), 2)
    with pytest.raises(DegenerateNormError):
        alignment_metrics(np.zeros((3, 3)), np.eye(3), 2)
    with pytest.raises(InputError):
        alignment_metrics(np.eye(3), np.eye(3), 0)
    with pytest.raises(InputError):
        alignment_metrics(np.eye(3), np.eye(3), 4)


def test_zero_update_is_flagged():
    W = np.eye(3)
    r = analyze_layer("model.layers.1.mlp.up_proj.weight", W, Dense("x", np.zeros((3, 3))), 2)
    assert r.is_zero
    assert r.stable_rank is None
    assert r.metrics is None
    assert r.delta_fro_norm == 0.0
    assert (r.layer_index, r.module_type, r.d, r.k) == (1, "up_proj", 3, 3)


def test_rank_one_adapter(rng):
    pair = build_adapter_pair("t", rng.standard_normal((1, 6)), rng.standard_normal((7, 1)), 16.0)
    r = analyze_layer("t", rng.standard_normal((7, 6)), LowRank(pair), 3)
    assert r.stable_rank == pytest.approx(1.0, abs=1e-9)


def test_stable_rank_from_known_spectrum(rng):
    D = orthonormal(rng, 9, 2) @ np.diag([10.0, 1.0]) @ orthonormal(rng, 5, 2).T
    r = analyze_layer("t", rng.standard_normal((9, 5)), Dense("t", D), 2)
    assert r.stable_rank == pytest.approx(1.01, abs=1e-9)


def test_top_t_is_clamped(caplog):
    r = one_layer_report()
    assert r.top_t == 2
    assert "clamped" in caplog.text


def test_update_shape_must_match_base():
    with pytest.raises(ShapeError):
        analyze_layer("t", np.eye(3), Dense("t", np.ones((3, 2))))


@pytest.mark.parametrize(
    "path, index, module",
    [
        ("model.layers.12.mlp.up_proj.weight", 12, "up_proj"),
        ("model.layers.0.self_attn.q_proj.weight", 0, "q_proj"),
        ("transformer.h.3.attn.c_attn.weight", 3, "other"),
        ("lm_head.weight", None, "other"),
        ("model.norm.weight", None, "other"),
    ],
)
def test_path_parsing(path, index, module):
    assert parse_layer_index(path) == index
    assert parse_module_type(path) == module


def test_analyze_checkpoint(rng):
    paths = [f"model.layers.{i}.self_attn.v_proj.weight" for i in range(6)]
    base = TensorMap(
        {
            **{p: rng.standard_normal((8, 6)) for p in paths},
            "model.embed_tokens.weight": rng.standard_normal((10, 8)),
            "model.norm.weight": np.ones((1, 8)),
        },
        flat=["model.norm.weight"],
    )
    deltas = {p: Dense(p, rng.standard_normal(base[p].shape)) for p in base}

    reports = analyze_checkpoint(base, deltas, top_t=3)
    assert [r.path for r in reports] == sorted(paths)
    assert analyze_checkpoint(base, deltas, top_t=3, threads=4) == reports

    with pytest.raises(InputError, match="missing from base"):
        analyze_checkpoint(base, {"nope.weight": Dense("nope.weight", np.eye(2))})


def test_mean_of_two_layers():
    agg = aggregate_reports(
        [report("model.layers.0.mlp.down_proj.weight", 0.2), report("model.layers.1.mlp.down_proj.weight", 0.4)]
    )
    assert agg.modules["down_proj"].metrics.m1 == pytest.approx(0.3, abs=1e-12)
    assert agg.modules["down_proj"].layers == 2


def test_singleton_aggregate():
    r = report("model.layers.0.mlp.down_proj.weight", 0.2, stable_rank=3.5)
    (agg,) = aggregate_reports([r]).modules.values()
    assert agg.metrics == r.metrics
    assert agg.stable_rank == 3.5


def test_six_report_fixture():
    reports = [
        report("model.layers.0.self_attn.q_proj.weight", 0.1, 1.0),
        report("model.layers.1.self_attn.q_proj.weight", 0.2, 2.0),
        report("model.layers.2.self_attn.q_proj.weight", 0.6, 6.0),
        report("model.layers.0.mlp.down_proj.weight", 0.5, 4.0),
        report("model.layers.1.mlp.down_proj.weight", 0.7, 8.0),
        report("model.layers.0.self_attn.v_proj.weight", 0.0, zero=True),
    ]
    random.Random(5).shuffle(reports)
    agg = aggregate_reports(reports).modules
    assert list(agg) == ["down_proj", "q_proj", "v_proj"]
    assert agg["q_proj"].metrics.m1 == pytest.approx(0.3, abs=1e-12)
    assert agg["q_proj"].stable_rank == pytest.approx(3.0, abs=1e-12)
    assert agg["down_proj"].metrics.m1 == pytest.approx(0.6, abs=1e-12)
    assert agg["down_proj"].stable_rank == pytest.approx(6.0, abs=1e-12)
    assert agg["v_proj"] == (1, 1, None, None)


def test_zero_layers_are_excluded_from_means():
    agg = aggregate_reports(
        [report("a.0.up_proj.weight", 0.4), report("a.1.up_proj.weight", 0.0, zero=True)]
    ).modules["up_proj"]
    assert (agg.layers, agg.zero_layers) == (2, 1)
    assert agg.metrics.m1 == pytest.approx(0.4)


def test_aggregate_of_nothing():
    with pytest.raises(InputError):
        aggregate_reports([])


def test_empty_csv_is_header_only():
    assert emit_report([], "csv") == (
        b"path,layer_index,module_type,d,k,stable_rank,m1,m2,m3,m4,base_fro_norm,delta_fro_norm\n"
    )
    assert json.loads(emit_report([], "json")) == {"aggregates": {}, "config": {"top_t": 16}, "layers": []}


def test_one_layer_golden_files():
    r = one_layer_report()
    assert emit_report([r], "csv") == (GOLDEN / "one_layer.csv").read_bytes()
    assert json.loads(emit_report([r], "json")) == json.loads((GOLDEN / "one_layer.json").read_text())


def test_emission_is_deterministic():
    reports = [report(f"model.layers.{i}.mlp.gate_proj.weight", i / 10) for i in range(5)]
    for fmt in ("csv", "json"):
        first = emit_report(reports, fmt)
        assert emit_report(reports, fmt) == first
        assert emit_report(list(reversed(reports)), fmt) == first


def test_zero_layer_has_empty_cells():
    csv = emit_report([report("x.weight", 0.0, zero=True)], "csv").decode()
    assert csv.splitlines()[1] == "x.weight,,other,4,4,,,,,,2,0"
    doc = json.loads(emit_report([report("x.weight", 0.0, zero=True)], "json"))
    assert doc["layers"][0]["m1"] is None
    assert doc["aggregates"]["other"]["stable_rank"] is None


def test_aggregate_report_emission():
    agg = aggregate_reports([report("model.layers.0.mlp.down_proj.weight", 0.25)])
    assert isinstance(agg, AggregateReport)
    assert emit_report(agg, "csv").decode().splitlines() == [
        "module_type,layers,zero_layers,stable_rank,m1,m2,m3,m4",
        "down_proj,1,0,2,0.25,0.5,0.25,1",
    ]
    doc = json.loads(emit_report(agg, "json", top_t=8))
    assert "layers" not in doc
    assert doc["config"] == {"top_t": 8}


def test_unknown_format():
    with pytest.raises(InputError):
        emit_report([], "xml")
