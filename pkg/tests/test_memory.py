"""Memory model: closed-form footprints, the reference table, scaling fits,
and the measured-ledger cross-check against the closed form."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as hs

from domainpar import dense
from domainpar.errors import FitError, UnsupportedConfigError
from domainpar.memory import (
    MIB,
    ActivationLedger,
    LayerStackSpec,
    activation_bytes,
    format_param_count,
    format_table,
    linear_stack_forward,
    memory_report,
    param_count,
    per_rank_activation_bytes,
    scaling_fit,
    reference_table_reports,
    table_csv,
    weight_bytes,
)


def test_param_count_formula_smallest_case():
    # one layer, one feature: a 1x1 weight plus one bias
    assert param_count(LayerStackSpec(n_layers=1, features=1, spatial=(1,))) == 2
    spec = LayerStackSpec(n_layers=3, features=10, spatial=(4,))
    assert param_count(spec) == 3 * (100 + 10)
    assert weight_bytes(spec) == 4 * 330


def test_spec_validation():
    with pytest.raises(UnsupportedConfigError):
        LayerStackSpec(n_layers=0, features=8, spatial=(4,))
    with pytest.raises(UnsupportedConfigError):
        LayerStackSpec(n_layers=1, features=8, spatial=())
    with pytest.raises(UnsupportedConfigError):
        LayerStackSpec(n_layers=1, features=8, spatial=(0,))
    with pytest.raises(UnsupportedConfigError):
        LayerStackSpec(n_layers=1, features=8, spatial=(4,), bytes_per_element=2)
    with pytest.raises(UnsupportedConfigError):
        LayerStackSpec(n_layers=1, features=8, spatial=(4,), optimizer_multiplier=-1)


def test_optimizer_bytes_multiplier():
    spec = LayerStackSpec(n_layers=2, features=4, spatial=(3,))
    rep = memory_report(spec)
    assert rep.optimizer_bytes == 3.0 * rep.weight_bytes
    lean = LayerStackSpec(n_layers=2, features=4, spatial=(3,), optimizer_multiplier=0.0)
    assert memory_report(lean).optimizer_bytes == 0.0


@given(
    layers=hs.integers(1, 40),
    features=hs.integers(1, 512),
    side=hs.integers(1, 300),
    batch=hs.integers(1, 8),
)
def test_footprints_scale_multiplicatively(layers, features, side, batch):
    spec = LayerStackSpec(n_layers=layers, features=features, spatial=(side, side),
                          batch=batch)
    double_batch = LayerStackSpec(n_layers=layers, features=features,
                                  spatial=(side, side), batch=2 * batch)
    double_layers = LayerStackSpec(n_layers=2 * layers, features=features,
                                   spatial=(side, side), batch=batch)
    wide = LayerStackSpec(n_layers=layers, features=2 * features,
                          spatial=(side, side), batch=batch)
    assert activation_bytes(double_batch) == 2 * activation_bytes(spec)
    assert activation_bytes(double_layers) == 2 * activation_bytes(spec)
    assert weight_bytes(double_layers) == 2 * weight_bytes(spec)
    assert activation_bytes(wide) == 2 * activation_bytes(spec)
    # activations are one feature map per layer, never a params term
    assert activation_bytes(spec) == batch * side * side * features * 4 * layers


# ---------------------------------------------------------------------------
# reference table


def test_reference_table_values():
    reports = reference_table_reports()
    assert len(reports) == 6
    params = [format_param_count(r.n_params) for r in reports]
    assert params == ["21.0M", "1.3B"] * 3
    assert [r.n_params for r in reports] == [20_992_000, 1_342_341_120] * 3
    weights = [round(r.weight_mib, 1) for r in reports]
    assert weights == [80.1, 5120.6] * 3
    acts = [r.activation_mib for r in reports]
    assert acts == [20, 160, 5120, 40960, 1310720, 10485760]
    assert all(r.activation_bytes % MIB == 0 for r in reports)


def test_format_table_layout():
    text = format_table(reference_table_reports())
    lines = text.splitlines()
    assert lines[0].split() == [
        "spatial", "layers", "features", "params", "weights_mib",
        "activations_mib",
    ]
    assert len(lines) == 7
    assert lines[1].split() == ["(256,)", "20", "1024", "21.0M", "80.1", "20"]
    assert lines[4].split() == ["(256,256)", "20", "8192", "1.3B", "5120.6",
                                "40,960"]
    assert lines[6].split() == ["(256,256,256)", "20", "8192", "1.3B", "5120.6",
                                "10,485,760"]


def test_table_csv_is_machine_readable():
    text = table_csv(reference_table_reports())
    lines = text.splitlines()
    assert lines[0] == "spatial,layers,features,n_params,weights_mib,activations_mib"
    assert len(lines) == 7
    first = lines[1].split(",")
    assert first[0] == "256"
    assert first[3] == "20992000"
    assert float(first[4]) == pytest.approx(80.078125)
    assert float(first[5]) == 20.0
    last = lines[6].split(",")
    assert last[0] == "256x256x256"
    assert float(last[5]) == 10485760.0


def test_format_param_count_boundaries():
    assert format_param_count(999) == "999"
    assert format_param_count(1_000_000) == "1.0M"
    assert format_param_count(21_000_000) == "21.0M"
    assert format_param_count(1_342_341_120) == "1.3B"


# ---------------------------------------------------------------------------
# per-rank split


def test_per_rank_activations_sum_exactly():
    spec = LayerStackSpec(n_layers=5, features=33, spatial=(101, 7), batch=2)
    for ranks in (1, 2, 3, 4, 8):
        shares = per_rank_activation_bytes(spec, ranks)
        assert len(shares) == ranks
        assert sum(shares) == activation_bytes(spec)
    uneven = per_rank_activation_bytes(spec, [100, 0, 1])
    assert sum(uneven) == activation_bytes(spec)
    assert uneven[1] == 0


def test_per_rank_activations_other_dim():
    spec = LayerStackSpec(n_layers=2, features=3, spatial=(4, 6))
    shares = per_rank_activation_bytes(spec, 2, shard_dim=1)
    # batch(1) * h(4) * w_shard(3) * features(3) * bpe(4) * layers(2)
    assert shares == [288, 288]
    assert sum(shares) == activation_bytes(spec)


def test_per_rank_activations_validation():
    spec = LayerStackSpec(n_layers=1, features=2, spatial=(8,))
    with pytest.raises(UnsupportedConfigError, match="shard_dim"):
        per_rank_activation_bytes(spec, 2, shard_dim=1)
    with pytest.raises(UnsupportedConfigError, match="tile"):
        per_rank_activation_bytes(spec, [4, 5])


# ---------------------------------------------------------------------------
# scaling fit


def _series(spec_for_side, sides):
    return [activation_bytes(spec_for_side(s)) for s in sides]


@pytest.mark.parametrize(
    "ndim,expected_degree",
    [(1, 1), (2, 2), (3, 3)],
)
def test_scaling_fit_recovers_grid_dimension(ndim, expected_degree):
    sides = [64, 96, 128, 192, 256]
    values = _series(
        lambda s: LayerStackSpec(n_layers=20, features=64, spatial=(s,) * ndim),
        sides,
    )
    fit = scaling_fit(sides, values)
    assert fit.degree == expected_degree
    assert fit.residual < 1e-12
    # coefficient is the per-site constant: layers * features * bpe
    assert fit.coefficient == pytest.approx(20 * 64 * 4)


def test_scaling_fit_tolerates_noise():
    rng = np.random.default_rng(21)
    sides = np.array([32, 64, 128, 256, 512], dtype=np.float64)
    values = 7.5 * sides**2 * (1 + 0.01 * rng.standard_normal(5))
    fit = scaling_fit(sides, values)
    assert fit.degree == 2
    assert fit.coefficient == pytest.approx(7.5, rel=0.05)
    assert 0 < fit.residual < 0.05


def test_scaling_fit_respects_candidate_degrees():
    sides = [2, 4, 8, 16]
    values = [s**3 for s in sides]
    only_linear = scaling_fit(sides, values, degrees=(1,))
    assert only_linear.degree == 1
    assert only_linear.residual > 0.1  # a visibly bad fit, reported honestly


def test_scaling_fit_error_cases():
    with pytest.raises(FitError, match="4 points"):
        scaling_fit([1, 2, 3], [1, 4, 9])
    with pytest.raises(FitError, match="positive"):
        scaling_fit([0, 1, 2, 3], [0, 1, 4, 9])
    with pytest.raises(FitError, match="constant"):
        scaling_fit([1, 2, 3, 4], [5, 5, 5, 5])
    with pytest.raises(FitError, match="mismatched"):
        scaling_fit([1, 2, 3, 4], [1, 2, 3])


# ---------------------------------------------------------------------------
# measured ledger


def test_ledger_counts_arrays_and_raw_bytes():
    ledger = ActivationLedger()
    ledger.save(np.zeros((2, 3), dtype=np.float32))
    ledger.save(100)
    assert ledger.total_bytes == 24 + 100
    assert ledger.n_saved == 2
    assert ledger.peak_bytes == ledger.total_bytes
    ledger.reset()
    assert ledger.total_bytes == 0 and ledger.n_saved == 0
    with pytest.raises(UnsupportedConfigError):
        ledger.save(-1)


@pytest.mark.parametrize("bpe,dtype", [(4, np.float32), (8, np.float64)])
def test_linear_stack_ledger_matches_closed_form(bpe, dtype):
    spec = LayerStackSpec(
        n_layers=4, features=16, spatial=(5, 3), batch=2, bytes_per_element=bpe
    )
    rng = np.random.default_rng(22)
    rows = spec.batch * 5 * 3
    x = rng.standard_normal((rows, spec.features)).astype(dtype)
    weights = [
        rng.standard_normal((spec.features, spec.features)).astype(dtype)
        for _ in range(spec.n_layers)
    ]
    biases = [
        rng.standard_normal(spec.features).astype(dtype)
        for _ in range(spec.n_layers)
    ]
    ledger = ActivationLedger()
    out = linear_stack_forward(x, weights, biases, ledger=ledger)
    assert ledger.total_bytes == activation_bytes(spec)  # exact, not approx
    assert ledger.n_saved == spec.n_layers
    want = x
    for w, b in zip(weights, biases):
        want = dense.linear_forward(want, w, b)
    assert np.array_equal(out, want)
