import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmcount.chain import (
    ChainPath,
    GeneratorMatrix,
    adjugate,
    adjugate_identity,
    invariant_distribution,
    make_rng,
    random_generator,
    simulate_chain,
    simulate_chains,
    stability_check,
    subgenerator,
    validate_generator,
    validate_rates,
)
from mmcount.exceptions import (
    ColumnSumError,
    DimensionError,
    NegativeRateError,
    PreconditionError,
    ReducibleChainError,
    ValidationError,
)
from mmcount.linalg import mat_exp

from conftest import LAM, PI, Q


def test_valid_generator():
    g = validate_generator(Q)
    assert isinstance(g, GeneratorMatrix) and g.d == 2
    assert np.array_equal(np.asarray(g), Q)


def test_reducible_generator():
    with pytest.raises(ReducibleChainError):
        validate_generator([[-1, 0], [1, 0]])


def test_column_sum_error_names_column():
    with pytest.raises(ColumnSumError) as info:
        validate_generator([[-1, 2], [2, -2]])
    assert info.value.column == 0
    assert "column 0" in str(info.value)


def test_negative_rate_error():
    with pytest.raises(NegativeRateError):
        validate_generator([[1, -2], [-1, 2]])


def test_errors_are_distinct_validation_errors():
    for cls in (ColumnSumError, NegativeRateError, ReducibleChainError):
        assert issubclass(cls, ValidationError)
    assert len({ColumnSumError, NegativeRateError, ReducibleChainError}) == 3


def test_reducibility_check_can_be_disabled():
    g = validate_generator([[0.0, 0.0], [0.0, 0.0]], irreducible=False)
    assert g.d == 2


def test_non_square_generator():
    with pytest.raises(DimensionError):
        validate_generator([[0.0, 0.0]])


def test_rates_validation():
    r = validate_rates([1.0, 3.0], 2)
    assert r.all_positive and r.max == 3.0
    assert not validate_rates([0.0, 3.0], 2).all_positive
    with pytest.raises(DimensionError):
        validate_rates([1.0], 2)
    with pytest.raises(ValidationError):
        validate_rates([-1.0, 1.0], 2)


def test_invariant_canonical():
    np.testing.assert_allclose(invariant_distribution(Q), PI, atol=1e-15)


def test_invariant_scalar_and_symmetric():
    assert np.array_equal(invariant_distribution([[0.0]]), [1.0])
    q3 = np.ones((3, 3)) - 3 * np.eye(3)
    np.testing.assert_allclose(invariant_distribution(q3), np.full(3, 1 / 3), atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_invariant_solves_balance(d, seed):
    q = random_generator(d, np.random.default_rng(seed))
    pi = invariant_distribution(q)
    assert np.abs(q @ pi).max() < 1e-10
    assert pi.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.all(pi >= 0)


def test_adjugate_canonical():
    c, qdet = adjugate_identity(Q)
    np.testing.assert_allclose(c, [[-2, -2], [-1, -1]], atol=1e-14)
    assert qdet == pytest.approx(-3.0, abs=1e-14)
    np.testing.assert_allclose(qdet * np.outer(PI, [1, 1]), c, atol=1e-14)


def test_adjugate_scalar_chain():
    c, qdet = adjugate_identity([[0.0]])
    assert np.array_equal(c, [[1.0]]) and qdet == 1.0


def test_adjugate_random_4x4():
    q = random_generator(4, make_rng(11))
    c, qdet = adjugate_identity(q)
    assert np.abs(c - qdet * np.outer(invariant_distribution(q), np.ones(4))).max() < 1e-9
    assert np.abs(c @ q).max() < 1e-9


def test_adjugate_is_the_classical_adjoint():
    rng = make_rng(12)
    m = rng.normal(size=(4, 4))
    np.testing.assert_allclose(adjugate(m) @ m, np.linalg.det(m) * np.eye(4), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_adjugate_rank_one(d, seed):
    q = random_generator(d, np.random.default_rng(seed))
    c, qdet = adjugate_identity(q)
    assert np.abs(c @ q).max() < 1e-9


def test_subgenerator_examples():
    assert np.array_equal(subgenerator(Q, LAM, 0), Q)
    assert np.array_equal(subgenerator(Q, LAM, 1), [[-2, 2], [1, -5]])
    assert np.array_equal(subgenerator(Q, LAM, 2), [[-3, 2], [1, -8]])
    with pytest.raises(PreconditionError):
        subgenerator(Q, LAM, -1)


def test_stability_canonical():
    rep = stability_check(Q, LAM, [1, 5, 10])
    assert rep.passed and rep.decreasing
    assert rep.norms[-1] < 1e-3
    assert np.isfinite(rep.condition_number)


def test_stability_needs_positive_rates():
    with pytest.raises(PreconditionError, match="lambda"):
        stability_check(Q, [0.0, 3.0], [1.0])


def test_stability_scalar():
    rep = stability_check([[0.0]], [2.0], [1.0])
    assert rep.norms[0] == pytest.approx(math.exp(-2), abs=1e-15)


def test_survival_nonincreasing():
    rep = stability_check(Q, LAM, np.linspace(0, 5, 26))
    assert np.all(np.diff(rep.survival, axis=0) <= 1e-15)


def test_simulate_scalar_chain_has_no_transitions():
    path = simulate_chain([[0.0]], 0, 10.0, seed=1)
    assert path.n_transitions == 0 and path.initial_state == 0


def test_simulate_is_deterministic():
    a = simulate_chain(Q, 0, 50.0, seed=42)
    b = simulate_chain(Q, 0, 50.0, seed=42)
    assert np.array_equal(a.times, b.times) and np.array_equal(a.states, b.states)
    c = simulate_chain(Q, 0, 50.0, seed=43)
    assert not np.array_equal(a.times, c.times)


def test_path_invariants():
    path = simulate_chain(Q, 1, 100.0, seed=3)
    assert np.all(np.diff(path.times) > 0) and path.times[-1] < 100.0
    assert np.all(path.states[1:] != path.states[:-1])
    assert path.state_at(0.0) == 1


def test_long_run_occupation():
    path = simulate_chain(Q, 0, 1e4, seed=2024)
    frac = path.occupation(2)[0] / 1e4
    assert abs(frac - 2 / 3) < 0.01


def test_occupation_until():
    p = ChainPath(times=np.array([0.0, 1.0, 3.0]), states=np.array([0, 1, 0]), horizon=5.0)
    np.testing.assert_allclose(p.occupation(2), [3.0, 2.0])
    np.testing.assert_allclose(p.occupation(2, until=2.0), [1.0, 1.0])


def test_streams_are_independent_of_order():
    a = make_rng(9, 3).random(4)
    make_rng(9, 1).random(100)
    assert np.array_equal(a, make_rng(9, 3).random(4))
    assert not np.array_equal(a, make_rng(9, 4).random(4))


def test_vectorized_chains_terminal_law():
    rng = make_rng(7)
    state, hazard = simulate_chains(Q, 0, 1.0, rng, 200_000, rates=LAM)
    p = mat_exp(Q, 1.0)[:, 0]
    freq = np.bincount(state, minlength=2) / state.size
    se = np.sqrt(p * (1 - p) / state.size)
    assert np.all(np.abs(freq - p) < 4 * se)
    assert np.all((hazard >= 1.0 - 1e-12) & (hazard <= 3.0 + 1e-12))


def test_time_compression_matches_scaled_generator():
    a = simulate_chains(5 * Q, 0, 1.0, make_rng(8), 1000, rates=LAM)
    b = simulate_chains(Q, 0, 1.0, make_rng(8), 1000, rates=LAM, time_scale=5.0)
    assert np.array_equal(a[0], b[0])
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)
