import math

import numpy as np
import pytest
from sklearn.base import clone

from mmcount import HiddenChainFilter, MMBinomialModel, MMPoissonModel, run_filter
from mmcount.binomial_model import conditional_joint, default_prob_single
from mmcount.chain import make_rng
from mmcount.exceptions import DegenerateObservationError, PreconditionError, ValidationError
from mmcount.filtering import (
    FilterState,
    ObservationRecord,
    filter_terminal_batch,
    flow_between_jumps,
    jump_update,
    predict_cf_filtered,
    predict_default_filtered,
    predict_joint_filtered,
    read_observations,
    write_trajectory,
)
from mmcount.linalg import expm_ode, mat_exp
from mmcount.montecarlo import sample_terminal, simulate_joint
from mmcount.poisson_model import transient_counts

from conftest import LAM, PI, Q

HALF = np.array([0.5, 0.5])
# terminal posterior for n=1, no jump on [0, 1], prior (1/2, 1/2); 30-digit mpmath ODE solve
MP_NO_JUMP = [0.77552596069442994, 0.22447403930557006]
MP_DEFAULT_FILTERED = 0.82280991895528788


@pytest.fixture
def single_half():
    return MMBinomialModel(Q, LAM, n_obligors=1, initial_law=HALF).fit()


@pytest.fixture
def binom3_half():
    return MMBinomialModel(Q, LAM, n_obligors=3, initial_law=HALF).fit()


def test_jump_update_examples():
    assert np.array_equal(jump_update(HALF, LAM), [0.25, 0.75])
    x = np.array([0.3, 0.7])
    np.testing.assert_allclose(jump_update(x, [2.0, 2.0]), x, atol=1e-16)
    assert np.array_equal(jump_update([0.0, 1.0], LAM), [0.0, 1.0])


def test_jump_update_scale_invariant():
    x = np.array([0.2, 0.8])
    np.testing.assert_allclose(jump_update(x, 7.5 * LAM), jump_update(x, LAM), atol=1e-16)


def test_jump_update_degenerate():
    with pytest.raises(DegenerateObservationError):
        jump_update([1.0, 0.0], [0.0, 3.0])


def test_flow_after_all_defaults(binom3_half):
    state = FilterState(0.4, 3, np.array([0.1, 0.9]))
    out = flow_between_jumps(state, binom3_half, 0.8)
    np.testing.assert_allclose(out.xhat, mat_exp(Q, 0.8) @ [0.1, 0.9], atol=1e-15)
    assert out.time == pytest.approx(1.2)


def test_flow_fixed_point():
    m = MMBinomialModel(Q, [2.0, 2.0], n_obligors=4).fit()
    out = flow_between_jumps(FilterState(0.0, 1, PI.copy()), m, 2.0)
    np.testing.assert_allclose(out.xhat, PI, atol=1e-14)


def test_flow_convergence_order(binom3_half):
    state = FilterState(0.0, 0, HALF)
    ref = flow_between_jumps(state, binom3_half, 1.0, step=1e-4).xhat
    errs = [np.abs(flow_between_jumps(state, binom3_half, 1.0, step=h).xhat - ref).max()
            for h in (0.05, 0.025, 0.0125)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all((orders > 3.5) & (orders < 4.6))


def test_no_jump_filter_matches_high_precision(single_half):
    traj = run_filter(single_half, ObservationRecord.for_model(single_half, [], 1.0),
                      grid_step=None)
    np.testing.assert_allclose(traj.final.xhat, MP_NO_JUMP, atol=1e-10)


def test_no_jump_filter_tilts_to_low_rate(single_half):
    traj = run_filter(single_half, ObservationRecord.for_model(single_half, [], 8.0),
                      grid_step=0.1)
    assert np.all(np.diff(traj.xhat[:, 0]) > 0)
    assert np.all(traj.counts == 0)
    assert traj.max_drift_rate < 1e-8


def test_scalar_chain_is_constant():
    m = MMBinomialModel([[0.0]], [1.5], n_obligors=3, require_irreducible=False).fit()
    traj = run_filter(m, [0.2, 0.9], grid_step=0.05)
    assert np.all(traj.xhat == 1.0)


def test_frozen_chain_concentrates():
    m = MMPoissonModel(np.zeros((2, 2)), [1.0, 4.0], initial_law=HALF,
                       require_irreducible=False).fit()
    rng = make_rng(4, 0)
    jumps = np.cumsum(rng.exponential(1 / 4.0, 200))
    jumps = jumps[jumps <= 30.0]
    traj = run_filter(m, ObservationRecord.for_model(m, jumps, 30.0), grid_step=10.0)
    assert traj.final.xhat[1] > 1 - 1e-12
    wrong = traj.xhat[:, 0]
    assert wrong[-1] < wrong[1] < wrong[0]


def test_record_validation(binom3_half):
    with pytest.raises(ValidationError):
        ObservationRecord([0.5, 0.3], 1.0)
    with pytest.raises(ValidationError):
        ObservationRecord([0.5, 1.5], 1.0)
    with pytest.raises(ValidationError):
        ObservationRecord.for_model(binom3_half, [0.1, 0.2, 0.3, 0.4], 1.0)


def test_trajectory_includes_jumps(binom3_half):
    traj = run_filter(binom3_half, ObservationRecord.for_model(binom3_half, [0.31, 1.2], 2.0))
    assert traj.final.count == 2
    assert [s.time for s in traj.jump_states] == [0.31, 1.2]
    np.testing.assert_allclose(traj.xhat.sum(axis=1), 1.0, atol=1e-12)
    assert traj.xhat.min() >= 0


def test_batch_matches_scalar(binom3_half, poisson):
    for model in (binom3_half, poisson):
        recs = [ObservationRecord.for_model(model, [], 1.5),
                ObservationRecord.for_model(model, [0.2], 1.0),
                ObservationRecord.for_model(model, [0.05, 0.07, 1.9], 2.5)]
        counts, xhat = filter_terminal_batch(model, recs)
        for r, rec in enumerate(recs):
            final = run_filter(model, rec, grid_step=None).final
            assert counts[r] == final.count
            np.testing.assert_allclose(xhat[r], final.xhat, atol=1e-13)


def test_posterior_favors_true_state(binom3_half):
    recs, truth = [], []
    for r in range(10**4):
        path = simulate_joint(binom3_half, 1.0, 0, rng=make_rng(61, r))
        recs.append(ObservationRecord.for_model(binom3_half, path.jump_times, 1.0))
        truth.append(path.chain.states[-1])
    _, xhat = filter_terminal_batch(binom3_half, recs)
    truth = np.array(truth)
    on_truth = xhat[np.arange(len(truth)), truth]
    assert on_truth.mean() > PI[truth].mean()


def test_predict_joint_examples(binom3_half):
    state = FilterState(0.5, 1, np.array([0.4, 0.6]))
    law = predict_joint_filtered(binom3_half, state, 0.0)
    expected = np.zeros((4, 2))
    expected[1] = [0.4, 0.6]
    np.testing.assert_allclose(law.blocks, expected, atol=1e-15)
    basis = FilterState(0.5, 1, np.array([0.0, 1.0]))
    np.testing.assert_allclose(predict_joint_filtered(binom3_half, basis, 0.7).zeta,
                               conditional_joint(binom3_half, 0.7, (1, 1)).zeta, atol=1e-14)


def test_predict_matches_survivor_simulation(binom3_half):
    # on {N_s = 0} the filtered prediction is the law of N_t given no jumps by s
    s, tau, size = 0.5, 0.8, 400_000
    rng = make_rng(71, 0)
    counts_s, chain_s = sample_terminal(binom3_half, s, size, rng)
    keep = chain_s[counts_s == 0]
    survivor = MMBinomialModel(Q, LAM, n_obligors=3).fit()
    restarted = np.zeros(4)
    for j in (0, 1):
        m = int((keep == j).sum())
        if m:
            survivor.set_params(initial_law=np.eye(2)[j]).fit()
            c, _ = sample_terminal(survivor, tau, m, make_rng(71, 1 + j))
            restarted += np.bincount(c, minlength=4)
    emp = restarted / keep.size
    state = run_filter(binom3_half, ObservationRecord.for_model(binom3_half, [], s),
                       grid_step=None).final
    exact = predict_joint_filtered(binom3_half, state, tau).count_marginal()
    se = np.sqrt(exact * (1 - exact) / keep.size)
    assert np.all(np.abs(emp - exact) < 3.5 * se + 1e-12)


def test_predict_poisson(poisson):
    state = FilterState(0.0, 0, poisson.initial_law_)
    law = predict_joint_filtered(poisson, state, 1.0)
    np.testing.assert_allclose(law.blocks[:6], transient_counts(poisson, 1.0).blocks[:6],
                               atol=1e-14)
    shifted = predict_joint_filtered(poisson, FilterState(1.0, 2, poisson.initial_law_), 1.0)
    np.testing.assert_allclose(shifted.blocks[2:8], law.blocks[:6], atol=1e-14)
    assert not shifted.blocks[:2].any()


@pytest.mark.parametrize("model_name", ["binom3_half", "poisson"])
def test_predict_cf(model_name, request):
    model = request.getfixturevalue(model_name)
    state = FilterState(0.3, 2, np.array([0.25, 0.75]))
    assert predict_cf_filtered(model, state, 0.9, 0.0) == pytest.approx(1.0, abs=1e-13)
    assert predict_cf_filtered(model, state, 0.0, 0.8) == pytest.approx(np.exp(1.6j), abs=1e-14)
    us = 2 * np.pi * np.arange(64) / 64
    cf = np.array([predict_cf_filtered(model, state, 0.9, u) for u in us])
    assert np.abs(cf).max() <= 1 + 1e-12
    rec = (np.exp(-1j * np.outer(np.arange(64), us)) @ cf / 64).real
    marg = predict_joint_filtered(model, state, 0.9).count_marginal()
    assert np.abs(rec[:marg.size] - marg).max() < 1e-8


def test_predict_default(single_half):
    assert predict_default_filtered(single_half, FilterState(0.2, 1, HALF), 1.0) == 1.0
    at_zero = FilterState(0.0, 0, single_half.initial_law_)
    assert predict_default_filtered(single_half, at_zero, 1.3) == pytest.approx(
        default_prob_single(single_half, 1.3), abs=1e-14)
    state = FilterState(0.0, 0, np.array([0.25, 0.75]))
    val = predict_default_filtered(single_half, state, 1.0)
    assert val == pytest.approx(MP_DEFAULT_FILTERED, abs=1e-14)
    oracle = 1 - expm_ode(single_half.subgenerator(1), 1.0, steps=4000, x=state.xhat).sum()
    assert val == pytest.approx(oracle, abs=1e-10)
    with pytest.raises(PreconditionError):
        predict_default_filtered(MMBinomialModel(Q, LAM, n_obligors=2).fit(), state, 1.0)


def test_tower_property_small(binom3_half):
    from mmcount.acceptance import tower_check

    zmax, zcrit = tower_check(binom3_half, 0.6, 0.5, 2000, seed=1000)
    assert zmax <= zcrit


def test_csv_round_trip(tmp_path, binom3_half):
    obs = tmp_path / "obs.csv"
    obs.write_text("jump_time\n0.31\n1.2\n")
    times = read_observations(obs)
    assert np.array_equal(times, [0.31, 1.2])
    traj = run_filter(binom3_half, ObservationRecord.for_model(binom3_half, times, 2.0))
    out = tmp_path / "traj.csv"
    write_trajectory(out, traj)
    lines = out.read_text().splitlines()
    assert lines[0] == "time,count,xhat_1,xhat_2"
    assert len(lines) == len(traj.times) + 1
    bad = tmp_path / "bad.csv"
    bad.write_text("time\n0.1\n")
    with pytest.raises(ValidationError, match="jump_time"):
        read_observations(bad)


def test_estimator_wrapper(binom3_half):
    est = HiddenChainFilter(model=binom3_half, grid_step=0.5)
    assert clone(est).get_params()["grid_step"] == 0.5
    est.fit([0.31, 1.2], horizon=2.0)
    assert est.state_.count == 2
    probs = est.predict_proba(1.0)
    assert probs[:2].sum() == 0.0 and probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert est.predict_cf(1.0, 0.0) == pytest.approx(1.0)
    rows = est.transform([[0.2], [0.1, 0.5]])
    assert rows.shape == (2, 2)
    fixed = HiddenChainFilter(model=binom3_half, step=0.001).transform([[0.2], [0.1, 0.5]])
    np.testing.assert_allclose(rows, fixed, atol=1e-9)
    with pytest.raises(ValidationError):
        HiddenChainFilter().fit([0.1])
