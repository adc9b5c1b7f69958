import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pd, scalar_channels
from relayibc.rates import (
    NumericalBreakdown,
    PrecoderSet,
    allocate_first_hop_rates,
    effective_sinr,
    end_to_end,
    first_hop_metrics,
    interference_covariance,
    inv_pd,
    logdet_pd,
    mmse_receive_filter,
    mse_matrix,
    rate_report,
    second_hop_metrics,
    stream_rate,
)
from relayibc.topology import SystemSpec, build_topology, crandn, make_rng, topology_from_maps


# -- interference covariance -------------------------------------------------


def test_covariance_noise_only():
    assert np.array_equal(interference_covariance([], 1.0, 2), np.eye(2))


def test_covariance_scalar_interferers():
    assert interference_covariance([[[1.0]], [[2j]]], 1.0, 1)[0, 0] == pytest.approx(6.0)


def test_covariance_matches_direct_sum(rng):
    ms = [crandn(rng, (3, 2)) for _ in range(3)]
    direct = 0.5 * np.eye(3, dtype=complex)
    for m in ms:
        for i in range(3):
            for j in range(3):
                direct[i, j] += sum(m[i, s] * np.conj(m[j, s]) for s in range(2))
    got = interference_covariance(ms, 0.5, 3)
    assert np.max(np.abs(got - direct)) < 1e-12
    assert np.max(np.abs(got - got.conj().T)) < 1e-12
    assert np.linalg.eigvalsh(got).min() >= 0.5 * (1 - 1e-10)


def test_covariance_dimension_mismatch():
    with pytest.raises(ValueError):
        interference_covariance([np.ones((2, 1))], 1.0, 3)


# -- MMSE filter, rate, MSE ----------------------------------------------------


def test_mmse_filter_scalar():
    assert mmse_receive_filter([[2.0]], [[1.0]])[0, 0] == pytest.approx(0.4)
    assert np.all(mmse_receive_filter(np.zeros((2, 1)), np.eye(2)) == 0)


def test_mmse_filter_minimizes_trace_mse(rng):
    D = crandn(rng, (4, 2))
    R = random_pd(rng, 4)
    W = mmse_receive_filter(D, R)
    best = np.trace(mse_matrix(D, R, W)).real
    for _ in range(1000):
        Wp = W + 0.01 * crandn(rng, W.shape)
        assert np.trace(mse_matrix(D, R, Wp)).real >= best - 1e-12


def test_mmse_filter_refuses_non_pd():
    with pytest.raises(NumericalBreakdown):
        mmse_receive_filter(np.zeros((2, 1)), -np.eye(2))


@pytest.mark.parametrize("d,expected", [(1.0, 1.0), (np.sqrt(3), 2.0)])
def test_stream_rate_scalar(d, expected):
    assert stream_rate([[d]], [[1.0]]) == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_rate_mse_identity(rng, d):
    for _ in range(20):
        D = crandn(rng, (4, d)) * 2
        R = random_pd(rng, 4)
        E = mse_matrix(D, R, mmse_receive_filter(D, R))
        assert stream_rate(D, R) == pytest.approx(-logdet_pd(E) / np.log(2), rel=1e-9)


def test_mse_matrix_scalar():
    assert mse_matrix([[1.0]], [[1.0]], [[0.5]])[0, 0].real == pytest.approx(0.5)


def test_mse_matrix_closed_form(rng):
    D = crandn(rng, (3, 2))
    R = random_pd(rng, 3)
    E = mse_matrix(D, R, mmse_receive_filter(D, R))
    closed = np.linalg.inv(np.eye(2) + D.conj().T @ np.linalg.solve(R, D))
    assert np.max(np.abs(E - closed)) < 1e-10
    assert np.max(np.abs(E - E.conj().T)) < 1e-12
    assert np.linalg.eigvalsh(E).min() > -1e-10


def test_mse_matrix_dimension_check():
    with pytest.raises(ValueError):
        mse_matrix(np.ones((2, 1)), np.eye(3), np.ones((2, 1)))


@given(st.floats(1.01, 20.0), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_stronger_interferer_never_helps(c, seed):
    rng = make_rng(seed)
    D = crandn(rng, (3, 1))
    ints = [crandn(rng, (3, 1)) for _ in range(2)]
    r0 = stream_rate(D, interference_covariance(ints, 1.0, 3))
    r1 = stream_rate(D, interference_covariance([c * ints[0], ints[1]], 1.0, 3))
    assert r1 <= r0 + 1e-12


@pytest.mark.parametrize("rate,sinr", [(0, 0), (1, 1), (3, 7)])
def test_effective_sinr(rate, sinr):
    assert effective_sinr(rate) == pytest.approx(sinr)


@pytest.mark.parametrize("s", [0.0, 1.0, 10.0, 100.0])
def test_effective_sinr_inverts_scalar_rate(s):
    r = stream_rate([[np.sqrt(s)]], [[1.0]])
    assert effective_sinr(r) == pytest.approx(s, abs=1e-12 * max(s, 1))


def test_inv_pd(rng):
    A = random_pd(rng, 3)
    assert np.max(np.abs(inv_pd(A) @ A - np.eye(3))) < 1e-10


# -- hop metrics ---------------------------------------------------------------


def test_metrics_single_link():
    top = build_topology(SystemSpec(1, 1, 1, 1, 1, 1))
    ch = scalar_channels([[1]], [[1]])
    r1, xi1, _ = first_hop_metrics(ch, top, np.ones((1, 1, 1)))
    r2, r2_sum, xi2 = second_hop_metrics(ch, top, np.ones((1, 1, 1)))
    assert r1[0] == pytest.approx(1) and xi1[0] == pytest.approx(1)
    assert r2[0] == pytest.approx(1) and r2_sum[0] == pytest.approx(1) and xi2[0] == pytest.approx(1)


def test_first_hop_scalar_sinr():
    # two relays, each with its own transmitter; powers 9 and 1
    top = topology_from_maps([0, 1], [0, 1])
    ch = scalar_channels([[1, 1], [1, 1]], [[1, 0], [0, 1]])
    F = np.sqrt(np.array([9.0, 1.0]))[:, None, None]
    _, xi1, _ = first_hop_metrics(ch, top, F)
    assert xi1 == pytest.approx([4.5, 0.1])


def test_same_transmitter_streams_interfere():
    # one transmitter serving both relays: the sibling stream counts as interference
    top = topology_from_maps([0, 1], [0, 0])
    H = np.ones((2, 1, 1, 1), dtype=complex)
    ch = scalar_channels([[1], [1]], [[1, 0], [0, 1]])
    assert np.array_equal(ch.H, H)
    _, xi1, _ = first_hop_metrics(ch, top, np.sqrt(np.array([9.0, 1.0]))[:, None, None])
    assert xi1 == pytest.approx([4.5, 0.1])


def test_zero_cross_channels_decouple(rng):
    top = topology_from_maps([0, 1], [0, 1])
    H = np.zeros((2, 2, 2, 2), dtype=complex)
    H[0, 0] = crandn(rng, (2, 2))
    H[1, 1] = crandn(rng, (2, 2))
    G = np.zeros((2, 2, 2, 2), dtype=complex)
    G[0, 0] = G[1, 1] = np.eye(2)
    from relayibc.topology import ChannelSet

    ch = ChannelSet(H=H, G=G)
    F = crandn(rng, (2, 2, 1))
    r1, _, _ = first_hop_metrics(ch, top, F)
    for k in range(2):
        assert r1[k] == pytest.approx(stream_rate(H[k, k] @ F[k], np.eye(2)), rel=1e-12)


def test_second_hop_sibling_interference():
    # relay serving two receivers over a shared scalar channel
    top = topology_from_maps([0, 0], [0])
    ch = scalar_channels([[1]], [[1], [1]])
    r2, r2_sum, _ = second_hop_metrics(ch, top, np.sqrt(np.array([3.0, 1.0]))[:, None, None])
    assert r2 == pytest.approx([np.log2(1 + 3 / 2), np.log2(1 + 1 / 4)])
    assert r2_sum[0] == pytest.approx(r2.sum())


def test_metrics_warn_on_power_violation():
    top = build_topology(SystemSpec(1, 1, 1, 1, 1, 1))
    ch = scalar_channels([[1]], [[1]])
    with pytest.warns(RuntimeWarning, match="transmitter"):
        first_hop_metrics(ch, top, 2 * np.ones((1, 1, 1)), SystemSpec(1, 1, 1, 1, 1, 1))


def test_precoder_set_power_bookkeeping():
    top = build_topology(SystemSpec(1, 1, 1, 2, 1, 4))
    ps = PrecoderSet(F_T=np.ones((2, 1, 1)), F_X=np.ones((4, 1, 1)) * 0.5)
    assert ps.transmitter_power(top).tolist() == [2.0]
    assert ps.relay_power(top).tolist() == [0.5, 0.5]
    assert ps.is_feasible(top, 2.0, 0.5) and not ps.is_feasible(top, 1.9, 0.5)


# -- rate allocation and end-to-end ----------------------------------------------


@pytest.mark.parametrize(
    "r1,r2,beta",
    [(4, (3, 1), (1.5, 0.5)), (2, (3, 1), (0.75, 0.25)), (3, (), ()), (2, (0, 0), (0, 0))],
)
def test_allocate_first_hop_rates(r1, r2, beta):
    assert allocate_first_hop_rates(0.5, r1, r2) == pytest.approx(np.array(beta, dtype=float))


@given(
    st.floats(0.01, 0.99),
    st.floats(0.0, 20.0),
    st.lists(st.floats(0.0, 10.0), min_size=1, max_size=5),
)
def test_allocation_never_exceeds_first_hop(t, r1, r2):
    beta = allocate_first_hop_rates(t, r1, r2)
    assert beta.sum() <= t * r1 * (1 + 1e-12) + 1e-300
    if t * r1 < (1 - t) * sum(r2):
        assert beta.sum() == pytest.approx(t * r1, rel=1e-12, abs=1e-300)


@pytest.mark.parametrize(
    "r1,r2,per,total",
    [((4,), (4,), (2,), 2.0), ((4, 1), (2, 3), (1, 0.5), 1.5), ((0, 0), (5, 1), (0, 0), 0.0)],
)
def test_end_to_end(r1, r2, per, total):
    got, s = end_to_end(0.5, r1, r2)
    assert got == pytest.approx(per) and s == pytest.approx(total)


def test_rate_report_invariants():
    top = build_topology(SystemSpec(1, 1, 1, 2, 1, 4))
    rep = rate_report(0.4, top, [3.0, 1.0], [1.0, 2.0, 0.5, 0.5])
    assert rep.R2_sum.tolist() == [3.0, 1.0]
    assert rep.xi1 == pytest.approx([7, 1]) and rep.xi2 == pytest.approx([7, 1])
    assert rep.R_e2e == pytest.approx(np.minimum(0.4 * rep.R1, 0.6 * rep.R2_sum))
    assert rep.R_sum == pytest.approx(rep.R_e2e.sum())
    for k, qs in enumerate(top.relay_receivers):
        assert rep.beta[qs].sum() <= 0.4 * rep.R1[k] + 1e-12
