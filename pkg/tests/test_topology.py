import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from relayibc.topology import (
    ChannelSet,
    SpecError,
    SystemSpec,
    build_topology,
    format_system_spec,
    make_rng,
    parse_system_spec,
    sample_channels,
    topology_from_maps,
)


def test_parse_reference_system():
    s = parse_system_spec("(2^3 x 2^6 x 2^12, 1x1)")
    assert (s.k_t, s.k_x, s.k_r) == (3, 6, 12)
    assert (s.n_t, s.n_x, s.n_r, s.d1, s.d2) == (2, 2, 2, 1, 1)
    assert s.t == 0.5 and s.noise_x == 1.0 and s.noise_r == 1.0


def test_parse_multistream_system():
    s = parse_system_spec("(4^4 x 4^8 x 2^16, 2x2)")
    assert (s.k_t, s.k_x, s.k_r, s.n_t, s.n_x, s.n_r, s.d1, s.d2) == (4, 8, 16, 4, 4, 2, 2, 2)


def test_parse_rejects_divisibility_violation():
    with pytest.raises(SpecError, match="multiple"):
        parse_system_spec("(2^3 x 2^4 x 2^8, 1x1)")


@pytest.mark.parametrize("text", ["2^3 x 2^6 x 2^12, 1x1", "(2^3 x 2^6, 1x1)", "(2^0 x 2^6 x 2^12, 1x1)", "(a^3 x 2^6 x 2^12, 1x1)"])
def test_parse_rejects_bad_syntax_or_counts(text):
    with pytest.raises(SpecError):
        parse_system_spec(text)


def test_stream_and_timesharing_bounds():
    with pytest.raises(SpecError, match="d1"):
        parse_system_spec("(1^1 x 2^1 x 2^1, 2x1)")
    with pytest.raises(SpecError, match="t="):
        parse_system_spec("(1^1 x 1^1 x 1^1, 1x1)", t=1.0)


def test_unicode_times_accepted():
    assert parse_system_spec("(2^3 × 2^6 × 2^12, 1×1)") == parse_system_spec("(2^3 x 2^6 x 2^12, 1x1)")


@given(
    st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
    st.integers(1, 4), st.integers(1, 4), st.integers(1, 4),
)
def test_parse_format_round_trip(k_t, rx, rr, d, n_t, n_x, n_r):
    d1 = min(d, n_t, n_x)
    d2 = min(d, n_x, n_r)
    text = f"({n_t}^{k_t} x {n_x}^{k_t * rx} x {n_r}^{k_t * rx * rr}, {d1}x{d2})"
    spec = parse_system_spec(text)
    assert format_system_spec(spec) == text
    assert parse_system_spec(format_system_spec(spec)) == spec


@pytest.mark.parametrize(
    "counts,mu,chi",
    [
        ((1, 2, 4), [0, 0], [0, 0, 1, 1]),
        ((3, 6, 12), [0, 0, 1, 1, 2, 2], [0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5]),
        ((1, 1, 1), [0], [0]),
    ],
)
def test_build_topology_blocks(counts, mu, chi):
    k_t, k_x, k_r = counts
    top = build_topology(SystemSpec(1, k_t, 1, k_x, 1, k_r))
    assert top.mu.tolist() == mu
    assert top.chi.tolist() == chi


@given(st.integers(1, 5), st.integers(1, 4), st.integers(1, 4))
def test_topology_partitions(k_t, rx, rr):
    top = build_topology(SystemSpec(1, k_t, 1, k_t * rx, 1, k_t * rx * rr))
    served = np.sort(np.concatenate(top.relay_receivers))
    assert served.tolist() == list(range(top.k_r))
    owned = np.sort(np.concatenate(top.tx_relays))
    assert owned.tolist() == list(range(top.k_x))
    for k, qs in enumerate(top.relay_receivers):
        assert np.all(top.chi[qs] == k) and len(qs) == rr
    for j, ks in enumerate(top.tx_relays):
        assert np.all(top.mu[ks] == j) and len(ks) == rx


def test_topology_maps_are_read_only():
    top = build_topology(SystemSpec(1, 1, 1, 2, 1, 4))
    with pytest.raises(ValueError):
        top.chi[0] = 1


def test_topology_from_maps_rejects_unknown_relay():
    with pytest.raises(SpecError):
        topology_from_maps([0, 2], [0, 0])


def test_sample_channels_deterministic_and_shaped():
    spec = parse_system_spec("(2^3 x 2^6 x 2^12, 1x1)")
    top = build_topology(spec)
    a = sample_channels(top, spec, 7)
    b = sample_channels(top, spec, 7)
    c = sample_channels(top, spec, 8)
    assert a.H.shape == (6, 3, 2, 2) and a.G.shape == (12, 6, 2, 2)
    assert a.H.tobytes() == b.H.tobytes() and a.G.tobytes() == b.G.tobytes()
    assert a.digest() == b.digest() != c.digest()


def test_sample_channel_moments():
    spec = parse_system_spec("(1^1 x 1^1 x 1^1, 1x1)")
    top = build_topology(spec)
    z = np.concatenate([np.r_[ch.H.ravel(), ch.G.ravel()] for ch in (sample_channels(top, spec, s) for s in range(50_000))])
    assert z.size == 100_000
    assert abs(np.mean(np.abs(z) ** 2) - 1.0) < 0.02
    assert abs(np.mean(z.real)) < 0.02 and abs(np.mean(z.imag)) < 0.02
    assert abs(np.var(z.real) - 0.5) < 0.01 and abs(np.var(z.imag) - 0.5) < 0.01


def test_rng_streams_differ_by_key():
    a = make_rng(1, 0).standard_normal(4)
    b = make_rng(1, 1).standard_normal(4)
    assert not np.allclose(a, b)
    assert np.array_equal(a, make_rng(1, 0).standard_normal(4))


def test_channelset_validation():
    with pytest.raises(SpecError):
        ChannelSet(H=np.ones((1, 1, 1)), G=np.ones((1, 1, 1, 1)))
    with pytest.raises(SpecError):
        ChannelSet(H=np.full((1, 1, 1, 1), np.nan), G=np.ones((1, 1, 1, 1)))
