import numpy as np
import pytest

from relayibc.topology import ChannelSet, build_topology, crandn, make_rng, parse_system_spec, sample_channels


def random_pd(rng, n, scale=1.0, floor=0.1):
    A = crandn(rng, (n, n))
    return A @ A.conj().T * scale + floor * np.eye(n)


def scalar_channels(h, g):
    """ChannelSet from nested lists of scalar gains ``h[m][j]``, ``g[q][m]``."""
    H = np.asarray(h, dtype=complex)[:, :, None, None]
    G = np.asarray(g, dtype=complex)[:, :, None, None]
    return ChannelSet(H=H, G=G)


def small_instance(text, seed, **kw):
    spec = parse_system_spec(text, **kw)
    top = build_topology(spec)
    return spec, top, sample_channels(top, spec, seed)


@pytest.fixture
def rng():
    return make_rng(12345, 99)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
