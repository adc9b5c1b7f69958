"""System description, node associations and random channel draws.

A system is written as ``(A^a x B^b x C^c, d1xd2)``: ``a`` transmitters
with ``A`` antennas, ``b`` relays with ``B`` antennas and ``c`` receivers
with ``C`` antennas, ``d1`` streams per first-hop link and ``d2`` streams
per receiver. Every index is 0-based.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SpecError",
    "SystemSpec",
    "Topology",
    "ChannelSet",
    "parse_system_spec",
    "format_system_spec",
    "build_topology",
    "sample_channels",
    "make_rng",
    "db_to_linear",
]


class SpecError(ValueError):
    """Malformed or inconsistent system description."""


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class SystemSpec:
    n_t: int
    k_t: int
    n_x: int
    k_x: int
    n_r: int
    k_r: int
    d1: int = 1
    d2: int = 1
    t: float = 0.5
    p_t_db: float = 0.0
    # None means the relays transmit at the transmitter power
    p_x_db: float | None = None
    noise_x: float = 1.0
    noise_r: float = 1.0

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise SpecError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        for name in ("n_t", "k_t", "n_x", "k_x", "n_r", "k_r", "d1", "d2"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                out.append(f"{name} must be a positive integer (got {v!r})")
        if out:
            return out
        if self.k_x % self.k_t:
            out.append(f"K_X={self.k_x} is not a multiple of K_T={self.k_t}")
        if self.k_r % self.k_x:
            out.append(f"K_R={self.k_r} is not a multiple of K_X={self.k_x}")
        if not 0.0 < self.t < 1.0:
            out.append(f"t={self.t} must lie in (0, 1)")
        if self.d1 > min(self.n_t, self.n_x):
            out.append(f"d1={self.d1} exceeds min(N_T, N_X)")
        if self.d2 > min(self.n_x, self.n_r):
            out.append(f"d2={self.d2} exceeds min(N_X, N_R)")
        if self.noise_x <= 0 or self.noise_r <= 0:
            out.append("noise variances must be positive")
        return out

    @property
    def p_t(self) -> float:
        return db_to_linear(self.p_t_db)

    @property
    def p_x(self) -> float:
        return db_to_linear(self.p_t_db if self.p_x_db is None else self.p_x_db)


_SPEC_RE = re.compile(
    r"""^\s*\(\s*
    (\d+)\s*\^\s*(\d+)\s*[x×]\s*
    (\d+)\s*\^\s*(\d+)\s*[x×]\s*
    (\d+)\s*\^\s*(\d+)\s*,\s*
    (\d+)\s*[x×]\s*(\d+)\s*\)\s*$""",
    re.VERBOSE,
)


def parse_system_spec(text: str, **overrides) -> SystemSpec:
    """Parse ``"(2^3 x 2^6 x 2^12, 1x1)"`` into a :class:`SystemSpec`.

    Keyword overrides (``t``, ``p_t_db`` ...) are forwarded to the
    constructor.
    """
    m = _SPEC_RE.match(text)
    if m is None:
        raise SpecError(f"cannot parse system spec {text!r}; expected '(A^a x B^b x C^c, d1xd2)'")
    n_t, k_t, n_x, k_x, n_r, k_r, d1, d2 = (int(g) for g in m.groups())
    return SystemSpec(n_t=n_t, k_t=k_t, n_x=n_x, k_x=k_x, n_r=n_r, k_r=k_r, d1=d1, d2=d2, **overrides)


def format_system_spec(spec: SystemSpec) -> str:
    return (
        f"({spec.n_t}^{spec.k_t} x {spec.n_x}^{spec.k_x} x {spec.n_r}^{spec.k_r}, "
        f"{spec.d1}x{spec.d2})"
    )


@dataclass(frozen=True)
class Topology:
    """Receiver-to-relay (``chi``) and relay-to-transmitter (``mu``) maps."""

    chi: np.ndarray
    mu: np.ndarray
    relay_receivers: tuple = field(repr=False)
    tx_relays: tuple = field(repr=False)

    @property
    def k_t(self) -> int:
        return len(self.tx_relays)

    @property
    def k_x(self) -> int:
        return len(self.mu)

    @property
    def k_r(self) -> int:
        return len(self.chi)


def _frozen(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


def _inverse(assoc, n_groups):
    return tuple(_frozen(np.flatnonzero(assoc == g)) for g in range(n_groups))


def topology_from_maps(chi, mu) -> Topology:
    chi = _frozen(np.asarray(chi, dtype=np.intp))
    mu = _frozen(np.asarray(mu, dtype=np.intp))
    if chi.size and chi.max() >= mu.size:
        raise SpecError("chi refers to a relay that does not exist")
    k_t = int(mu.max()) + 1 if mu.size else 0
    return Topology(chi=chi, mu=mu, relay_receivers=_inverse(chi, mu.size), tx_relays=_inverse(mu, k_t))


def build_topology(spec: SystemSpec) -> Topology:
    """Symmetric block association: contiguous runs of relays per
    transmitter and of receivers per relay."""
    chi = np.arange(spec.k_r) // (spec.k_r // spec.k_x)
    mu = np.arange(spec.k_x) // (spec.k_x // spec.k_t)
    return topology_from_maps(chi, mu)


@dataclass(frozen=True)
class ChannelSet:
    """``H[m, j]``: transmitter j -> relay m (N_X x N_T).
    ``G[q, m]``: relay m -> receiver q (N_R x N_X)."""

    H: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        for name in ("H", "G"):
            a = getattr(self, name)
            if a.ndim != 4:
                raise SpecError(f"{name} must be a 4-d array, got shape {a.shape}")
            if not np.all(np.isfinite(a)):
                raise SpecError(f"{name} has non-finite entries")
            a.setflags(write=False)

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in (self.H, self.G):
            h.update(str(a.shape).encode())
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Philox stream for ``(seed, *key)``.

    Distinct keys give statistically independent streams, so realization
    ``r`` of a Monte Carlo run draws from ``make_rng(master, r)`` no matter
    which worker process handles it.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def crandn(rng: np.random.Generator, shape) -> np.ndarray:
    """CN(0, 1) samples: real and imaginary parts each N(0, 1/2)."""
    z = rng.standard_normal((2,) + tuple(shape))
    return (z[0] + 1j * z[1]) * np.sqrt(0.5)


def sample_channels(topology: Topology, spec: SystemSpec, seed: int) -> ChannelSet:
    rng = make_rng(seed, 0)
    H = crandn(rng, (topology.k_x, topology.k_t, spec.n_x, spec.n_t))
    G = crandn(rng, (topology.k_r, topology.k_x, spec.n_r, spec.n_x))
    return ChannelSet(H=H, G=G)
