"""Uplink frame generation for grant-free CDMA/NOMA with sporadic devices.

A frame is produced in four draws: the activity pattern (with a per-packet
activity rate), the BPSK symbol matrix, the Rayleigh block-fading channel
and the receiver noise. Each frame gets its own generator derived from
``(seed, stream, index)`` so frames can be produced in any order or in
parallel and still be bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._validation import check_positive_int, check_probability


@dataclass(frozen=True)
class SpreadingMatrix:
    """Nc x K matrix of +-1 chips; column k is the signature of device k."""

    codes: np.ndarray

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.ndim != 2 or codes.size == 0:
            raise ValueError(f"codes must be a non-empty 2-D array, got shape {codes.shape}")
        if not np.all(np.abs(codes) == 1):
            raise ValueError("spreading codes must contain only -1 and +1")
        codes = codes.astype(np.int8)
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)

    @property
    def Nc(self) -> int:
        return self.codes.shape[0]

    @property
    def K(self) -> int:
        return self.codes.shape[1]


@dataclass(frozen=True)
class PowerProfile:
    """Per-group transmit powers and the device-to-group assignment.

    ``group_powers[assignment[k]]`` is the linear transmit power of device k.
    """

    group_powers: tuple
    assignment: tuple

    def __post_init__(self):
        gp = tuple(float(p) for p in self.group_powers)
        asg = tuple(int(j) for j in self.assignment)
        if len(gp) == 0 or any(not np.isfinite(p) or p <= 0 for p in gp):
            raise ValueError(f"group powers must be positive, got {gp}")
        if len(asg) == 0:
            raise ValueError("assignment must cover at least one device")
        if min(asg) < 0 or max(asg) >= len(gp):
            raise ValueError("assignment refers to a group that does not exist")
        object.__setattr__(self, "group_powers", gp)
        object.__setattr__(self, "assignment", asg)

    @classmethod
    def homogeneous(cls, K: int, power: float = 1.0) -> "PowerProfile":
        return cls((power,), (0,) * K)

    @classmethod
    def from_groups(cls, group_powers: Sequence[float], group_sizes: Sequence[int]) -> "PowerProfile":
        """Contiguous groups: the first ``group_sizes[0]`` devices form group 0, and so on."""
        if len(group_powers) != len(group_sizes):
            raise ValueError("group_powers and group_sizes differ in length")
        assignment = []
        for j, n in enumerate(group_sizes):
            assignment.extend([j] * int(n))
        return cls(tuple(group_powers), tuple(assignment))

    @property
    def K(self) -> int:
        return len(self.assignment)

    @property
    def n_groups(self) -> int:
        return len(self.group_powers)

    @property
    def is_homogeneous(self) -> bool:
        return self.n_groups == 1

    @property
    def device_powers(self) -> np.ndarray:
        return np.asarray(self.group_powers)[list(self.assignment)]

    @property
    def normalization(self) -> np.ndarray:
        """Diagonal of the receiver normalization matrix, 1/P_j per device."""
        return 1.0 / self.device_powers

    @property
    def total_power(self) -> float:
        return float(self.device_powers.sum())


@dataclass(frozen=True)
class ActivityVector:
    a: np.ndarray
    true_rate: float = float("nan")

    def __post_init__(self):
        a = np.asarray(self.a)
        if a.ndim != 1 or not np.all((a == 0) | (a == 1)):
            raise ValueError("activity must be a 1-D vector of bits")
        object.__setattr__(self, "a", a.astype(np.uint8))

    @property
    def K(self) -> int:
        return self.a.shape[0]

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.a)


@dataclass(frozen=True)
class SymbolFrame:
    """K x Ns symbols over {-1, 0, +1}; inactive devices have all-zero rows."""

    B: np.ndarray

    def __post_init__(self):
        B = np.asarray(self.B)
        if B.ndim != 2:
            raise ValueError("symbol matrix must be 2-D (K, Ns)")
        if not np.all(np.isin(B, (-1, 0, 1))):
            raise ValueError("symbols must come from {-1, 0, +1}")
        object.__setattr__(self, "B", B.astype(np.int8))

    @property
    def Ns(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class ChannelState:
    G: np.ndarray
    noise_var: float = 0.0

    def __post_init__(self):
        G = np.asarray(self.G, dtype=complex)
        if G.ndim != 2:
            raise ValueError("channel matrix must be 2-D (M, K)")
        if self.noise_var < 0:
            raise ValueError("noise variance must be non-negative")
        object.__setattr__(self, "G", G)

    @property
    def M(self) -> int:
        return self.G.shape[0]

    @property
    def K(self) -> int:
        return self.G.shape[1]


@dataclass(frozen=True)
class PacketFrame:
    activity: ActivityVector
    symbols: SymbolFrame
    received: np.ndarray  # (M, Nc, Ns)
    channel: ChannelState

    def __post_init__(self):
        M, K = self.channel.G.shape
        if self.received.ndim != 3 or self.received.shape[0] != M:
            raise ValueError("received block must be shaped (M, Nc, Ns)")
        if self.received.shape[2] != self.symbols.Ns or self.symbols.B.shape[0] != K:
            raise ValueError("received block, symbols and channel disagree on dimensions")


def gen_spreading(K: int, Nc: int, seed=None) -> SpreadingMatrix:
    """Draw i.i.d. equiprobable +-1 signature codes, reproducible under ``seed``."""
    check_positive_int(K, "K")
    check_positive_int(Nc, "Nc")
    rng = np.random.default_rng(seed)
    return SpreadingMatrix(2 * rng.integers(0, 2, size=(Nc, K), dtype=np.int8) - 1)


def sample_activity(K: int, Pmax: float, rng: np.random.Generator,
                    rate: Optional[float] = None) -> ActivityVector:
    """Draw one packet's activity pattern.

    The packet's rate is uniform on ``[0, Pmax]`` unless ``rate`` pins it,
    then each device is active independently with that probability.
    """
    check_positive_int(K, "K")
    check_probability(Pmax, "Pmax")
    if rate is None:
        rate = rng.uniform(0.0, Pmax)
    else:
        check_probability(rate, "rate")
    a = (rng.random(K) < rate).astype(np.uint8)
    return ActivityVector(a, float(rate))


def sample_symbols(activity: ActivityVector, Ns: int, rng: np.random.Generator) -> SymbolFrame:
    check_positive_int(Ns, "Ns")
    bpsk = 2 * rng.integers(0, 2, size=(activity.K, Ns), dtype=np.int8) - 1
    return SymbolFrame(bpsk * activity.a[:, None].astype(np.int8))


def sample_channel(M: int, K: int, coeff_var: float, rng: np.random.Generator,
                   noise_var: float = 0.0) -> ChannelState:
    """Rayleigh block fading: g ~ CN(0, coeff_var), i.i.d. over antennas and devices."""
    check_positive_int(M, "M")
    check_positive_int(K, "K")
    if not coeff_var > 0:
        raise ValueError(f"coefficient variance must be positive, got {coeff_var}")
    scale = np.sqrt(coeff_var / 2.0)
    G = scale * (rng.standard_normal((M, K)) + 1j * rng.standard_normal((M, K)))
    return ChannelState(G, noise_var)


def build_phi(channel: ChannelState, codes: SpreadingMatrix) -> np.ndarray:
    """Equivalent dictionaries, shape (M, Nc, K); column k of slice m is g_{m,k} c_k."""
    if channel.K != codes.K:
        raise ValueError(f"channel has {channel.K} devices but codes have {codes.K}")
    return codes.codes[None, :, :] * channel.G[:, None, :]


def transmit(codes: SpreadingMatrix, channel: ChannelState, symbols: SymbolFrame,
             powers: PowerProfile, rng: Optional[np.random.Generator] = None,
             activity: Optional[ActivityVector] = None) -> PacketFrame:
    """Pass one packet through the channel: Y_m = Phi_m diag(sqrt(P)) B + W_m."""
    K = codes.K
    if symbols.B.shape[0] != K or powers.K != K or channel.K != K:
        raise ValueError("codes, channel, symbols and powers disagree on the device count")
    phi = build_phi(channel, codes)
    X = np.sqrt(powers.device_powers)[:, None] * symbols.B
    Y = phi @ X
    if channel.noise_var > 0:
        if rng is None:
            raise ValueError("a generator is required when noise_var > 0")
        Y = Y + complex_noise(rng, Y.shape, channel.noise_var)
    if activity is None:
        activity = ActivityVector(np.any(symbols.B != 0, axis=1).astype(np.uint8))
    return PacketFrame(activity, symbols, Y, channel)


def complex_noise(rng: np.random.Generator, shape, var: float) -> np.ndarray:
    s = np.sqrt(var / 2.0)
    return s * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def snr_to_noise_var(gamma_db: float, powers: PowerProfile, pa_nominal: float) -> float:
    """Noise variance giving SNR ``gamma_db`` for average transmit power ``pa_nominal * P_t``."""
    if not 0 < pa_nominal <= 1:
        raise ValueError(f"nominal activity rate must lie in (0, 1], got {pa_nominal}")
    signal = pa_nominal * powers.total_power
    return signal / 10.0 ** (gamma_db / 10.0)


def frame_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Generator for frame ``index`` of ``stream``; independent of generation order."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, index)))


@dataclass
class FrameBatch:
    """A batch of frames sharing codes, powers, dimensions and noise level.

    Arrays carry the frame index first: ``Y`` is (n, M, Nc, Ns), ``G`` is
    (n, M, K), ``activity`` is (n, K), ``symbols`` is (n, K, Ns).
    """

    Y: np.ndarray
    G: np.ndarray
    activity: np.ndarray
    symbols: np.ndarray
    true_rate: np.ndarray
    noise_var: float
    codes: SpreadingMatrix
    powers: PowerProfile
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.Y.shape[0]
        for name in ("G", "activity", "symbols", "true_rate"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} holds a different number of frames than Y")
        if self.Y.ndim != 4 or self.G.ndim != 3:
            raise ValueError("Y must be (n, M, Nc, Ns) and G must be (n, M, K)")
        if self.Y.shape[2] != self.codes.Nc or self.G.shape[2] != self.codes.K:
            raise ValueError("frame arrays disagree with the spreading matrix")

    def __len__(self) -> int:
        return self.Y.shape[0]

    @property
    def shape(self):
        n, M, Nc, Ns = self.Y.shape
        return dict(n=n, M=M, Nc=Nc, Ns=Ns, K=self.codes.K)

    def phi(self) -> np.ndarray:
        """All dictionaries, shape (n, M, Nc, K)."""
        return self.codes.codes[None, None, :, :] * self.G[:, :, None, :]

    def frame(self, i: int) -> PacketFrame:
        return PacketFrame(
            ActivityVector(self.activity[i], float(self.true_rate[i])),
            SymbolFrame(self.symbols[i]),
            self.Y[i],
            ChannelState(self.G[i], self.noise_var),
        )

    def subset(self, idx) -> "FrameBatch":
        idx = np.asarray(idx)
        return FrameBatch(self.Y[idx], self.G[idx], self.activity[idx], self.symbols[idx],
                          self.true_rate[idx], self.noise_var, self.codes, self.powers,
                          dict(self.meta))

    @classmethod
    def concatenate(cls, batches: Sequence["FrameBatch"]) -> "FrameBatch":
        first = batches[0]
        return cls(
            np.concatenate([b.Y for b in batches]),
            np.concatenate([b.G for b in batches]),
            np.concatenate([b.activity for b in batches]),
            np.concatenate([b.symbols for b in batches]),
            np.concatenate([b.true_rate for b in batches]),
            first.noise_var, first.codes, first.powers, dict(first.meta),
        )


def simulate_frames(n: int, codes: SpreadingMatrix, powers: PowerProfile, M: int, Ns: int,
                    Pmax: float, noise_var: float, seed: int, *, stream: int = 0,
                    start: int = 0, rate: Optional[float] = None,
                    coeff_var: float = 1.0) -> FrameBatch:
    """Generate frames ``start .. start+n-1`` of ``stream``.

    ``rate`` fixes the activity rate of every packet (used for activity-rate
    sweeps); otherwise each packet draws its own rate on ``[0, Pmax]``.
    """
    if n < 0:
        raise ValueError("frame count must be non-negative")
    K, Nc = codes.K, codes.Nc
    if powers.K != K:
        raise ValueError("power profile and codes disagree on the device count")
    Y = np.empty((n, M, Nc, Ns), dtype=complex)
    G = np.empty((n, M, K), dtype=complex)
    act = np.empty((n, K), dtype=np.uint8)
    sym = np.empty((n, K, Ns), dtype=np.int8)
    rates = np.empty(n)
    for i in range(n):
        rng = frame_rng(seed, stream, start + i)
        activity = sample_activity(K, Pmax, rng, rate=rate)
        symbols = sample_symbols(activity, Ns, rng)
        channel = sample_channel(M, K, coeff_var, rng, noise_var=noise_var)
        frame = transmit(codes, channel, symbols, powers, rng, activity=activity)
        Y[i], G[i], act[i], sym[i], rates[i] = (frame.received, channel.G, activity.a,
                                                symbols.B, activity.true_rate)
    meta = dict(seed=seed, stream=stream, start=start)
    return FrameBatch(Y, G, act, sym, rates, noise_var, codes, powers, meta)
