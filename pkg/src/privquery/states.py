"""Four-state geometry, measurement statistics and pulse sampling.

The four states live in a real two-dimensional plane. With ``theta`` the
angle between the 0-basis and the 1-basis::

    psi_0 = 0          phi_0 = 90 deg
    psi_1 = theta      phi_1 = theta + 90 deg

A state's basis index is the raw-key bit; the psi/phi selector is the
second string Dave discloses after sifting. Ursula measures in a basis
``m`` and records whether she saw the psi-type or the phi-type vector of
that basis. Once the selector ``b`` is public, an outcome whose type differs
from ``b`` is conclusive (the state cannot be the one she saw, so it came
from the other basis: bit ``1 - m``); an outcome of the same type is
inconclusive and she guesses bit ``m``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

PSI, PHI = 0, 1

STEER_NONE, STEER_MAX, STEER_MIN = 0, 1, 2


class Tag(str, Enum):
    CONCLUSIVE = "conclusive"
    INCONCLUSIVE = "inconclusive"


class ChannelError(ValueError):
    """Channel parameters outside the protocol's operating range."""


@dataclass(frozen=True)
class StateGeometry:
    theta_deg: float

    def __post_init__(self):
        if not (0.0 < self.theta_deg < 90.0):
            raise ValueError(
                f"theta must lie strictly between 0 and 90 degrees, got {self.theta_deg}"
            )

    @property
    def theta(self) -> float:
        return math.radians(self.theta_deg)


def ideal_conclusive_prob(geometry: StateGeometry) -> float:
    return math.sin(geometry.theta) ** 2 / 2.0


def ideal_inconclusive_error(geometry: StateGeometry) -> float:
    c2 = math.cos(geometry.theta) ** 2
    return c2 / (1.0 + c2)


def state_angle(basis, state, theta: float):
    """Angle (radians) of the prepared vector for basis bit(s) and psi/phi bit(s)."""
    return np.asarray(basis) * theta + np.asarray(state) * (math.pi / 2)


@dataclass(frozen=True)
class ChannelModel:
    """Either measured statistics (``direct``) or a noise model (``physical``).

    Direct mode stands for the post-sifting view: every pulse it produces
    was detected. Physical mode mixes the ideal measurement with uniformly
    random outcomes, from depolarisation with probability
    ``depolarizing_prob`` and from dark counts making up
    ``dark_count_fraction`` of the clicks, and loses pulses with
    probability ``1 - transmission``.
    """

    mode: str = "direct"
    p_c: float | None = None
    e_c: float | None = None
    e_i: float | None = None
    theta_deg: float | None = None
    transmission: float = 1.0
    depolarizing_prob: float = 0.0
    dark_count_fraction: float = 0.0
    mu_label: str | None = None

    def __post_init__(self):
        if self.mode == "direct":
            if None in (self.p_c, self.e_c, self.e_i):
                raise ChannelError("direct mode needs p_c, e_c and e_i")
            if not 0.0 < self.p_c < 1.0:
                raise ChannelError(f"p_c must be in (0, 1), got {self.p_c}")
            if not 0.0 <= self.e_c < 0.5:
                raise ChannelError(f"e_c must be in [0, 1/2), got {self.e_c}")
            if not 0.0 <= self.e_i <= 0.5:
                raise ChannelError(f"e_i must be in [0, 1/2], got {self.e_i}")
            if self.transmission != 1.0:
                raise ChannelError("direct mode is post-sifting; transmission is fixed at 1")
        elif self.mode == "physical":
            if self.theta_deg is None:
                raise ChannelError("physical mode needs theta_deg")
            StateGeometry(self.theta_deg)
            if not 0.0 < self.transmission <= 1.0:
                raise ChannelError(f"transmission must be in (0, 1], got {self.transmission}")
            if not 0.0 <= self.depolarizing_prob < 1.0:
                raise ChannelError("depolarizing_prob must be in [0, 1)")
            if not 0.0 <= self.dark_count_fraction < 1.0:
                raise ChannelError("dark_count_fraction must be in [0, 1)")
        else:
            raise ChannelError(f"unknown channel mode {self.mode!r}")

    @classmethod
    def direct(cls, p_c: float, e_c: float, e_i: float, mu_label: str | None = None):
        return cls(mode="direct", p_c=p_c, e_c=e_c, e_i=e_i, mu_label=mu_label)

    @classmethod
    def physical(cls, theta_deg: float, transmission: float = 1.0,
                 depolarizing_prob: float = 0.0, dark_count_fraction: float = 0.0,
                 mu_label: str | None = None):
        return cls(mode="physical", theta_deg=theta_deg, transmission=transmission,
                   depolarizing_prob=depolarizing_prob,
                   dark_count_fraction=dark_count_fraction, mu_label=mu_label)

    @property
    def randomization(self) -> float:
        """Probability that a detected outcome carries no information about the state."""
        return 1.0 - (1.0 - self.depolarizing_prob) * (1.0 - self.dark_count_fraction)

    def to_dict(self) -> dict:
        if self.mode == "direct":
            out = {"mode": "direct", "p_c": self.p_c, "e_c": self.e_c, "e_i": self.e_i}
        else:
            out = {"mode": "physical", "theta_deg": self.theta_deg,
                   "transmission": self.transmission,
                   "depolarizing_prob": self.depolarizing_prob,
                   "dark_count_fraction": self.dark_count_fraction}
        if self.mu_label is not None:
            out["mu_label"] = self.mu_label
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ChannelModel":
        data = dict(data)
        mode = data.pop("mode", "direct")
        return cls(mode=mode, **data)


def induced_statistics(channel: ChannelModel) -> tuple[float, float, float]:
    """(p_c, e_c, e_i) seen by an honest Ursula on detected pulses."""
    if channel.mode == "direct":
        return channel.p_c, channel.e_c, channel.e_i
    geo = StateGeometry(channel.theta_deg)
    lam = channel.randomization
    s2 = math.sin(geo.theta) ** 2
    c2 = math.cos(geo.theta) ** 2
    p_c = (1.0 - lam) * s2 / 2.0 + lam / 2.0
    e_c = (lam / 4.0) / p_c
    e_i = ((1.0 - lam) * c2 / 2.0 + lam / 4.0) / (1.0 - p_c)
    if e_c >= 0.5:
        raise ChannelError(f"noise model yields e_c = {e_c:.4f} >= 1/2")
    return p_c, e_c, e_i


def fit_physical_channel(theta_deg: float, target: tuple[float, float, float]):
    """Least-squares fit of (depolarizing_prob, dark_count_fraction) to measured statistics.

    Returns the fitted channel and the residual vector (model - target).
    Both noise sources randomise the outcome, so only their combination is
    identifiable; the fit puts it all on depolarisation.
    """
    from scipy.optimize import minimize_scalar

    target = np.asarray(target, dtype=float)

    def residual(lam):
        ch = ChannelModel.physical(theta_deg, depolarizing_prob=lam)
        return np.asarray(induced_statistics(ch)) - target

    best = minimize_scalar(lambda lam: float(np.sum(residual(lam) ** 2)),
                           bounds=(0.0, 0.999), method="bounded",
                           options={"xatol": 1e-10})
    ch = ChannelModel.physical(theta_deg, depolarizing_prob=float(best.x))
    return ch, residual(best.x)


@dataclass
class PulseRecord:
    dave_basis: int
    dave_state: int
    detected: bool
    ursula_basis: int | None = None
    outcome_state: int | None = None
    conclusive: bool | None = None
    ursula_bit: int | None = None
    tag: Tag | None = None


@dataclass
class Measurements:
    """Ursula's raw records for a batch of detected pulses, before disclosure."""

    basis: np.ndarray
    outcome: np.ndarray

    def interpret(self, declared_state: np.ndarray):
        """Apply the identification rule once the psi/phi string is public.

        Returns ``(conclusive, bits)``.
        """
        conclusive = self.outcome != np.asarray(declared_state, dtype=np.uint8)
        bits = np.where(conclusive, 1 - self.basis, self.basis).astype(np.uint8)
        return conclusive, bits


def sample_detection(channel: ChannelModel, n: int, rng: np.random.Generator) -> np.ndarray:
    if channel.transmission >= 1.0:
        return np.ones(n, dtype=bool)
    return rng.random(n) < channel.transmission


def born_measure(angles, rng: np.random.Generator, theta: float,
                 randomization: float = 0.0) -> Measurements:
    """Projective measurement of real-plane states in a uniformly random basis."""
    angles = np.asarray(angles, dtype=float)
    n = angles.shape[0]
    basis = rng.integers(0, 2, size=n, dtype=np.uint8)
    u = rng.random(n)
    p_psi = np.cos(angles - basis * theta) ** 2
    outcome = (u >= p_psi).astype(np.uint8)
    if randomization > 0.0:
        noisy = rng.random(n) < randomization
        coin = rng.integers(0, 2, size=n, dtype=np.uint8)
        outcome = np.where(noisy, coin, outcome).astype(np.uint8)
    return Measurements(basis=basis, outcome=outcome)


def steering_angle(declared_state, mode, theta: float):
    """Dishonest-database state lying midway between a pair of same-type states.

    ``STEER_MIN`` sits between the two states of the declared type, which
    makes a conclusive outcome unlikely in either basis; ``STEER_MAX`` sits
    between the opposite-type pair.
    """
    declared_state = np.asarray(declared_state, dtype=np.int64)
    flip = (np.asarray(mode) == STEER_MAX).astype(np.int64)
    return theta / 2.0 + (declared_state ^ flip) * (math.pi / 2)


def measure_pulses(channel: ChannelModel, dave_basis, dave_state,
                   rng: np.random.Generator, steer=None, theta_deg: float | None = None
                   ) -> Measurements:
    """Ursula's measurement records for detected pulses.

    ``steer`` optionally marks pulses replaced by steering states; those are
    measured with the ideal Born rule at ``theta_deg`` (taken from the
    channel in physical mode).
    """
    a = np.asarray(dave_basis, dtype=np.uint8)
    b = np.asarray(dave_state, dtype=np.uint8)
    n = a.shape[0]
    if channel.mode == "direct":
        p_c, e_c, e_i = induced_statistics(channel)
        u1 = rng.random(n)
        u2 = rng.random(n)
        conclusive = u1 < p_c
        wrong = u2 < np.where(conclusive, e_c, e_i)
        bit = a ^ wrong.astype(np.uint8)
        basis = np.where(conclusive, 1 - bit, bit).astype(np.uint8)
        outcome = np.where(conclusive, 1 - b, b).astype(np.uint8)
        meas = Measurements(basis=basis, outcome=outcome)
    else:
        theta = StateGeometry(channel.theta_deg).theta
        meas = born_measure(state_angle(a, b, theta), rng, theta, channel.randomization)
    if steer is not None:
        steer = np.asarray(steer)
        idx = np.flatnonzero(steer != STEER_NONE)
        if idx.size:
            th_deg = theta_deg if theta_deg is not None else channel.theta_deg
            if th_deg is None:
                raise ChannelError("steering needs the state geometry")
            theta = StateGeometry(th_deg).theta
            angles = steering_angle(b[idx], steer[idx], theta)
            sub = born_measure(angles, rng, theta)
            meas.basis[idx] = sub.basis
            meas.outcome[idx] = sub.outcome
    return meas


def sample_pulse(channel: ChannelModel, dave_basis: int, dave_state: int,
                 rng: np.random.Generator) -> PulseRecord:
    detected = bool(sample_detection(channel, 1, rng)[0])
    rec = PulseRecord(dave_basis=int(dave_basis), dave_state=int(dave_state), detected=detected)
    if not detected:
        return rec
    meas = measure_pulses(channel, [dave_basis], [dave_state], rng)
    conclusive, bits = meas.interpret([dave_state])
    rec.ursula_basis = int(meas.basis[0])
    rec.outcome_state = int(meas.outcome[0])
    rec.conclusive = bool(conclusive[0])
    rec.ursula_bit = int(bits[0])
    rec.tag = Tag.CONCLUSIVE if rec.conclusive else Tag.INCONCLUSIVE
    return rec


@dataclass
class PulseBatch:
    dave_basis: np.ndarray
    dave_state: np.ndarray
    detected: np.ndarray
    ursula_basis: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8))
    conclusive: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    ursula_bit: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8))


def sample_pulses(channel: ChannelModel, dave_basis, dave_state,
                  rng: np.random.Generator) -> PulseBatch:
    """Vectorised :func:`sample_pulse`; measurement fields cover detected pulses only."""
    a = np.asarray(dave_basis, dtype=np.uint8)
    b = np.asarray(dave_state, dtype=np.uint8)
    detected = sample_detection(channel, a.shape[0], rng)
    meas = measure_pulses(channel, a[detected], b[detected], rng)
    conclusive, bits = meas.interpret(b[detected])
    return PulseBatch(dave_basis=a, dave_state=b, detected=detected,
                      ursula_basis=meas.basis, conclusive=conclusive, ursula_bit=bits)
