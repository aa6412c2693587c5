"""Attack models and Ursula's cheat-detection statistics.

Two dishonest behaviours are modelled. A dishonest Dave replaces pulses by
steering states that either raise or lower the chance of a conclusive
outcome; the price is that Ursula's bits become uncorrelated with his
records. A dishonest Ursula replaces her measurement with optimal
unambiguous discrimination of the disclosed state pair.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .codec import (ParityCheckMatrix, RateEstimationError, Thresholds, UncorrelatedParityError,
                    decode_table, estimate_rates, mismatch_probability, parity_row_stats)
from .design import CodeEvaluation, exact_ek_distribution, merge_atoms, tag_pattern_probs
from .states import STEER_MAX, STEER_MIN, StateGeometry, born_measure, steering_angle


class AttackRole(str, Enum):
    DISHONEST_DAVE = "dishonest_dave"
    USD_URSULA = "usd_ursula"


class SteeringMode(str, Enum):
    MAXIMIZE = "maximize_pc_on_target_block"
    MINIMIZE = "minimize_pc_global"


@dataclass(frozen=True)
class AttackConfig:
    role: AttackRole = AttackRole.DISHONEST_DAVE
    dave_mode: SteeringMode | None = SteeringMode.MAXIMIZE
    target_block: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "role", AttackRole(self.role))
        if self.dave_mode is not None:
            object.__setattr__(self, "dave_mode", SteeringMode(self.dave_mode))
        if self.target_block is not None and self.dave_mode is not SteeringMode.MAXIMIZE:
            raise ValueError("a target block only applies to the maximize mode")
        if self.role is AttackRole.DISHONEST_DAVE and self.dave_mode is None:
            raise ValueError("a dishonest Dave needs a steering mode")


# --------------------------------------------------------------------------
# Steering attack
# --------------------------------------------------------------------------

def _steer_flag(mode) -> int:
    return STEER_MAX if SteeringMode(mode) is SteeringMode.MAXIMIZE else STEER_MIN


def steering_statistics(geometry: StateGeometry, mode) -> tuple[float, float]:
    """(conclusive probability, correlation of Ursula's bit with Dave's records).

    The steering state sits midway between two same-type states, so the
    basis bit Ursula infers carries nothing about Dave's raw bit.
    """
    half = geometry.theta / 2.0
    if SteeringMode(mode) is SteeringMode.MAXIMIZE:
        return math.cos(half) ** 2, 0.0
    return math.sin(half) ** 2, 0.0


def all_conclusive_probability(geometry: StateGeometry, k: int, mode=SteeringMode.MAXIMIZE
                               ) -> float:
    return steering_statistics(geometry, mode)[0] ** k


def steering_sample(geometry: StateGeometry, mode, n: int, rng: np.random.Generator):
    """Sample steered pulses: Dave's raw bits, declared selectors, Ursula's tags and bits."""
    a = rng.integers(0, 2, size=n, dtype=np.uint8)
    b = rng.integers(0, 2, size=n, dtype=np.uint8)
    angles = steering_angle(b, np.full(n, _steer_flag(mode)), geometry.theta)
    meas = born_measure(angles, rng, geometry.theta)
    conclusive, bits = meas.interpret(b)
    return a, b, conclusive, bits


@dataclass
class AttackReport:
    mode: SteeringMode
    p_conclusive: float
    p_all_conclusive: float
    success_analytic: float
    success_mc: float | None
    success_stderr: float | None
    trials: int
    tail_threshold: float
    tail_attack: float
    tail_honest: float
    ek_given_all_conclusive: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mode"] = self.mode.value
        return out


def _all_conclusive_row(k: int) -> int:
    return (1 << k) - 1


def steered_block_distribution(H: ParityCheckMatrix, p_attack: float, rates):
    """P(e_k) for a block whose bits are steered and whose syndrome Dave cannot predict.

    Ursula's bits and Dave's syndrome are independent and uniform, so every
    error syndrome is equally likely. Returns ``(table, P)`` with ``P`` over
    (tag pattern, error syndrome).
    """
    table = decode_table(H, rates)
    P = tag_pattern_probs(H.k, p_attack)[:, None] * np.full((1, 1 << H.r), 2.0 ** -H.r)
    return table, P


def conditional_tail(H: ParityCheckMatrix, rates, threshold: float, honest: bool) -> float:
    """P(e_k >= threshold | every bit of the block conclusive)."""
    table = decode_table(H, rates)
    row = _all_conclusive_row(H.k)
    ek = table.e_k[row]
    if honest:
        w = table.total[row]
    else:
        w = np.full(1 << H.r, 1.0)
    return float(w[ek >= threshold].sum() / w.sum())


def simulate_dave_attack(H: ParityCheckMatrix, geometry: StateGeometry, rates,
                         config: AttackConfig = AttackConfig(),
                         thresholds: Thresholds = Thresholds(), trials: int = 0,
                         tail_threshold: float | None = None, seed=None,
                         pulse_level: bool = False) -> AttackReport:
    """Success statistics of a steering Dave against one block.

    ``rates`` are the honest (p_c, e_c, e_i) Ursula decodes with. The
    analytic part is exact; ``trials > 0`` adds a Monte Carlo estimate in
    which each trial samples a steered block, a uniformly random syndrome,
    and decodes it. With ``pulse_level`` the tags come from Born-rule
    measurement of the steering states rather than from their marginal.
    """
    mode = config.dave_mode or SteeringMode.MAXIMIZE
    _, e_c, e_i = rates
    p_att, _ = steering_statistics(geometry, mode)
    table, P = steered_block_distribution(H, p_att, (e_c, e_i))
    success = float(P[table.e_k <= thresholds.t_U].sum())
    if tail_threshold is None:
        tail_threshold = default_anomaly_threshold(H.k, geometry.theta_deg)
    row = _all_conclusive_row(H.k)
    vals, dist = merge_atoms(table.e_k[row], np.full(1 << H.r, 2.0 ** -H.r))

    mc = se = None
    if trials > 0:
        rng = np.random.default_rng(seed)
        k = H.k
        if pulse_level:
            _, _, conc, u = steering_sample(geometry, mode, trials * k, rng)
            conc, u = conc.reshape(trials, k), u.reshape(trials, k)
        else:
            conc = rng.random((trials, k)) < p_att
            u = rng.integers(0, 2, size=(trials, k), dtype=np.uint8)
        received = rng.integers(0, 2, size=(trials, H.r), dtype=np.uint8)
        _, ek = table.decode(u, conc, received)
        hits = ek <= thresholds.t_U
        mc = float(hits.mean())
        se = float(math.sqrt(max(mc * (1 - mc), 1.0 / trials) / trials))
    return AttackReport(
        mode=SteeringMode(mode), p_conclusive=p_att, p_all_conclusive=p_att ** H.k,
        success_analytic=success, success_mc=mc, success_stderr=se, trials=trials,
        tail_threshold=tail_threshold,
        tail_attack=conditional_tail(H, (e_c, e_i), tail_threshold, honest=False),
        tail_honest=conditional_tail(H, (e_c, e_i), tail_threshold, honest=True),
        ek_given_all_conclusive=list(zip(vals.tolist(), dist.tolist())))


# --------------------------------------------------------------------------
# Cheat detection
# --------------------------------------------------------------------------

OPERATING_POINTS = {(10, 35.6): 0.15, (9, 25.0): 0.055}


def default_anomaly_threshold(k: int, theta_deg: float) -> float:
    for (kk, th), value in OPERATING_POINTS.items():
        if kk == k and math.isclose(th, theta_deg, abs_tol=1e-6):
            return value
    return 0.15


@dataclass(frozen=True)
class AnomalyConfig:
    """``max_flags`` anomalous all-conclusive blocks are tolerated before aborting."""

    ek_threshold: float = 0.15
    min_rows: int = 20
    max_flags: int = 0
    check_mismatch: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AnomalyConfig":
        return cls(**data)

    @classmethod
    def for_code(cls, k: int, theta_deg: float, **kw) -> "AnomalyConfig":
        return cls(ek_threshold=default_anomaly_threshold(k, theta_deg), **kw)


@dataclass
class AnomalyVerdict:
    ok: bool
    reason: str = ""
    flagged_blocks: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    rows_conclusive: int = 0
    mismatch_conclusive: float | None = None
    expected_conclusive: float | None = None


def anomaly_detector(H: ParityCheckMatrix, local, received, conclusive, e_k, rates,
                     config: AnomalyConfig = AnomalyConfig()) -> AnomalyVerdict:
    """Post-correction checks run before the shift is sent.

    Test 1 compares the parity mismatch rate of rows whose support is
    entirely conclusive with its honest expectation; an uncorrelated Dave
    pushes it to 1/2, and the test fires once the observed rate passes the
    midpoint. The rate estimator's own uncorrelated-parity signal also
    fires it. Test 2 flags all-conclusive blocks whose e_k reaches the
    anomaly threshold.
    """
    e_c, e_i = rates
    conc = np.asarray(conclusive, dtype=bool).reshape(-1, H.k)
    e_k = np.asarray(e_k, dtype=float).ravel()
    if conc.shape[0] == 0:
        return AnomalyVerdict(ok=True, reason="no blocks observed")

    verdict = AnomalyVerdict(ok=True)
    if config.check_mismatch:
        w_c, w_i, miss = parity_row_stats(H, local, received, conc)
        strat = (w_i == 0) & (w_c > 0)
        n_a = int(strat.sum())
        verdict.rows_conclusive = n_a
        if n_a >= config.min_rows:
            frac = float(miss[strat].mean())
            expected = float(np.mean([mismatch_probability(e_c, e_i, int(w), 0)
                                      for w in w_c[strat]]))
            verdict.mismatch_conclusive, verdict.expected_conclusive = frac, expected
            if frac > (expected + 0.5) / 2.0:
                verdict.ok = False
                verdict.reason = (f"parity mismatch {frac:.3f} on conclusive rows, "
                                  f"expected {expected:.3f}")
                return verdict
            try:
                estimate_rates(H, local, received, conc, min_rows=config.min_rows)
            except UncorrelatedParityError as exc:
                verdict.ok = False
                verdict.reason = str(exc)
                return verdict
            except RateEstimationError:
                pass

    all_conc = conc.all(axis=1)
    flagged = np.flatnonzero(all_conc & (e_k >= config.ek_threshold))
    verdict.flagged_blocks = flagged
    if flagged.size > config.max_flags:
        verdict.ok = False
        verdict.reason = (f"{flagged.size} all-conclusive block(s) with "
                          f"e_k >= {config.ek_threshold}")
    return verdict


def honest_all_conclusive_blocks(H: ParityCheckMatrix, rates, n: int,
                                 rng: np.random.Generator):
    """Sample n honest all-conclusive blocks: Ursula's bits, Dave's syndromes, e_k."""
    _, e_c, e_i = rates
    d = rng.integers(0, 2, size=(n, H.k), dtype=np.uint8)
    err = (rng.random((n, H.k)) < e_c).astype(np.uint8)
    u = d ^ err
    syn = ((d.astype(np.int64) @ H.rows.T.astype(np.int64)) % 2).astype(np.uint8)
    conc = np.ones((n, H.k), dtype=bool)
    _, ek = decode_table(H, (e_c, e_i)).decode(u, conc, syn)
    return u, syn, ek


# --------------------------------------------------------------------------
# Unambiguous state discrimination by Ursula
# --------------------------------------------------------------------------

def usd_statistics(geometry: StateGeometry) -> tuple[float, float]:
    """Conclusive probability and inconclusive error rate of optimal two-state USD."""
    return 1.0 - math.cos(geometry.theta), 0.5


def usd_rates(geometry: StateGeometry, rates, e_c_usd: float | None = None
              ) -> tuple[float, float, float]:
    p_usd, e_i_usd = usd_statistics(geometry)
    e_c = rates[1] if e_c_usd is None else e_c_usd
    return p_usd, e_c, e_i_usd


def evaluate_usd_attack(H: ParityCheckMatrix, geometry: StateGeometry, rates, N: int,
                        thresholds: Thresholds = Thresholds(), e_c_usd: float | None = None
                        ) -> float:
    """Expected known bits per query when Ursula measures with USD."""
    ev = exact_ek_distribution(H, usd_rates(geometry, rates, e_c_usd), thresholds)
    return ev.nbar(N)


# --------------------------------------------------------------------------
# Asymmetric error-rate estimates
# --------------------------------------------------------------------------

@dataclass
class AsymmetricReport:
    source_only: CodeEvaluation
    actual: CodeEvaluation
    N: int

    def summary(self) -> dict:
        return {
            "source_only": {"rates": list(self.source_only.rates),
                            "nbar": self.source_only.nbar(self.N),
                            "mbar": self.source_only.mbar},
            "actual": {"rates": list(self.actual.rates),
                       "nbar": self.actual.nbar(self.N), "mbar": self.actual.mbar},
        }


def asymmetric_rate_scenario(source_only_rates, actual_rates, H: ParityCheckMatrix, N: int,
                             thresholds: Thresholds = Thresholds()) -> AsymmetricReport:
    """The code evaluated at Dave's source-side rates and at Ursula's actual rates."""
    return AsymmetricReport(source_only=exact_ek_distribution(H, source_only_rates, thresholds),
                            actual=exact_ek_distribution(H, actual_rates, thresholds), N=N)


def steering_bit_correlation(geometry: StateGeometry, mode, n: int, rng: np.random.Generator
                             ) -> tuple[float, float]:
    """Sample correlation between Dave's raw bit and Ursula's inferred bit, with its stderr."""
    a, _, _, bits = steering_sample(geometry, mode, n, rng)
    x = 2.0 * a - 1.0
    y = 2.0 * bits - 1.0
    return float(np.mean(x * y)), 1.0 / math.sqrt(n)

