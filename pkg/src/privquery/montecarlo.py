"""Monte Carlo experiments over many private queries.

Each query samples its own measured statistics (when parameter variation
is on), generates one oblivious key and records how many bits Ursula knows
and what fraction of the database she has partial information on. Three
sampling paths produce the same distribution at very different cost:

``exact``
    Draws the known/partial/unknown counts from a multinomial over the exact
    per-block class probabilities.
``blocks``
    Samples each block's tag pattern and error vector and decodes it.
``pulses``
    Runs the full two-party protocol engine.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bits import all_vectors, rows_to_ints
from .codec import (H_25, H_35_6, DecodeTable, ParityCheckMatrix, Thresholds, classify_array,
                    compute_syndrome, decode_table)
from .design import joint_weights
from .states import ChannelModel, StateGeometry

METHODS = ("exact", "blocks", "pulses")


@dataclass(frozen=True)
class Variation:
    """Per-query Gaussian spreads (absolute units; theta in degrees)."""

    p_c: float = 0.0
    e_c: float = 0.0
    e_i: float = 0.0
    theta_deg: float = 0.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 0.0:
                raise ValueError(f"spread for {name} must be non-negative")

    @property
    def active(self) -> bool:
        return any(v > 0.0 for v in asdict(self).values())


@dataclass(frozen=True)
class Scenario:
    name: str
    H: ParityCheckMatrix
    theta_deg: float
    rates: tuple[float, float, float]
    N: int = 10**6
    thresholds: Thresholds = Thresholds()
    variation: Variation | None = None
    queries: int = 1000
    seed: int = 0
    method: str = "exact"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.queries < 0 or self.N < 1:
            raise ValueError("need queries >= 0 and N >= 1")
        ChannelModel.direct(*self.rates)
        StateGeometry(self.theta_deg)

    def params(self, rates=None, theta_deg=None):
        from .protocol.engine import ProtocolParams

        th = self.theta_deg if theta_deg is None else theta_deg
        return ProtocolParams(geometry=StateGeometry(th), H=self.H, N=self.N,
                              channel=ChannelModel.direct(*(rates or self.rates)),
                              thresholds=self.thresholds, abort_after_failures=1)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "matrix": self.H.serialize(), "theta_deg": self.theta_deg,
            "rates": {"p_c": self.rates[0], "e_c": self.rates[1], "e_i": self.rates[2]},
            "N": self.N, "thresholds": {"t_U": self.thresholds.t_U, "t_D": self.thresholds.t_D},
            "variation": asdict(self.variation) if self.variation else None,
            "queries": self.queries, "seed": self.seed, "method": self.method,
        }


@dataclass(frozen=True)
class QueryMetrics:
    n: int
    m: float
    p_known: float
    p_partial: float
    rates: tuple[float, float, float]
    theta_deg: float
    errors: int = 0

    @property
    def failed(self) -> bool:
        return self.n == 0


@dataclass
class Report:
    scenario: Scenario
    metrics: list[QueryMetrics] = field(default_factory=list)

    @property
    def n(self) -> np.ndarray:
        return np.array([q.n for q in self.metrics], dtype=float)

    @property
    def m(self) -> np.ndarray:
        return np.array([q.m for q in self.metrics], dtype=float)

    @property
    def nbar(self) -> float:
        return float(self.n.mean()) if self.metrics else float("nan")

    @property
    def mbar(self) -> float:
        return float(self.m.mean()) if self.metrics else float("nan")

    @property
    def P0(self) -> float:
        if not self.metrics:
            return float("nan")
        return float(np.mean([q.failed for q in self.metrics]))

    def summary(self) -> dict:
        q = len(self.metrics)
        out = {"scenario": self.scenario.to_dict(), "queries": q}
        if q:
            n, m = self.n, self.m
            pk = np.array([x.p_known for x in self.metrics])
            out.update({
                "nbar": self.nbar, "n_sd": float(n.std(ddof=1)) if q > 1 else 0.0,
                "nbar_stderr": float(n.std(ddof=1) / math.sqrt(q)) if q > 1 else 0.0,
                "mbar": self.mbar, "m_sd": float(m.std(ddof=1)) if q > 1 else 0.0,
                "P0": self.P0, "P0_stderr": math.sqrt(self.P0 * (1 - self.P0) / q),
                "expected_nbar": float(self.scenario.N * pk.mean()),
                "expected_P0": float(np.mean([failure_probability(p, self.scenario.N)
                                              for p in pk])),
                "errors_in_known_bits": sum(x.errors for x in self.metrics),
            })
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def failure_probability(p_known: float, N: int) -> float:
    """Probability that none of N independent blocks becomes a known bit."""
    if not 0.0 <= p_known <= 1.0:
        raise ValueError("p_known must lie in [0, 1]")
    if p_known == 1.0:
        return 0.0 if N > 0 else 1.0
    return math.exp(N * math.log1p(-p_known))


def _clip_rates(p_c, e_c, e_i):
    eps = 1e-9
    return (float(np.clip(p_c, eps, 1.0 - eps)), float(np.clip(e_c, 0.0, 0.5 - eps)),
            float(np.clip(e_i, 0.0, 0.5)))


def sample_parameters(s: Scenario, rng: np.random.Generator):
    """One query's (rates, theta), each drawn independently and clipped to its valid range."""
    v = s.variation
    if v is None or not v.active:
        return tuple(float(x) for x in s.rates), s.theta_deg
    p_c, e_c, e_i = s.rates
    draw = rng.normal(size=4)
    rates = _clip_rates(p_c + v.p_c * draw[0], e_c + v.e_c * draw[1], e_i + v.e_i * draw[2])
    theta = float(np.clip(s.theta_deg + v.theta_deg * draw[3], 1e-6, 90.0 - 1e-6))
    return rates, theta


def _table(s: Scenario, rates) -> DecodeTable:
    if s.variation is None or not s.variation.active:
        return decode_table(s.H, (rates[1], rates[2]))
    return DecodeTable(s.H, (rates[1], rates[2]))


def class_masks(table: DecodeTable, thresholds: Thresholds):
    cls = classify_array(table.e_k, thresholds)
    return cls == 0, cls == 1


def _query_exact(s, rates, table, rng):
    P = joint_weights(table, rates[0])
    known, partial = class_masks(table, s.thresholds)
    pk, pp = float(P[known].sum()), float(P[partial].sum())
    counts = rng.multinomial(s.N, [pk, pp, max(0.0, 1.0 - pk - pp)])
    return int(counts[0]), counts[1] / s.N, pk, pp, 0


def sample_block_classes(H: ParityCheckMatrix, rates, thresholds: Thresholds, n: int,
                         rng: np.random.Generator, table: DecodeTable | None = None,
                         chunk: int = 1 << 18) -> tuple[np.ndarray, np.ndarray]:
    """Classes (0 known / 1 partial / 2 unknown) of n sampled honest blocks.

    Also returns, per block, whether Ursula's decoded bit is wrong: it is
    the parity of her bits corrected by the table's decision, so it errs
    exactly when that decision differs from the parity of the error vector.
    """
    p_c, e_c, e_i = rates
    table = table or DecodeTable(H, (e_c, e_i))
    k = H.k
    vectors = all_vectors(k)
    syn_idx = rows_to_ints(compute_syndrome(H, vectors))
    err_parity = vectors.sum(axis=1) % 2
    weights = 1 << np.arange(k - 1, -1, -1, dtype=np.int64)
    cls_table = classify_array(table.e_k, thresholds)
    flip = np.where(table.tie, -1, table.odd.astype(np.int64))
    cls = np.empty(n, dtype=np.int8)
    wrong = np.empty(n, dtype=bool)
    for lo in range(0, n, chunk):
        m = min(chunk, n - lo)
        conc = rng.random((m, k)) < p_c
        err = rng.random((m, k)) < np.where(conc, e_c, e_i)
        c_idx = conc.astype(np.int64) @ weights
        e_idx = err.astype(np.int64) @ weights
        s_idx = syn_idx[e_idx]
        cls[lo:lo + m] = cls_table[c_idx, s_idx]
        wrong[lo:lo + m] = flip[c_idx, s_idx] != err_parity[e_idx]
    return cls, wrong


def _query_blocks(s, rates, table, rng):
    cls, wrong = sample_block_classes(s.H, rates, s.thresholds, s.N, rng, table)
    P = joint_weights(table, rates[0])
    known, partial = class_masks(table, s.thresholds)
    return (int(np.count_nonzero(cls == 0)), float(np.count_nonzero(cls == 1)) / s.N,
            float(P[known].sum()), float(P[partial].sum()),
            int(np.count_nonzero(wrong & (cls == 0))))


def _query_pulses(s, rates, table, rng, theta):
    from .protocol.engine import Session

    params = s.params(rates, theta)
    db = rng.integers(0, 2, size=s.N, dtype=np.uint8)
    sess = Session(params, db, seed=int(rng.integers(2**63)))
    sess.run_sifting()
    sess.run_disclosure_and_correction()
    u = sess.ursula
    cls = classify_array(u.e_k, s.thresholds)
    wrong = int(np.count_nonzero((cls == 0) & (u.key != sess.dave.oblivious_key)))
    P = joint_weights(table, rates[0])
    known, partial = class_masks(table, s.thresholds)
    return (int(np.count_nonzero(cls == 0)), float(np.count_nonzero(cls == 1)) / s.N,
            float(P[known].sum()), float(P[partial].sum()), wrong)


def run_query(s: Scenario, ss: np.random.SeedSequence) -> QueryMetrics:
    rng = np.random.default_rng(ss)
    rates, theta = sample_parameters(s, rng)
    table = _table(s, rates)
    if s.method == "exact":
        n, m, pk, pp, wrong = _query_exact(s, rates, table, rng)
    elif s.method == "blocks":
        n, m, pk, pp, wrong = _query_blocks(s, rates, table, rng)
    else:
        n, m, pk, pp, wrong = _query_pulses(s, rates, table, rng, theta)
    return QueryMetrics(n=n, m=m, p_known=pk, p_partial=pp, rates=rates, theta_deg=theta,
                         errors=wrong)


def _run_chunk(args):
    s, seqs = args
    return [run_query(s, ss) for ss in seqs]


def run_scenario(s: Scenario, workers: int = 1) -> Report:
    """Run every query of ``s``; query i always uses substream i of the scenario seed."""
    seqs = np.random.SeedSequence(s.seed).spawn(s.queries)
    if workers <= 1 or s.queries < 2:
        return Report(scenario=s, metrics=_run_chunk((s, seqs)))
    size = math.ceil(len(seqs) / workers)
    chunks = [(s, seqs[i:i + size]) for i in range(0, len(seqs), size)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_run_chunk, chunks))
    return Report(scenario=s, metrics=[q for part in parts for q in part])


# --------------------------------------------------------------------------
# Histograms
# --------------------------------------------------------------------------

def n_histogram(report: Report) -> list[tuple[int, int, float]]:
    """(n, observed count, expected count) with the expectation averaged over queries."""
    from scipy.stats import binom

    if not report.metrics:
        return []
    n = report.n.astype(int)
    pk = np.array([q.p_known for q in report.metrics])
    top = int(max(n.max(), binom.ppf(1 - 1e-9, report.scenario.N, pk.max())))
    bins = np.arange(top + 1)
    observed = np.bincount(n, minlength=top + 1)
    expected = binom.pmf(bins[:, None], report.scenario.N, pk[None, :]).sum(axis=1)
    return [(int(b), int(o), float(e)) for b, o, e in zip(bins, observed, expected)]


def m_histogram(report: Report, width_percent: float = 0.1
                ) -> list[tuple[float, float, int, float]]:
    """(lower %, upper %, observed count, expected count) over percentage bins of m."""
    from scipy.stats import norm

    if not report.metrics:
        return []
    N = report.scenario.N
    m = 100.0 * report.m
    pp = np.array([q.p_partial for q in report.metrics])
    sd = 100.0 * np.sqrt(pp * (1 - pp) / N)
    lo = min(m.min(), (100 * pp - 6 * sd).min())
    hi = max(m.max(), (100 * pp + 6 * sd).max())
    lo = math.floor(lo / width_percent) * width_percent
    n_bins = max(1, math.ceil((hi - lo) / width_percent + 1e-9))
    if lo + n_bins * width_percent <= hi:
        n_bins += 1
    edges = lo + width_percent * np.arange(n_bins + 1)
    observed, _ = np.histogram(m, bins=edges)
    safe = np.where(sd > 0, sd, 1e-12)
    cdf = norm.cdf((edges[:, None] - 100 * pp[None, :]) / safe[None, :])
    expected = np.diff(cdf, axis=0).sum(axis=1)
    return [(float(a), float(b), int(o), float(e))
            for a, b, o, e in zip(edges[:-1], edges[1:], observed, expected)]


def emit_histograms(report: Report, out_dir, prefix: str = "") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_path = out / f"{prefix}histogram_n.csv"
    m_path = out / f"{prefix}histogram_m.csv"
    with open(n_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "count", "expected"])
        for b, o, e in n_histogram(report):
            w.writerow([b, o, f"{e:.6f}"])
    with open(m_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m_lo_percent", "m_hi_percent", "count", "expected"])
        for a, b, o, e in m_histogram(report):
            w.writerow([f"{a:.4f}", f"{b:.4f}", o, f"{e:.6f}"])
    return n_path, m_path


# --------------------------------------------------------------------------
# Reference scenarios
# --------------------------------------------------------------------------

MEASURED_RATES = {
    "mu0.95": ((0.161, 0.044, 0.4124), Variation(p_c=0.0029, e_c=0.0059, e_i=0.0008,
                                                  theta_deg=0.49)),
    "mu9.5": ((0.161, 0.046, 0.413), Variation(p_c=0.0093, e_c=0.0038, e_i=0.0064,
                                                theta_deg=0.49)),
}
LOW_NOISE_RATES = (0.0922, 0.0191, 0.4512)


def preset(name: str, queries: int | None = None, seed: int = 0, method: str = "exact",
           variation: bool = True) -> Scenario:
    """Named scenarios at the measured and low-noise operating points."""
    if name == "low-noise":
        return Scenario(name=name, H=H_25(), theta_deg=25.0, rates=LOW_NOISE_RATES,
                        queries=10**4 if queries is None else queries, seed=seed,
                        method=method)
    if name in MEASURED_RATES:
        rates, spread = MEASURED_RATES[name]
        default_q = 1000 if name == "mu0.95" else 104
        return Scenario(name=name, H=H_35_6(), theta_deg=35.6, rates=rates,
                        variation=spread if variation else None,
                        queries=default_q if queries is None else queries, seed=seed,
                        method=method)
    raise KeyError(f"unknown scenario {name!r}; choose from low-noise, mu0.95, mu9.5")


def scenario_from_dict(data: dict, base_dir=None) -> Scenario:
    from .config import load_matrix

    if "preset" in data:
        return preset(data["preset"], data.get("queries"), data.get("seed", 0),
                      data.get("method", "exact"), data.get("variation", True) is not False)
    rates = data["rates"]
    if isinstance(rates, dict):
        rates = (rates["p_c"], rates["e_c"], rates["e_i"])
    th = data.get("thresholds") or {}
    var = data.get("variation")
    return Scenario(
        name=data.get("name", "scenario"), H=load_matrix(data, base_dir),
        theta_deg=float(data["theta_deg"]), rates=tuple(float(x) for x in rates),
        N=int(data.get("N", 10**6)), thresholds=Thresholds(**th),
        variation=Variation(**var) if var else None, queries=int(data.get("queries", 1000)),
        seed=int(data.get("seed", 0)), method=data.get("method", "exact"))
