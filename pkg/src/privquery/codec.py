"""Parity-check codes and Ursula's parity decoding of oblivious-key blocks.

Each oblivious-key bit is the parity of a k-bit block of Dave's sifted key.
Dave reveals the syndrome ``H d mod 2`` of the block; Ursula holds a noisy
copy ``u`` of it with a conclusive/inconclusive tag per bit. The decoder
never needs the block itself, only the parity of the most likely candidates.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .bits import all_vectors, as_bits, rows_to_ints
from .states import Tag


class CodecError(ValueError):
    pass


class RateEstimationError(ValueError):
    """Not enough parity comparisons to estimate error rates."""


class UncorrelatedParityError(RateEstimationError):
    """Dave's parities look independent of Ursula's bits (mismatch fraction >= 1/2)."""

    def __init__(self, message: str, mismatch: dict):
        super().__init__(message)
        self.mismatch = mismatch


# --------------------------------------------------------------------------
# GF(2) linear algebra
# --------------------------------------------------------------------------

def gf2_rref(matrix) -> tuple[np.ndarray, list[int]]:
    """Reduced row echelon form over GF(2) and the pivot columns."""
    m = np.array(matrix, dtype=np.uint8) % 2
    rows, cols = m.shape
    pivots = []
    r = 0
    for c in range(cols):
        if r == rows:
            break
        hits = np.flatnonzero(m[r:, c]) + r
        if hits.size == 0:
            continue
        p = hits[0]
        if p != r:
            m[[r, p]] = m[[p, r]]
        others = np.flatnonzero(m[:, c])
        others = others[others != r]
        m[others] ^= m[r]
        pivots.append(c)
        r += 1
    return m, pivots


def gf2_rank(matrix) -> int:
    return len(gf2_rref(matrix)[1])


# --------------------------------------------------------------------------
# Code representation
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ParityCheckMatrix:
    """An r x k binary parity-check matrix with linearly independent rows."""

    rows: np.ndarray

    def __post_init__(self):
        arr = np.array(self.rows, dtype=np.uint8)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise CodecError("parity-check matrix must be a non-empty 2-D array")
        if arr.max() > 1:
            raise CodecError("parity-check matrix entries must be 0 or 1")
        if gf2_rank(arr) != arr.shape[0]:
            raise CodecError("parity-check rows must be linearly independent")
        arr.setflags(write=False)
        object.__setattr__(self, "rows", arr)

    @property
    def r(self) -> int:
        return self.rows.shape[0]

    @property
    def k(self) -> int:
        return self.rows.shape[1]

    def __eq__(self, other):
        return isinstance(other, ParityCheckMatrix) and np.array_equal(self.rows, other.rows)

    def __hash__(self):
        return hash((self.rows.shape, self.rows.tobytes()))

    def __repr__(self):
        return f"ParityCheckMatrix({self.serialize()!r})"

    @property
    def is_rref(self) -> bool:
        return np.array_equal(gf2_rref(self.rows)[0], self.rows)

    def rref(self) -> "ParityCheckMatrix":
        return ParityCheckMatrix(gf2_rref(self.rows)[0])

    def same_code(self, other: "ParityCheckMatrix") -> bool:
        return self.k == other.k and np.array_equal(gf2_rref(self.rows)[0], gf2_rref(other.rows)[0])

    def permute_columns(self, perm: Sequence[int]) -> "ParityCheckMatrix":
        return ParityCheckMatrix(self.rows[:, list(perm)])

    def row_space(self) -> np.ndarray:
        """All 2^r combinations of rows, one per row of the result."""
        coeffs = all_vectors(self.r)
        return (coeffs.astype(np.int64) @ self.rows) % 2

    @property
    def reveals_parity(self) -> bool:
        """True if some combination of rows is the all-ones vector."""
        return bool(np.any(self.row_space().sum(axis=1) == self.k))

    def serialize(self) -> str:
        return "/".join("".join(map(str, row)) for row in self.rows.tolist())

    def to_text(self) -> str:
        lines = [f"{self.r} {self.k}"]
        lines += [" ".join(map(str, row)) for row in self.rows.tolist()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ParityCheckMatrix":
        lines = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
        if not lines or len(lines[0]) != 2:
            raise CodecError("matrix file must start with 'r k'")
        r, k = int(lines[0][0]), int(lines[0][1])
        body = lines[1:]
        if len(body) != r or any(len(row) != k for row in body):
            raise CodecError(f"matrix body does not match declared shape {r}x{k}")
        return cls(np.array([[int(x) for x in row] for row in body], dtype=np.uint8))

    @classmethod
    def load(cls, path) -> "ParityCheckMatrix":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _fixture(name: str) -> ParityCheckMatrix:
    text = resources.files("privquery").joinpath(f"data/{name}").read_text()
    return ParityCheckMatrix.from_text(text)


def H_35_6() -> ParityCheckMatrix:
    """The k=10 code used at theta = 35.6 degrees."""
    return _fixture("H_35_6.txt")


def H_25() -> ParityCheckMatrix:
    """The k=9 code used at theta = 25 degrees."""
    return _fixture("H_25.txt")


# --------------------------------------------------------------------------
# Observations and results
# --------------------------------------------------------------------------

class BitClass(str, Enum):
    KNOWN = "known"
    PARTIAL = "partial"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class Thresholds:
    t_U: float = 1e-3
    t_D: float = 1.0 / 3.0

    def __post_init__(self):
        if not 0.0 <= self.t_U <= self.t_D <= 0.5:
            raise CodecError("need 0 <= t_U <= t_D <= 1/2")

    def classify(self, e_k: float) -> BitClass:
        if e_k <= self.t_U:
            return BitClass.KNOWN
        if e_k <= self.t_D:
            return BitClass.PARTIAL
        return BitClass.UNKNOWN


def _as_conclusive(tags) -> np.ndarray:
    out = []
    for t in tags:
        if isinstance(t, Tag):
            out.append(t is Tag.CONCLUSIVE)
        elif isinstance(t, str):
            out.append(Tag(t) is Tag.CONCLUSIVE)
        else:
            out.append(bool(t))
    return np.array(out, dtype=bool)


@dataclass(frozen=True)
class BlockObservation:
    """Ursula's bits for one block, their tags, and the syndrome Dave sent.

    ``tags`` accepts :class:`Tag` values, their string names, or booleans
    (True meaning conclusive).
    """

    u: np.ndarray
    tags: np.ndarray
    syndrome: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u", as_bits(self.u))
        object.__setattr__(self, "tags", _as_conclusive(self.tags))
        object.__setattr__(self, "syndrome", as_bits(self.syndrome))
        if self.u.shape != self.tags.shape:
            raise CodecError("u and tags must have the same length")

    @property
    def inconclusive_count(self) -> int:
        return int(np.count_nonzero(~self.tags))


@dataclass(frozen=True)
class BlockDecodeResult:
    key_bit: int
    e_k: float
    cls: BitClass


def _check_rate(name, value):
    if not 0.0 <= value <= 0.5:
        raise CodecError(f"{name} must be in [0, 1/2], got {value}")


# --------------------------------------------------------------------------
# Decoding
# --------------------------------------------------------------------------

def compute_syndrome(H: ParityCheckMatrix, d) -> np.ndarray:
    """``H d mod 2``; ``d`` may be one k-vector or an (n, k) batch."""
    d = as_bits(d)
    if d.shape[-1] != H.k:
        raise CodecError(f"vector length {d.shape[-1]} does not match k={H.k}")
    return ((d.astype(np.int64) @ H.rows.T.astype(np.int64)) % 2).astype(np.uint8)


def coset_members(H: ParityCheckMatrix, syndrome) -> np.ndarray:
    """Every k-bit vector d with ``H d = syndrome`` (rows of the result)."""
    syndrome = as_bits(syndrome)
    if syndrome.shape != (H.r,):
        raise CodecError(f"syndrome length {syndrome.shape} does not match r={H.r}")
    aug, pivots = gf2_rref(np.column_stack([H.rows, syndrome]))
    if H.k in pivots:
        raise CodecError("syndrome is inconsistent with H")
    free = [c for c in range(H.k) if c not in pivots]
    assign = all_vectors(len(free))
    sols = np.zeros((assign.shape[0], H.k), dtype=np.uint8)
    sols[:, free] = assign
    for row, p in enumerate(pivots):
        coeff = aug[row, free].astype(np.int64)
        sols[:, p] = (aug[row, H.k] + assign.astype(np.int64) @ coeff) % 2
    return sols


def _resolve(w0: float, w1: float) -> tuple[int, float]:
    """Key bit relative to parity class weights; ties go to 0 with e_k = 1/2."""
    total = w0 + w1
    if total <= 0.0 or abs(w0 - w1) <= 1e-12 * total:
        return 0, 0.5
    if w0 > w1:
        return 0, w1 / total
    return 1, w0 / total


def decode_block(H: ParityCheckMatrix, obs: BlockObservation, rates: tuple[float, float],
                 thresholds: Thresholds = Thresholds()) -> BlockDecodeResult:
    """Most likely block parity given the received syndrome.

    Candidates inconsistent with the syndrome are ruled out, the rest are
    split by parity and weighted by the likelihood of Ursula's bits under
    the per-tag error rates. Rates of exactly 1/2 are admitted for
    adversary analysis.
    """
    e_c, e_i = rates
    _check_rate("e_c", e_c)
    _check_rate("e_i", e_i)
    if obs.u.shape != (H.k,):
        raise CodecError(f"block length {obs.u.shape[0]} does not match k={H.k}")
    cands = coset_members(H, obs.syndrome)
    if cands.shape[0] == 0:
        raise CodecError("no candidate satisfies the syndrome")
    r = np.where(obs.tags, e_c, e_i)
    differs = cands != obs.u
    weights = np.prod(np.where(differs, r, 1.0 - r), axis=1)
    parity = cands.sum(axis=1) % 2
    w0 = float(weights[parity == 0].sum())
    w1 = float(weights[parity == 1].sum())
    key_bit, e_k = _resolve(w0, w1)
    return BlockDecodeResult(key_bit=key_bit, e_k=e_k, cls=thresholds.classify(e_k))


def tag_only_error(tags, rates: tuple[float, float]) -> float:
    """Error of the raw-bit parity when no syndrome information is used."""
    conc = _as_conclusive(tags)
    e_c, e_i = rates
    r = np.where(conc, e_c, e_i)
    return float((1.0 - np.prod(1.0 - 2.0 * r)) / 2.0)


def _coset_index(H: ParityCheckMatrix) -> np.ndarray:
    """For every k-bit error vector x: 2 * syndrome_index(Hx) + parity(x)."""
    X = all_vectors(H.k)
    syn = rows_to_ints(compute_syndrome(H, X))
    return 2 * syn + (X.sum(axis=1) % 2).astype(np.int64)


class DecodeTable:
    """Class weights for every (tag pattern, error syndrome) pair.

    ``weights[c, s, q]`` is the probability, given tag pattern ``c``, of an
    error vector with syndrome ``s`` and parity ``q``. Tag pattern and
    syndrome are integers read MSB-first from their bit vectors, a set bit
    in ``c`` meaning conclusive. Because the posterior depends on ``u`` and
    the received syndrome only through ``H u + p``, one table decodes every
    block at fixed rates.
    """

    def __init__(self, H: ParityCheckMatrix, rates: tuple[float, float]):
        e_c, e_i = rates
        _check_rate("e_c", e_c)
        _check_rate("e_i", e_i)
        self.H = H
        self.rates = (float(e_c), float(e_i))
        k, r = H.k, H.r
        onehot = np.zeros((1 << k, 2 << r))
        onehot[np.arange(1 << k), _coset_index(H)] = 1.0
        # contract one bit axis at a time: F[tag, error_bit]
        F = np.array([[1.0 - e_i, e_i], [1.0 - e_c, e_c]])
        T = onehot.reshape((2,) * k + (2 << r,))
        for axis in range(k):
            T = np.moveaxis(np.tensordot(F, T, axes=([1], [axis])), 0, axis)
        self.weights = T.reshape(1 << k, 1 << r, 2)
        w0, w1 = self.weights[..., 0], self.weights[..., 1]
        total = w0 + w1
        tie = (total <= 0.0) | (np.abs(w0 - w1) <= 1e-12 * total)
        safe = np.where(total > 0.0, total, 1.0)
        self.total = total
        self.tie = tie
        self.odd = (w1 > w0) & ~tie
        self.e_k = np.where(tie, 0.5, np.minimum(w0, w1) / safe)

    def decode(self, u, conclusive, received) -> tuple[np.ndarray, np.ndarray]:
        """Decode a batch: ``u`` (n, k), ``conclusive`` (n, k), ``received`` (n, r).

        Returns ``(key_bits, e_k)``.
        """
        u = as_bits(u)
        c_idx = rows_to_ints(np.asarray(conclusive, dtype=np.uint8))
        s_idx = rows_to_ints(compute_syndrome(self.H, u) ^ as_bits(received))
        par_u = (u.sum(axis=1) % 2).astype(np.uint8)
        tie = self.tie[c_idx, s_idx]
        key = np.where(tie, 0, par_u ^ self.odd[c_idx, s_idx]).astype(np.uint8)
        return key, self.e_k[c_idx, s_idx]

    def gate_bound(self, t_U: float) -> int:
        """Largest inconclusive count for which some syndrome gives e_k <= t_U (-1 if none)."""
        k = self.H.k
        n_incon = k - np.array([bin(c).count("1") for c in range(1 << k)])
        reachable = np.any((self.e_k <= t_U) & (self.total > 0.0), axis=1)
        return int(n_incon[reachable].max()) if reachable.any() else -1


@lru_cache(maxsize=64)
def _cached_table(H: ParityCheckMatrix, e_c: float, e_i: float) -> DecodeTable:
    return DecodeTable(H, (e_c, e_i))


def decode_table(H: ParityCheckMatrix, rates: tuple[float, float]) -> DecodeTable:
    return _cached_table(H, float(rates[0]), float(rates[1]))


def gate_bound(H: ParityCheckMatrix, rates: tuple[float, float],
               thresholds: Thresholds = Thresholds()) -> int:
    return decode_table(H, rates).gate_bound(thresholds.t_U)


def decode_gate(H: ParityCheckMatrix, obs: BlockObservation, rates: tuple[float, float],
                thresholds: Thresholds = Thresholds()) -> bool:
    """Whether decoding can possibly reach ``e_k <= t_U`` for this tag pattern's size."""
    return obs.inconclusive_count <= gate_bound(H, rates, thresholds)


def decode_gated(H: ParityCheckMatrix, obs: BlockObservation, rates: tuple[float, float],
                 thresholds: Thresholds = Thresholds()) -> BlockDecodeResult:
    """Decode only blocks that pass the gate; others get the tag-only error and are unknown."""
    if decode_gate(H, obs, rates, thresholds):
        return decode_block(H, obs, rates, thresholds)
    e_k = tag_only_error(obs.tags, rates)
    return BlockDecodeResult(key_bit=int(obs.u.sum() % 2), e_k=e_k, cls=BitClass.UNKNOWN)


# --------------------------------------------------------------------------
# Error-rate estimation from parity comparisons
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RateEstimate:
    e_c: float
    e_i: float
    rows_conclusive: int
    rows_mixed: int
    mismatch_conclusive: float
    mismatch_mixed: float


def mismatch_probability(e_c: float, e_i: float, w_c: int, w_i: int) -> float:
    """Probability that a parity over w_c conclusive and w_i inconclusive bits disagrees."""
    return (1.0 - (1.0 - 2.0 * e_c) ** w_c * (1.0 - 2.0 * e_i) ** w_i) / 2.0


def parity_row_stats(H: ParityCheckMatrix, local, received, conclusive):
    """Per (block, row): conclusive support size, inconclusive support size, mismatch flag."""
    local = as_bits(local).reshape(-1, H.r)
    received = as_bits(received).reshape(-1, H.r)
    conc = np.asarray(conclusive, dtype=np.int64).reshape(-1, H.k)
    support = H.rows.astype(np.int64)
    w_c = conc @ support.T
    w_i = support.sum(axis=1)[None, :] - w_c
    return w_c.ravel(), w_i.ravel(), (local != received).ravel()


def estimate_rates(H: ParityCheckMatrix, local, received, conclusive,
                   min_rows: int = 20) -> RateEstimate:
    """Method-of-moments estimate of (e_c, e_i) from syndrome disagreements.

    Rows are split into those whose support is entirely conclusive and the
    rest. Starting values come from the homogeneous rows; all rows then
    enter a weighted least-squares fit of the mismatch model.
    """
    w_c, w_i, miss = parity_row_stats(H, local, received, conclusive)
    strat_a = w_i == 0
    n_a, n_b = int(strat_a.sum()), int((~strat_a).sum())
    if n_a < min_rows or n_b < min_rows:
        raise RateEstimationError(
            f"need >= {min_rows} rows per stratum, have {n_a} conclusive / {n_b} mixed")
    frac_a = float(miss[strat_a].mean())
    frac_b = float(miss[~strat_a].mean())
    if frac_a >= 0.5 or frac_b >= 0.5:
        raise UncorrelatedParityError(
            f"parity mismatch fraction {frac_a:.3f} (conclusive) / {frac_b:.3f} (mixed)",
            {"conclusive": frac_a, "mixed": frac_b})
    if not miss.any():
        return RateEstimate(0.0, 0.0, n_a, n_b, 0.0, 0.0)

    keys = np.stack([w_c, w_i], axis=1)
    groups, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    n_g = np.bincount(inverse).astype(float)
    m_g = np.bincount(inverse, weights=miss.astype(float)) / n_g
    gc, gi = groups[:, 0], groups[:, 1]

    def pooled(mask, power):
        if not mask.any():
            return None
        corr = np.clip(1.0 - 2.0 * m_g[mask], 1e-9, 1.0) ** (1.0 / power[mask])
        return float(np.average(corr, weights=n_g[mask]))

    a0 = pooled((gi == 0) & (gc > 0), gc) or 0.9
    b0 = pooled((gc == 0) & (gi > 0), gi)
    if b0 is None:
        mixed = (gi > 0)
        corr = np.clip((1.0 - 2.0 * m_g[mixed]) / a0 ** gc[mixed], 1e-9, 1.0)
        b0 = float(np.average(corr ** (1.0 / gi[mixed]), weights=n_g[mixed]))

    from scipy.optimize import least_squares

    var = np.clip(m_g * (1.0 - m_g), 1.0 / n_g, None)
    sw = np.sqrt(n_g / var)

    def resid(x):
        a, b = x
        model = (1.0 - a ** gc * b ** gi) / 2.0
        return sw * (m_g - model)

    fit = least_squares(resid, x0=[min(max(a0, 0.0), 1.0), min(max(b0, 0.0), 1.0)],
                        bounds=([0.0, 0.0], [1.0, 1.0]))
    a, b = fit.x
    return RateEstimate(e_c=(1.0 - a) / 2.0, e_i=(1.0 - b) / 2.0,
                        rows_conclusive=n_a, rows_mixed=n_b,
                        mismatch_conclusive=frac_a, mismatch_mixed=frac_b)


def classify_array(e_k: np.ndarray, thresholds: Thresholds) -> np.ndarray:
    """0 known, 1 partial, 2 unknown."""
    e_k = np.asarray(e_k)
    return np.where(e_k <= thresholds.t_U, 0, np.where(e_k <= thresholds.t_D, 1, 2))

