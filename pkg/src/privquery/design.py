"""Exact e_k distributions and exhaustive search over parity-check codes.

Codes are compared by the two numbers that matter for a private query: the
probability that a block becomes a known bit (``e_k <= t_U``) and the
probability that Ursula ends up with significant partial information
(``t_U < e_k <= t_D``).

Enumeration works on matrices in reduced row echelon form, since two
matrices with the same row space decode identically. With ``canonical=True``
it also collapses column permutations: per-bit tag and error processes are
i.i.d., so permuting the bits of every block leaves all statistics unchanged.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, Iterator, Sequence

import numpy as np

from .codec import DecodeTable, ParityCheckMatrix, Thresholds, decode_table

MAX_K = 12


class DesignError(ValueError):
    pass


class NoCandidateError(DesignError):
    """No candidate code reaches the requested n-bar range."""


@dataclass
class CodeEvaluation:
    H: ParityCheckMatrix
    p_known: float
    p_partial: float
    rates: tuple[float, float, float]
    ek_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ek_probs: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def p_unknown(self) -> float:
        return 1.0 - self.p_known - self.p_partial

    def nbar(self, N: int) -> float:
        return N * self.p_known

    @property
    def mbar(self) -> float:
        return self.p_partial

    @property
    def ek_distribution(self) -> list[tuple[float, float]]:
        return list(zip(self.ek_values.tolist(), self.ek_probs.tolist()))

    def tail(self, threshold: float) -> float:
        """P(e_k >= threshold)."""
        return float(self.ek_probs[self.ek_values >= threshold].sum())


def tag_pattern_probs(k: int, p_c: float) -> np.ndarray:
    """Probability of each tag pattern, pattern bits MSB-first, 1 = conclusive."""
    return reduce(np.kron, [np.array([1.0 - p_c, p_c])] * k)


def joint_weights(table: DecodeTable, p_c: float) -> np.ndarray:
    """P(tag pattern, error syndrome) for every table cell."""
    return tag_pattern_probs(table.H.k, p_c)[:, None] * table.total


def class_probabilities(H: ParityCheckMatrix, rates, thresholds: Thresholds = Thresholds()
                        ) -> tuple[float, float]:
    """(p_known, p_partial) per block, without building the atom list."""
    p_c, e_c, e_i = rates
    table = decode_table(H, (e_c, e_i))
    P = joint_weights(table, p_c)
    known = table.e_k <= thresholds.t_U
    partial = (table.e_k > thresholds.t_U) & (table.e_k <= thresholds.t_D)
    return float(P[known].sum()), float(P[partial].sum())


def merge_atoms(values, weights, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Sum ``weights`` over runs of sorted ``values`` whose consecutive gaps are <= tol.

    Each merged atom takes the smallest value of its run. Unlike rounding to
    a grid, nearby values never end up split across a grid boundary.
    """
    values = np.asarray(values, dtype=float).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    if values.size == 0:
        return values, weights
    order = np.argsort(values, kind="stable")
    v = values[order]
    starts = np.concatenate(([True], np.diff(v) > tol))
    group = np.cumsum(starts) - 1
    return v[starts], np.bincount(group, weights=weights[order])


def exact_ek_distribution(H: ParityCheckMatrix, rates, thresholds: Thresholds = Thresholds()
                          ) -> CodeEvaluation:
    """Exact distribution of e_k for an honest run at ``rates = (p_c, e_c, e_i)``.

    Every (tag pattern, error vector) pair is accounted for; e_k depends on
    the error vector only through its syndrome, so the enumeration runs over
    2^k tag patterns times 2^r syndromes.
    """
    if H.k > MAX_K:
        raise DesignError(f"k={H.k} exceeds the enumeration bound {MAX_K}")
    p_c, e_c, e_i = (float(x) for x in rates)
    table = decode_table(H, (e_c, e_i))
    P = joint_weights(table, p_c)
    ek = table.e_k
    known = ek <= thresholds.t_U
    partial = (ek > thresholds.t_U) & (ek <= thresholds.t_D)
    p_known = float(P[known].sum())
    p_partial = float(P[partial].sum())
    mask = P > 0
    vals, probs = merge_atoms(ek[mask], P[mask])
    return CodeEvaluation(H=H, p_known=p_known, p_partial=p_partial, rates=(p_c, e_c, e_i),
                          ek_values=vals, ek_probs=probs)


# --------------------------------------------------------------------------
# Enumeration
# --------------------------------------------------------------------------

def gaussian_binomial(n: int, k: int, q: int = 2) -> int:
    """Number of k-dimensional subspaces of GF(q)^n."""
    if k < 0 or k > n:
        return 0
    num = math.prod(q ** (n - i) - 1 for i in range(k))
    den = math.prod(q ** (i + 1) - 1 for i in range(k))
    return num // den


def _pivot_layouts(k: int, r: int):
    for pivots in itertools.combinations(range(k), r):
        free = [(i, c) for i, p in enumerate(pivots) for c in range(p + 1, k) if c not in pivots]
        yield pivots, free


def count_rref(k: int, r: int) -> int:
    """Size of the non-canonical enumeration, counted layout by layout."""
    return sum(1 << len(free) for _, free in _pivot_layouts(k, r))


def _all_rref(k: int, r: int) -> Iterator[ParityCheckMatrix]:
    for pivots, free in _pivot_layouts(k, r):
        base = np.zeros((r, k), dtype=np.uint8)
        base[np.arange(r), list(pivots)] = 1
        for bits in itertools.product((0, 1), repeat=len(free)):
            m = base.copy()
            for (i, c), b in zip(free, bits):
                m[i, c] = b
            yield ParityCheckMatrix(m)


class _LineCanon:
    """Canonical form of a binary matrix under row and column permutations.

    The matrix is seen as ``P`` lines of length ``L``; the canonical key is
    the largest base-2^L integer obtained by permuting positions within the
    lines and sorting the lines in decreasing order.
    """

    def __init__(self, L: int, P: int):
        self.L, self.P = L, P
        perms = np.array(list(itertools.permutations(range(L))), dtype=np.int64)
        values = np.arange(1 << L, dtype=np.int64)
        bits = (values[:, None] >> np.arange(L - 1, -1, -1)) & 1          # value -> bits
        weights = 1 << np.arange(L - 1, -1, -1)
        # perm_map[s, v]: value v with its bit positions permuted by s
        self.perm_map = np.stack([bits[:, p] @ weights for p in perms])
        self.place = (1 << L) ** np.arange(P - 1, -1, -1, dtype=np.int64)

    def encode(self, lines: np.ndarray) -> np.ndarray:
        """Lines sorted in decreasing order, packed into one integer."""
        return -np.sort(-lines, axis=-1) @ self.place

    def keys(self, lines: np.ndarray) -> np.ndarray:
        """Canonical key for a batch of line sets, shape (n, P) -> (n,)."""
        mapped = self.perm_map[:, lines]                                   # (S, n, P)
        return self.encode(mapped).max(axis=0)

    def decode(self, key: int) -> np.ndarray:
        base = 1 << self.L
        return np.array([(key // int(p)) % base for p in self.place], dtype=np.int64)


def _column_orders(k: int, r: int) -> np.ndarray:
    """Each r-subset of columns followed by the remaining columns, one row per subset."""
    return np.array([list(s) + [c for c in range(k) if c not in s]
                     for s in itertools.combinations(range(k), r)], dtype=np.int64)


def _batched_info_set_forms(H: np.ndarray, order: np.ndarray):
    """For each leading column subset that is an information set, M with H ~ [I | M]."""
    r, k = H.shape
    A = H[:, order].transpose(1, 0, 2).copy()                              # (B, r, k)
    B = A.shape[0]
    valid = np.ones(B, dtype=bool)
    rows = np.arange(B)
    for j in range(r):
        cand = A[:, j:, j]
        has = cand.any(axis=1)
        valid &= has
        piv = j + np.argmax(cand, axis=1)
        swap = A[rows, piv].copy()
        A[rows, piv] = A[rows, j]
        A[rows, j] = swap
        hit = A[:, :, j].astype(bool)
        hit[:, j] = False
        A ^= hit[:, :, None] * A[:, j:j + 1, :]
    return A[valid][:, :, r:], valid


class CodeCanonicalizer:
    """Canonical representative of a code's class under column permutation."""

    def __init__(self, k: int, r: int):
        if not 0 < r < k <= MAX_K:
            raise DesignError(f"need 0 < r < k <= {MAX_K}, got r={r}, k={k}")
        self.k, self.r, self.n = k, r, k - r
        self.by_columns = math.factorial(r) <= math.factorial(self.n)
        L, P = (r, self.n) if self.by_columns else (self.n, r)
        self.lines = _LineCanon(L, P)
        self.orders = _column_orders(k, r)

    def _lines_of(self, M: np.ndarray) -> np.ndarray:
        """M has shape (B, r, n); lines are its columns or its rows."""
        L = self.lines.L
        w = 1 << np.arange(L - 1, -1, -1)
        if self.by_columns:
            return np.einsum("brn,r->bn", M.astype(np.int64), w)
        return np.einsum("brn,n->br", M.astype(np.int64), w)

    def matrix_from_key(self, key: int) -> ParityCheckMatrix:
        L = self.lines.L
        vals = self.lines.decode(key)
        bits = ((vals[:, None] >> np.arange(L - 1, -1, -1)) & 1).astype(np.uint8)
        M = bits.T if self.by_columns else bits
        return ParityCheckMatrix(np.hstack([np.eye(self.r, dtype=np.uint8), M]))

    def key(self, H: ParityCheckMatrix) -> int:
        forms, _ = _batched_info_set_forms(H.rows.astype(np.uint8), self.orders)
        return int(self.lines.keys(self._lines_of(forms)).max())

    def canonical(self, H: ParityCheckMatrix) -> ParityCheckMatrix:
        return self.matrix_from_key(self.key(H))

    def seed_keys(self, chunk: int = 20000) -> Iterator[int]:
        """Keys of [I | M] matrices whose M is already row/column canonical."""
        canon = self.lines
        values = range(1 << canon.L)
        combos = itertools.combinations_with_replacement(reversed(values), canon.P)
        while True:
            block = np.array(list(itertools.islice(combos, chunk)), dtype=np.int64)
            if block.size == 0:
                return
            own = canon.encode(block)
            keep = canon.keys(block) == own
            yield from own[keep].tolist()


def enumerate_codes(k: int, r: int, canonical: bool = True) -> Iterator[ParityCheckMatrix]:
    """Rank-r parity-check matrices on k bits, in reduced row echelon form.

    ``canonical=False`` yields every RREF matrix once (a Gaussian binomial
    count). ``canonical=True`` yields one representative per class of
    column-permutation-equivalent codes.
    """
    if not 0 < r <= k <= 10:
        raise DesignError(f"need 0 < r <= k <= 10, got r={r}, k={k}")
    if r == k:
        yield ParityCheckMatrix(np.eye(k, dtype=np.uint8))
        return
    if not canonical:
        yield from _all_rref(k, r)
        return
    cz = CodeCanonicalizer(k, r)
    seen = set()
    for seed in cz.seed_keys():
        key = cz.key(cz.matrix_from_key(seed))
        if key not in seen:
            seen.add(key)
            yield cz.matrix_from_key(key)


# --------------------------------------------------------------------------
# Selection
# --------------------------------------------------------------------------

def _evaluate(args):
    H, rates, thresholds = args
    p_known, p_partial = class_probabilities(H, rates, thresholds)
    return CodeEvaluation(H=H, p_known=p_known, p_partial=p_partial, rates=tuple(rates))


def evaluate_codes(candidates: Iterable[ParityCheckMatrix], rates,
                   thresholds: Thresholds = Thresholds(), workers: int = 1
                   ) -> list[CodeEvaluation]:
    jobs = ((H, tuple(rates), thresholds) for H in candidates)
    if workers <= 1:
        return [_evaluate(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_evaluate, jobs, chunksize=64))


def rank_codes(evaluations: Sequence[CodeEvaluation], target_nbar_range, N: int
               ) -> list[CodeEvaluation]:
    """Candidates inside the n-bar range, best first (lowest p_partial, then serialization).

    Codes whose row space contains the all-ones vector disclose every key bit
    through the syndrome and are never ranked.
    """
    lo, hi = target_nbar_range
    inside = [ev for ev in evaluations
              if lo <= ev.nbar(N) <= hi and not ev.H.reveals_parity]
    return sorted(inside, key=lambda ev: (ev.p_partial, ev.H.serialize()))


def select_code(candidates: Iterable[ParityCheckMatrix], rates, target_nbar_range=(2.0, 6.0),
                N: int = 10**6, thresholds: Thresholds = Thresholds(), workers: int = 1
                ) -> CodeEvaluation:
    candidates = list(candidates)
    if not candidates:
        raise DesignError("candidate stream is empty")
    ranked = rank_codes(evaluate_codes(candidates, rates, thresholds, workers),
                        target_nbar_range, N)
    if not ranked:
        raise NoCandidateError(
            f"no candidate has n-bar in [{target_nbar_range[0]}, {target_nbar_range[1]}]")
    best = ranked[0]
    return exact_ek_distribution(best.H, rates, thresholds)


def write_ranking_csv(path, ranked: Sequence[CodeEvaluation], N: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "matrix", "p_known", "p_partial", "nbar", "mbar_percent"])
        for i, ev in enumerate(ranked, 1):
            w.writerow([i, ev.H.serialize(), f"{ev.p_known:.6e}", f"{ev.p_partial:.6e}",
                        f"{ev.nbar(N):.4f}", f"{100 * ev.mbar:.4f}"])
