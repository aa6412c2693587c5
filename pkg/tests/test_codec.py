import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_posterior, gf2_rank_oracle
from privquery.codec import (BitClass, BlockObservation, CodecError, DecodeTable, H_25, H_35_6,
                             ParityCheckMatrix, RateEstimationError, Thresholds,
                             UncorrelatedParityError, compute_syndrome, coset_members,
                             decode_block, decode_gate, decode_gated, estimate_rates, gate_bound,
                             gf2_rank, gf2_rref, mismatch_probability, tag_only_error)

MEASURED_ERRORS = (0.044, 0.4124)

H35_ROWS = ["1000010000", "0100011100", "0010011010", "0001010110", "0000110001"]
H25_ROWS = ["100001000", "010001000", "001001110", "000101101", "000011011"]


def _matrix(rows):
    return ParityCheckMatrix(np.array([[int(c) for c in r] for r in rows], dtype=np.uint8))


def random_full_rank(rng, r, k):
    while True:
        rows = rng.integers(0, 2, (r, k), dtype=np.uint8)
        if gf2_rank(rows) == r:
            return ParityCheckMatrix(rows)


# ---- matrices ---------------------------------------------------------------

def test_fixtures_match_published_matrices():
    assert H_35_6() == _matrix(H35_ROWS)
    assert H_25() == _matrix(H25_ROWS)
    assert H_35_6().is_rref and H_25().is_rref


def test_fixtures_do_not_reveal_parity():
    for H in (H_35_6(), H_25()):
        combos = H.row_space()
        assert combos.shape[0] == 2 ** H.r
        assert not any(all(v) for v in combos.tolist())
        assert not H.reveals_parity


def test_reveals_parity_detected():
    assert _matrix(["110", "001"]).reveals_parity


def test_text_format_round_trip(tmp_path):
    H = H_35_6()
    assert H.to_text().splitlines()[0] == "5 10"
    assert H.to_text().splitlines()[2] == "0 1 0 0 0 1 1 1 0 0"
    H.save(tmp_path / "h.txt")
    assert ParityCheckMatrix.load(tmp_path / "h.txt") == H


@pytest.mark.parametrize("text", ["", "5\n1 0", "2 3\n1 0 0\n", "1 3\n1 0\n"])
def test_text_format_rejects_bad_shapes(text):
    with pytest.raises(CodecError):
        ParityCheckMatrix.from_text(text)


def test_dependent_rows_rejected():
    with pytest.raises(CodecError):
        _matrix(["110", "110"])
    with pytest.raises(CodecError):
        ParityCheckMatrix(np.array([[2, 0]]))


@given(st.lists(st.lists(st.integers(0, 1), min_size=5, max_size=5), min_size=1, max_size=4))
@settings(max_examples=200, deadline=None)
def test_rank_matches_span_oracle(rows):
    assert gf2_rank(np.array(rows, dtype=np.uint8)) == gf2_rank_oracle(rows)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_rref_is_idempotent_and_row_equivalent(seed):
    rng = np.random.default_rng(seed)
    H = random_full_rank(rng, int(rng.integers(1, 5)), 6)
    R = H.rref()
    assert R.is_rref
    assert gf2_rref(R.rows)[0].tolist() == R.rows.tolist()
    span = {tuple(v) for v in H.row_space().tolist()}
    assert span == {tuple(v) for v in R.row_space().tolist()}


# ---- syndromes --------------------------------------------------------------

def test_syndrome_examples():
    assert compute_syndrome(H_35_6(), np.zeros(10)).tolist() == [0] * 5
    assert compute_syndrome(H_35_6(), np.eye(10)[5]).tolist() == [1] * 5
    assert compute_syndrome(H_25(), np.eye(9)[0]).tolist() == [1, 0, 0, 0, 0]


def test_syndrome_dimension_mismatch():
    with pytest.raises(CodecError):
        compute_syndrome(H_25(), np.zeros(10))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_coset_members_are_exactly_the_solutions(seed):
    rng = np.random.default_rng(seed)
    H = random_full_rank(rng, int(rng.integers(1, 5)), 6)
    s = rng.integers(0, 2, H.r)
    members = coset_members(H, s)
    assert members.shape[0] == 2 ** (H.k - H.r)
    assert np.all(compute_syndrome(H, members) == s)
    assert len({tuple(m) for m in members.tolist()}) == members.shape[0]


# ---- decoding ---------------------------------------------------------------

def test_decode_worked_examples():
    H = _matrix(["101", "011"])
    res = decode_block(H, BlockObservation([0, 0, 0], [True] * 3, [0, 0]), (0.1, 0.4))
    assert res.key_bit == 0
    assert res.e_k == pytest.approx(0.001 / 0.730, rel=1e-12)
    assert res.e_k == pytest.approx(1.370e-3, abs=1e-6)
    res = decode_block(H, BlockObservation([0, 0, 0], [True, True, False], [0, 0]), (0.1, 0.4))
    assert res.e_k == pytest.approx(0.004 / 0.490, rel=1e-12)
    assert res.e_k == pytest.approx(8.163e-3, abs=1e-6)


def test_noiseless_decoding_is_exact():
    rng = np.random.default_rng(5)
    H = H_35_6()
    for _ in range(50):
        d = rng.integers(0, 2, 10)
        tags = rng.integers(0, 2, 10).astype(bool)
        res = decode_block(H, BlockObservation(d, tags, compute_syndrome(H, d)), (0.0, 0.0))
        assert res.key_bit == d.sum() % 2
        assert res.e_k == 0.0 and res.cls is BitClass.KNOWN


def test_uninformative_rates_tie():
    H = _matrix(["101", "011"])
    res = decode_block(H, BlockObservation([0, 1, 0], [False] * 3, [1, 0]), (0.5, 0.5))
    assert (res.key_bit, res.e_k, res.cls) == (0, 0.5, BitClass.UNKNOWN)


def test_decode_rejects_bad_inputs():
    H = _matrix(["101", "011"])
    with pytest.raises(CodecError):
        decode_block(H, BlockObservation([0, 0], [True] * 2, [0, 0]), (0.1, 0.4))
    with pytest.raises(CodecError):
        decode_block(H, BlockObservation([0, 0, 0], [True] * 3, [0, 0]), (0.6, 0.4))
    with pytest.raises(CodecError):
        BlockObservation([0, 0, 0], [True] * 2, [0, 0])


def test_decoder_matches_brute_force_oracle():
    """At least 10^4 random (H, observation, rates) instances with k <= 6."""
    rng = np.random.default_rng(2024)
    cases = 0
    while cases < 10_000:
        k = int(rng.integers(2, 7))
        r = int(rng.integers(1, k))
        H = random_full_rank(rng, r, k)
        e_c = float(rng.uniform(0, 0.5))
        e_i = float(rng.uniform(0, 0.5))
        table = DecodeTable(H, (e_c, e_i))
        u = rng.integers(0, 2, (25, k))
        tags = rng.integers(0, 2, (25, k)).astype(bool)
        syn = rng.integers(0, 2, (25, r))
        keys, eks = table.decode(u, tags, syn)
        rows = H.rows.tolist()
        for i in range(25):
            want_key, want_ek = brute_posterior(rows, u[i].tolist(), tags[i].tolist(),
                                                syn[i].tolist(), e_c, e_i)
            got = decode_block(H, BlockObservation(u[i], tags[i], syn[i]), (e_c, e_i))
            assert got.e_k == pytest.approx(want_ek, abs=1e-12)
            assert eks[i] == pytest.approx(want_ek, abs=1e-12)
            if want_ek != 0.5:
                assert got.key_bit == want_key == keys[i]
            cases += 1


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_syndrome_sufficiency(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 8))
    H = random_full_rank(rng, int(rng.integers(1, k)), k)
    rates = (float(rng.uniform(0, 0.3)), float(rng.uniform(0.2, 0.5)))
    u = rng.integers(0, 2, k)
    tags = rng.integers(0, 2, k).astype(bool)
    s = rng.integers(0, 2, H.r)
    d = rng.integers(0, 2, k)
    a = decode_block(H, BlockObservation(u, tags, s), rates)
    b = decode_block(H, BlockObservation(u ^ d, tags, s ^ compute_syndrome(H, d)), rates)
    assert a.e_k == pytest.approx(b.e_k, abs=1e-12)
    if a.e_k < 0.5:
        assert b.key_bit == a.key_bit ^ (d.sum() % 2)


@given(st.integers(0, 2**32 - 1), st.floats(0.001, 0.49), st.floats(0.001, 0.49))
@settings(max_examples=200, deadline=None)
def test_monotone_in_conclusive_rate(seed, e1, e2):
    rng = np.random.default_rng(seed)
    H = H_35_6()
    u = rng.integers(0, 2, 10)
    obs = BlockObservation(u, [True] * 10, compute_syndrome(H, u))
    lo, hi = sorted((e1, e2))
    assert decode_block(H, obs, (lo, 0.4)).e_k <= decode_block(H, obs, (hi, 0.4)).e_k + 1e-15


def test_classification_boundaries_are_closed():
    th = Thresholds(t_U=1e-3, t_D=1 / 3)
    assert th.classify(1e-3) is BitClass.KNOWN
    assert th.classify(np.nextafter(1e-3, 1)) is BitClass.PARTIAL
    assert th.classify(1 / 3) is BitClass.PARTIAL
    assert th.classify(np.nextafter(1 / 3, 1)) is BitClass.UNKNOWN
    with pytest.raises(CodecError):
        Thresholds(t_U=0.4, t_D=0.3)


# ---- gate -------------------------------------------------------------------

def test_gate_bound_at_measured_rates():
    assert gate_bound(H_35_6(), MEASURED_ERRORS) == 3


def test_gate_examples():
    H = H_35_6()
    u = np.zeros(10, dtype=np.uint8)
    assert decode_gate(H, BlockObservation(u, [True] * 10, np.zeros(5)), MEASURED_ERRORS)
    assert not decode_gate(H, BlockObservation(u, [False] * 10, np.zeros(5)), MEASURED_ERRORS)


def test_gate_never_hides_a_known_bit():
    rng = np.random.default_rng(9)
    H = H_35_6()
    for _ in range(2000):
        u = rng.integers(0, 2, 10)
        tags = rng.random(10) < 0.7
        obs = BlockObservation(u, tags, rng.integers(0, 2, 5))
        full = decode_block(H, obs, MEASURED_ERRORS)
        gated = decode_gated(H, obs, MEASURED_ERRORS)
        if full.cls is BitClass.KNOWN:
            assert gated == full


def test_tag_only_prior():
    assert tag_only_error([True], (0.1, 0.4)) == pytest.approx(0.1)
    assert tag_only_error([True, False], (0.1, 0.4)) == pytest.approx(0.1 * 0.6 + 0.9 * 0.4)


# ---- rate estimation ----------------------------------------------------------

def test_mismatch_closed_form():
    assert mismatch_probability(0.044, 0.4, 2, 0) == pytest.approx(0.08413, abs=1e-5)


def _synthetic(H, n, p_c, e_c, e_i, rng):
    d = rng.integers(0, 2, (n, H.k), dtype=np.uint8)
    conc = rng.random((n, H.k)) < p_c
    flip = rng.random((n, H.k)) < np.where(conc, e_c, e_i)
    u = d ^ flip
    return compute_syndrome(H, u), compute_syndrome(H, d), conc


def test_estimate_rates_round_trip():
    rng = np.random.default_rng(17)
    H = H_35_6()
    local, received, conc = _synthetic(H, 10**6, 0.161, 0.044, 0.4124, rng)
    est = estimate_rates(H, local, received, conc)
    assert est.e_c == pytest.approx(0.044, abs=0.002)
    assert est.e_i == pytest.approx(0.4124, abs=0.002)


def test_estimate_rates_zero_mismatch():
    rng = np.random.default_rng(1)
    H = H_35_6()
    local, received, conc = _synthetic(H, 2000, 0.5, 0.0, 0.0, rng)
    est = estimate_rates(H, local, received, conc)
    assert (est.e_c, est.e_i) == (0.0, 0.0)


def test_estimate_rates_errors():
    rng = np.random.default_rng(2)
    H = H_35_6()
    local, received, conc = _synthetic(H, 3, 0.5, 0.0, 0.0, rng)
    with pytest.raises(RateEstimationError):
        estimate_rates(H, local, received, conc)
    local, _, conc = _synthetic(H, 5000, 0.5, 0.0, 0.0, rng)
    with pytest.raises(UncorrelatedParityError):
        estimate_rates(H, local, local ^ 1, conc)


def test_random_syndromes_push_mismatch_to_half():
    rng = np.random.default_rng(4)
    H = H_35_6()
    n = 20_000
    local, _, conc = _synthetic(H, n, 0.161, 0.044, 0.4124, rng)
    received = rng.integers(0, 2, local.shape, dtype=np.uint8)
    try:
        est = estimate_rates(H, local, received, conc)
        fracs = (est.mismatch_conclusive, est.mismatch_mixed)
    except UncorrelatedParityError as exc:
        fracs = (exc.mismatch["conclusive"], exc.mismatch["mixed"])
    rows_a = (conc.astype(int) @ H.rows.T.astype(int) == H.rows.sum(axis=1)).sum()
    assert abs(fracs[0] - 0.5) < 3 * 0.5 / np.sqrt(rows_a)
    assert abs(fracs[1] - 0.5) < 3 * 0.5 / np.sqrt(n * H.r - rows_a)
