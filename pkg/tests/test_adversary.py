import math

import numpy as np
import pytest

from builders import measured_params
from oracles import steering_conclusive
from privquery.adversary import (AnomalyConfig, AttackConfig, SteeringMode,
                                 all_conclusive_probability, anomaly_detector,
                                 asymmetric_rate_scenario, conditional_tail,
                                 evaluate_usd_attack, honest_all_conclusive_blocks,
                                 simulate_dave_attack, steering_bit_correlation,
                                 steering_sample, steering_statistics, usd_rates,
                                 usd_statistics)
from privquery.codec import H_25, H_35_6, compute_syndrome, decode_table
from privquery.design import exact_ek_distribution, tag_pattern_probs
from privquery.protocol import AbortReason, DaveBehaviour, Session, SessionAborted
from privquery.states import ChannelModel, StateGeometry, sample_pulses

MEASURED = (0.161, 0.044, 0.4124)
LOW_NOISE = (0.0922, 0.0191, 0.4512)
G35, G25 = StateGeometry(35.6), StateGeometry(25.0)
MAX, MIN = SteeringMode.MAXIMIZE, SteeringMode.MINIMIZE


# ---- steering -------------------------------------------------------------------

@pytest.mark.parametrize("theta", [10.0, 25.0, 35.6, 60.0, 89.0])
def test_steering_probabilities_match_born_oracle(theta):
    g = StateGeometry(theta)
    assert steering_statistics(g, MAX)[0] == pytest.approx(steering_conclusive(theta, True),
                                                           abs=1e-12)
    assert steering_statistics(g, MIN)[0] == pytest.approx(steering_conclusive(theta, False),
                                                           abs=1e-12)


def test_all_conclusive_probabilities():
    assert all_conclusive_probability(G35, 10) == pytest.approx(0.3749, abs=5e-4)
    assert all_conclusive_probability(G25, 9) == pytest.approx(0.6493, abs=5e-4)
    assert steering_statistics(StateGeometry(90 - 1e-9), MAX)[0] == pytest.approx(0.5)


@pytest.mark.parametrize("mode, expected", [(MAX, math.cos(math.radians(17.8)) ** 2),
                                            (MIN, math.sin(math.radians(17.8)) ** 2)])
def test_sampled_steering_conclusive_rate(mode, expected):
    n = 200_000
    _, _, conc, _ = steering_sample(G35, mode, n, np.random.default_rng(1))
    assert abs(conc.mean() - expected) < 3 * math.sqrt(expected * (1 - expected) / n)


@pytest.mark.parametrize("mode", [MAX, MIN])
def test_steered_bits_are_uncorrelated(mode):
    corr, se = steering_bit_correlation(G35, mode, 200_000, np.random.default_rng(2))
    assert abs(corr) < 3 * se


def test_correlation_test_has_power():
    # conclusive honest outcomes reproduce Dave's bit: the same statistic sees it
    rng = np.random.default_rng(3)
    a = rng.integers(0, 2, 10_000)
    b = rng.integers(0, 2, 10_000)
    batch = sample_pulses(ChannelModel.physical(35.6), a, b, rng)
    corr = np.mean((2.0 * a - 1) * (2.0 * batch.ursula_bit - 1))
    assert corr > 0.1


@pytest.mark.parametrize("H, g, rates, success, tail_a, tail_h", [
    (H_35_6(), G35, MEASURED, 0.0592, 0.4063, 0.0214),
    (H_25(), G25, LOW_NOISE, 0.1273, 0.6563, 0.0071),
])
def test_attack_success_and_tails(H, g, rates, success, tail_a, tail_h):
    rep = simulate_dave_attack(H, g, rates, trials=200_000, seed=4, pulse_level=True)
    assert rep.success_analytic == pytest.approx(success, abs=0.003)
    assert abs(rep.success_mc - rep.success_analytic) < 3 * rep.success_stderr
    assert rep.tail_attack == pytest.approx(tail_a, abs=0.005)
    assert rep.tail_honest == pytest.approx(tail_h, abs=0.002)
    assert sum(p for _, p in rep.ek_given_all_conclusive) == pytest.approx(1.0)


def test_attack_success_equals_exact_distribution_with_random_syndromes():
    # feeding (cos^2, e_c = e_i = 1/2) through the exact evaluator: every error
    # syndrome is then equally likely, which is what random syndromes give
    p_att = steering_statistics(G35, MAX)[0]
    rep = simulate_dave_attack(H_35_6(), G35, MEASURED)
    table = decode_table(H_35_6(), MEASURED[1:])
    coin = decode_table(H_35_6(), (0.5, 0.5))
    P = tag_pattern_probs(10, p_att)[:, None] * coin.total
    assert rep.success_analytic == pytest.approx(float(P[table.e_k <= 1e-3].sum()), abs=1e-12)


def test_honest_flag_rate_by_sampling():
    _, _, ek = honest_all_conclusive_blocks(H_35_6(), MEASURED, 10_000, np.random.default_rng(5))
    assert (ek >= 0.15).mean() == pytest.approx(0.0214, abs=0.005)
    assert conditional_tail(H_35_6(), MEASURED[1:], 0.15, honest=True) == pytest.approx(
        0.0214, abs=0.002)


def test_attack_config_validation():
    AttackConfig(dave_mode="maximize_pc_on_target_block", target_block=3)
    with pytest.raises(ValueError):
        AttackConfig(dave_mode=MIN, target_block=3)
    with pytest.raises(ValueError):
        AttackConfig(role="dishonest_dave", dave_mode=None)
    AttackConfig(role="usd_ursula", dave_mode=None)


# ---- anomaly detector ---------------------------------------------------------------

def test_detector_vacuous_input():
    H = H_35_6()
    v = anomaly_detector(H, np.zeros((0, 5)), np.zeros((0, 5)), np.zeros((0, 10)),
                         np.zeros(0), MEASURED[1:])
    assert v.ok


def _honest_blocks(H, conc, rng):
    n = conc.shape[0]
    u = rng.integers(0, 2, (n, H.k), dtype=np.uint8)
    d = u ^ (rng.random((n, H.k)) < np.where(conc, 0.044, 0.4124))
    return u, compute_syndrome(H, d)


def test_minimize_attack_fails_mismatch_test():
    H = H_35_6()
    rng = np.random.default_rng(6)
    n = 10_000
    _, _, conc, u = steering_sample(G35, MIN, n * 10, rng)
    conc, u = conc.reshape(n, 10), u.reshape(n, 10)
    syn = rng.integers(0, 2, (n, 5), dtype=np.uint8)
    _, ek = decode_table(H, MEASURED[1:]).decode(u, conc, syn)
    v = anomaly_detector(H, compute_syndrome(H, u), syn, conc, ek, MEASURED[1:],
                         AnomalyConfig(max_flags=10**9))
    assert not v.ok and "mismatch" in v.reason
    assert abs(v.mismatch_conclusive - 0.5) < 3 * 0.5 / math.sqrt(v.rows_conclusive)


def test_honest_blocks_pass_detector():
    H = H_35_6()
    rng = np.random.default_rng(7)
    n = 10_000
    conc = rng.random((n, 10)) < 0.161
    u, syn = _honest_blocks(H, conc, rng)
    _, ek = decode_table(H, MEASURED[1:]).decode(u, conc, syn)
    v = anomaly_detector(H, compute_syndrome(H, u), syn, conc, ek, MEASURED[1:],
                         AnomalyConfig.for_code(10, 35.6))
    assert v.ok, v.reason


def test_flagged_all_conclusive_block_aborts():
    H = H_35_6()
    conc = np.ones((1, 10), bool)
    u = np.zeros((1, 10), np.uint8)
    syn = np.array([[1, 1, 1, 1, 1]], np.uint8)
    v = anomaly_detector(H, compute_syndrome(H, u), syn, conc, np.array([0.3]), MEASURED[1:])
    assert not v.ok and v.flagged_blocks.tolist() == [0]
    relaxed = anomaly_detector(H, compute_syndrome(H, u), syn, conc, np.array([0.3]),
                               MEASURED[1:], AnomalyConfig(max_flags=1))
    assert relaxed.ok


def test_steer_min_session_is_caught():
    params = measured_params(N=10_000, anomaly=AnomalyConfig.for_code(10, 35.6))
    s = Session(params, np.zeros(10_000, np.uint8), seed=8, behaviour=DaveBehaviour.STEER_MIN)
    s.run_sifting()
    with pytest.raises(SessionAborted) as exc:
        s.run_disclosure_and_correction()
    assert exc.value.reason is AbortReason.CHEAT_DETECTED
    p = math.sin(math.radians(17.8)) ** 2
    n = s.ursula.conclusive.size
    assert abs(s.ursula.conclusive.mean() - p) < 3 * math.sqrt(p * (1 - p) / n)


# ---- USD and asymmetric rates ------------------------------------------------------

def test_usd_statistics():
    assert usd_statistics(G35)[0] == pytest.approx(0.1869, abs=1e-4)
    assert usd_statistics(G25)[0] == pytest.approx(0.0937, abs=1e-4)
    assert usd_statistics(StateGeometry(90 - 1e-9)) == pytest.approx((1.0, 0.5))
    assert usd_statistics(G35)[1] == 0.5


def test_usd_attack_known_bits():
    assert exact_ek_distribution(H_35_6(), MEASURED).nbar(10**6) == pytest.approx(3.89, abs=0.05)
    assert evaluate_usd_attack(H_35_6(), G35, MEASURED, 10**6) == pytest.approx(11.15, abs=0.1)
    assert exact_ek_distribution(H_25(), LOW_NOISE).nbar(10**6) == pytest.approx(4.35, abs=0.05)
    assert evaluate_usd_attack(H_25(), G25, LOW_NOISE, 10**6) == pytest.approx(1.00, abs=0.05)


def test_usd_sign_change():
    gain = evaluate_usd_attack(H_35_6(), G35, MEASURED, 10**6) - \
        exact_ek_distribution(H_35_6(), MEASURED).nbar(10**6)
    loss = evaluate_usd_attack(H_25(), G25, LOW_NOISE, 10**6) - \
        exact_ek_distribution(H_25(), LOW_NOISE).nbar(10**6)
    assert gain > 0 > loss


def test_usd_with_uninformative_inconclusives_only_moves_pc():
    rates = (0.161, 0.044, 0.5)
    out = usd_rates(G35, rates)
    assert out[1:] == rates[1:] and out[0] != rates[0]
    assert usd_rates(G35, rates, e_c_usd=0.1)[1] == 0.1


def test_asymmetric_source_only_theta25():
    rep = asymmetric_rate_scenario((0.0914, 0.0138, 0.4511), LOW_NOISE, H_25(), 10**6)
    summary = rep.summary()
    assert summary["source_only"]["nbar"] == pytest.approx(10.67, abs=0.1)
    assert summary["source_only"]["mbar"] == pytest.approx(0.0093, abs=0.0005)
    assert summary["actual"]["nbar"] == pytest.approx(4.35, abs=0.05)


def test_asymmetric_identical_triples():
    rep = asymmetric_rate_scenario(MEASURED, MEASURED, H_35_6(), 10**6)
    assert rep.source_only.p_known == rep.actual.p_known
    assert rep.source_only.p_partial == rep.actual.p_partial
