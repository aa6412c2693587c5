"""Dave and Ursula as message-driven state machines, plus an in-process driver.

Each party consumes one :class:`Message` at a time through ``receive`` and
returns the messages it wants to send. Two steps are initiated rather than
triggered by an incoming message: Dave's disclosure once the sifted key is
complete (:meth:`Dave.disclose`) and Ursula's shift once decoding is done
(:meth:`Ursula.query`). Drivers call those when the party reports it is
ready, which keeps the parties identical across in-process and socket runs.

Pulses travel as one state code per pulse: ``2 * a + b`` for the honest
states (``a`` the raw-key bit, ``b`` the psi/phi selector) and ``4 + h`` for
the two steering vectors at ``theta / 2 + h * 90`` degrees.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ..adversary import AnomalyConfig, anomaly_detector
from ..codec import (ParityCheckMatrix, Thresholds, compute_syndrome, decode_table,
                     tag_only_error)
from ..states import (ChannelModel, StateGeometry, born_measure, induced_statistics,
                      measure_pulses, sample_detection)
from . import messages as wire
from .messages import (AbortReason, FramingError, Message, MessageType, ProtocolViolation,
                       SessionAborted)

STEER_CODE = 4


class Phase(str, Enum):
    TRANSMITTING = "transmitting"
    SIFTING = "sifting"
    DISCLOSING = "disclosing"
    CORRECTING = "correcting"
    QUERYING = "querying"
    DONE = "done"
    ABORTED = "aborted"


PHASE_ORDER = {p: i for i, p in enumerate(Phase)}


class DaveBehaviour(str, Enum):
    HONEST = "honest"
    RANDOM_SYNDROMES = "random_syndromes"
    STEER_MIN = "steer_min"
    STEER_MAX = "steer_max"


@dataclass(frozen=True)
class ProtocolParams:
    geometry: StateGeometry
    H: ParityCheckMatrix
    N: int
    channel: ChannelModel
    thresholds: Thresholds = Thresholds()
    abort_after_failures: int = 3
    key_length: int | None = None
    max_pulses: int | None = None
    batch_size: int = 1 << 20
    anomaly: AnomalyConfig | None = None
    use_gate: bool = False

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if self.abort_after_failures < 1:
            raise ValueError("abort_after_failures must be at least 1")
        if self.key_length is not None:
            if self.key_length < 1 or self.N % self.key_length:
                raise ValueError(f"key length {self.key_length} must divide N={self.N}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.channel.mode == "physical" and not math.isclose(
                self.channel.theta_deg, self.geometry.theta_deg):
            raise ValueError("channel geometry differs from the protocol geometry")

    @property
    def k(self) -> int:
        return self.H.k

    @property
    def r(self) -> int:
        return self.H.r

    @property
    def L(self) -> int:
        """Length of the generated oblivious key (N unless tiling is on)."""
        return self.key_length or self.N

    @property
    def decode_rates(self) -> tuple[float, float]:
        _, e_c, e_i = induced_statistics(self.channel)
        return e_c, e_i

    @property
    def pulse_budget(self) -> int:
        if self.max_pulses is not None:
            return self.max_pulses
        return 10 * required_raw_length(self) + 1000

    def to_dict(self) -> dict:
        out = {
            "theta_deg": self.geometry.theta_deg,
            "k": self.k,
            "r": self.r,
            "N": self.N,
            "thresholds": {"t_U": self.thresholds.t_U, "t_D": self.thresholds.t_D},
            "channel": self.channel.to_dict(),
            "matrix": self.H.serialize(),
            "abort_after_failures": self.abort_after_failures,
            "key_length": self.key_length,
            "max_pulses": self.max_pulses,
            "use_gate": self.use_gate,
        }
        if self.anomaly is not None:
            out["anomaly"] = self.anomaly.to_dict()
        return out

    def digest(self) -> bytes:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).digest()


def required_raw_length(params: ProtocolParams, transmission: float | None = None) -> int:
    """Pulses Dave must send for ``k * L`` expected detections."""
    t = params.channel.transmission if transmission is None else transmission
    if t <= 0.0:
        raise ValueError("transmission must be positive")
    return math.ceil(params.k * params.L / t)


def tile_key(key, N: int) -> np.ndarray:
    key = np.asarray(key, dtype=np.uint8)
    L = key.shape[0]
    if L == 0 or N % L:
        raise ValueError(f"key length {L} does not divide N={N}")
    return np.tile(key, N // L)


def shift_for(i: int, j: int, N: int) -> int:
    return (j - i) % N


def encrypt_database(database, key, s: int) -> np.ndarray:
    """``c_l = x_l XOR key[(l - s) mod N]``."""
    database = np.asarray(database, dtype=np.uint8)
    return database ^ np.roll(tile_key(key, database.shape[0]), s)


def block_parities(sifted: np.ndarray, k: int, order: np.ndarray | None = None) -> np.ndarray:
    arr = sifted if order is None else sifted[order]
    return (arr.reshape(-1, k).sum(axis=1) % 2).astype(np.uint8)


@dataclass
class QueryResult:
    target: int
    bit: int | None
    recovered: dict[int, int] = field(default_factory=dict)
    shift: int | None = None
    anchor: int | None = None
    failed: bool = False

    @property
    def extra_positions(self) -> list[int]:
        return sorted(p for p in self.recovered if p != self.target)


class _Party:
    role = "party"

    def __init__(self, params: ProtocolParams):
        self.params = params
        self.phase = Phase.TRANSMITTING
        self.greeted = False
        self.abort_reason: AbortReason | None = None
        self.abort_detail = ""
        self.attempt = 0
        self.failure_count = 0

    def _set_phase(self, phase: Phase):
        if PHASE_ORDER[phase] < PHASE_ORDER[self.phase] and phase is not Phase.TRANSMITTING:
            raise ProtocolViolation(f"{self.role} cannot move from {self.phase.value} to {phase.value}")
        self.phase = phase

    def _expect(self, *phases: Phase):
        if self.phase not in phases:
            raise ProtocolViolation(f"{self.role} got a message out of phase ({self.phase.value})")

    def _abort(self, reason: AbortReason, detail: str) -> list[Message]:
        self.phase = Phase.ABORTED
        self.abort_reason = reason
        self.abort_detail = detail
        return [wire.abort(reason, detail)]

    def _check_hello(self, msg: Message):
        if self.greeted:
            raise ProtocolViolation("duplicate hello")
        if msg.payload != self.params.digest():
            raise ProtocolViolation("protocol parameters differ", AbortReason.PARAM_MISMATCH)
        self.greeted = True

    def receive(self, msg: Message) -> list[Message]:
        if self.phase is Phase.ABORTED:
            return []
        if msg.type is MessageType.ABORT:
            try:
                reason, detail = wire.parse_abort(msg.payload)
            except FramingError:
                reason, detail = AbortReason.FRAMING, "unreadable abort"
            self.phase = Phase.ABORTED
            self.abort_reason, self.abort_detail = reason, detail
            return []
        try:
            if msg.type is not MessageType.HELLO and not self.greeted:
                raise ProtocolViolation("message before hello")
            return self._handle(msg)
        except ProtocolViolation as exc:
            return self._abort(exc.reason, str(exc))
        except FramingError as exc:
            return self._abort(AbortReason.FRAMING, str(exc))

    def _handle(self, msg: Message) -> list[Message]:
        raise NotImplementedError


class Dave(_Party):
    """The database holder."""

    role = "dave"

    def __init__(self, params: ProtocolParams, database, rng: np.random.Generator,
                 behaviour: DaveBehaviour = DaveBehaviour.HONEST, target_block: int = 0):
        super().__init__(params)
        database = np.asarray(database, dtype=np.uint8)
        if database.shape != (params.N,):
            raise ValueError(f"database must hold N={params.N} bits")
        self.database = database
        self.rng = rng
        self.behaviour = DaveBehaviour(behaviour)
        if not 0 <= target_block < params.L:
            raise ValueError("target block outside the key")
        self.target_block = target_block
        self._reset()

    def _reset(self):
        self.raw_basis: list[np.ndarray] = []
        self.raw_state: list[np.ndarray] = []
        self.raw_steer: list[np.ndarray] = []
        self.sifted_basis = np.zeros(0, np.uint8)
        self.sifted_state = np.zeros(0, np.uint8)
        self.sifted_steered = np.zeros(0, bool)
        self.pulses_sent = 0
        self.order: np.ndarray | None = None
        self.syndromes: np.ndarray | None = None
        self.oblivious_key: np.ndarray | None = None
        self.shift: int | None = None
        self._pending_batch = 0

    @property
    def need(self) -> int:
        return self.params.k * self.params.L

    @property
    def dave_raw(self) -> np.ndarray:
        return np.concatenate(self.raw_basis) if self.raw_basis else np.zeros(0, np.uint8)

    def _next_pulses(self) -> list[Message]:
        p = self.params
        remaining = self.need - self.sifted_basis.shape[0]
        left = p.pulse_budget - self.pulses_sent
        if left <= 0:
            raise ProtocolViolation(f"no detections left after {self.pulses_sent} pulses",
                                    AbortReason.CHANNEL_EXHAUSTED)
        n = min(math.ceil(remaining / p.channel.transmission), p.batch_size, left)
        steer = np.zeros(n, dtype=bool)
        if self.behaviour is DaveBehaviour.STEER_MAX and self.pulses_sent == 0:
            # enough steered pulses that k of them are detected with near certainty
            t = p.channel.transmission
            steer[:p.k if t >= 1.0 else math.ceil(3 * p.k / t) + p.k] = True
        elif self.behaviour is DaveBehaviour.STEER_MIN:
            steer[:] = True
        a = self.rng.integers(0, 2, size=n, dtype=np.uint8)
        b = self.rng.integers(0, 2, size=n, dtype=np.uint8)
        codes = 2 * a + b
        if steer.any():
            flip = 1 if self.behaviour is DaveBehaviour.STEER_MAX else 0
            codes = np.where(steer, STEER_CODE + (b ^ flip), codes).astype(np.uint8)
        self.raw_basis.append(a)
        self.raw_state.append(b)
        self.raw_steer.append(steer)
        self.pulses_sent += n
        self._pending_batch = n
        self._set_phase(Phase.TRANSMITTING)
        return [wire.pulse(codes)]

    def _handle(self, msg: Message) -> list[Message]:
        t = msg.type
        if t is MessageType.HELLO:
            self._check_hello(msg)
            return [wire.hello(self.params.digest())] + self._next_pulses()
        if t is MessageType.DETECT_REPORT:
            self._expect(Phase.TRANSMITTING)
            mask = wire.parse_bits(msg.payload, t).astype(bool)
            if mask.shape[0] != self._pending_batch:
                raise ProtocolViolation("detection report does not match the last pulse batch")
            got = self.sifted_basis.shape[0] + int(mask.sum())
            if got > self.need:
                raise ProtocolViolation("more detections reported than requested")
            self.sifted_basis = np.concatenate([self.sifted_basis, self.raw_basis[-1][mask]])
            self.sifted_state = np.concatenate([self.sifted_state, self.raw_state[-1][mask]])
            self.sifted_steered = np.concatenate([self.sifted_steered, self.raw_steer[-1][mask]])
            self._pending_batch = 0
            if got == self.need:
                self._set_phase(Phase.SIFTING)
                return []
            return self._next_pulses()
        if t is MessageType.SHIFT:
            self._expect(Phase.QUERYING)
            s = wire.parse_shift(msg.payload)
            if s is None:
                self.failure_count += 1
                if self.failure_count >= self.params.abort_after_failures:
                    raise ProtocolViolation(f"{self.failure_count} failed queries",
                                            AbortReason.TOO_MANY_FAILURES)
                self.attempt += 1
                self._reset()
                return self._next_pulses()
            if not 0 <= s < self.params.N:
                raise ProtocolViolation(f"shift {s} outside [0, N)")
            self.shift = s
            cipher = encrypt_database(self.database, self.oblivious_key, s)
            self._set_phase(Phase.DONE)
            return [wire.bit_message(MessageType.ENCRYPTED_DATABASE, cipher)]
        raise ProtocolViolation(f"dave does not accept {t.name}")

    @property
    def ready_to_disclose(self) -> bool:
        return self.phase is Phase.SIFTING

    def _block_order(self) -> np.ndarray | None:
        if self.behaviour is not DaveBehaviour.STEER_MAX:
            return None
        k = self.params.k
        steered = np.flatnonzero(self.sifted_steered)[:k]
        rest = np.setdiff1d(np.arange(self.need), steered)
        head = rest[:self.target_block * k]
        tail = rest[self.target_block * k:]
        return np.concatenate([head, steered, tail]).astype(np.int64)

    def disclose(self) -> list[Message]:
        """State disclosure, block map and syndromes, sent back to back."""
        if not self.ready_to_disclose:
            raise ProtocolViolation("sifted key is not complete")
        p = self.params
        self._set_phase(Phase.DISCLOSING)
        self.order = self._block_order()
        blocks = (self.sifted_basis if self.order is None else self.sifted_basis[self.order])
        blocks = blocks.reshape(p.L, p.k)
        self.oblivious_key = (blocks.sum(axis=1) % 2).astype(np.uint8)
        if self.behaviour is DaveBehaviour.RANDOM_SYNDROMES:
            self.syndromes = self.rng.integers(0, 2, size=(p.L, p.r), dtype=np.uint8)
        else:
            self.syndromes = compute_syndrome(p.H, blocks)
        out = [wire.bit_message(MessageType.STATE_DISCLOSURE, self.sifted_state),
               wire.block_map(p.L, p.k, self.order),
               wire.syndromes(self.syndromes)]
        self._set_phase(Phase.CORRECTING)
        self._set_phase(Phase.QUERYING)
        return out


class Ursula(_Party):
    """The user: measures pulses, decodes the oblivious key and queries one position."""

    role = "ursula"

    def __init__(self, params: ProtocolParams, loss_rng: np.random.Generator,
                 measure_rng: np.random.Generator, choice_rng: np.random.Generator):
        super().__init__(params)
        self.loss_rng = loss_rng
        self.measure_rng = measure_rng
        self.choice_rng = choice_rng
        self.result: QueryResult | None = None
        self.results: list[QueryResult] = []
        self.anomaly_verdict = None
        self._reset()

    def _reset(self):
        self._basis: list[np.ndarray] = []
        self._outcome: list[np.ndarray] = []
        self.n_detected = 0
        self.pulses_seen = 0
        self.conclusive: np.ndarray | None = None
        self.bits: np.ndarray | None = None
        self.order: np.ndarray | None = None
        self.key: np.ndarray | None = None
        self.e_k: np.ndarray | None = None
        self.received_syndromes: np.ndarray | None = None
        self._disclosed = False
        self.ready_to_query = False
        self.shift: int | None = None
        self.anchor: int | None = None
        self.target: int | None = None

    @property
    def need(self) -> int:
        return self.params.k * self.params.L

    def hello(self) -> Message:
        return wire.hello(self.params.digest())

    def _measure(self, codes: np.ndarray):
        p = self.params
        theta = p.geometry.theta
        honest = codes < STEER_CODE
        basis = np.zeros(codes.shape[0], np.uint8)
        outcome = np.zeros(codes.shape[0], np.uint8)
        if honest.any():
            c = codes[honest]
            meas = measure_pulses(p.channel, c >> 1, c & 1, self.measure_rng)
            basis[honest], outcome[honest] = meas.basis, meas.outcome
        if (~honest).any():
            half = (codes[~honest] - STEER_CODE).astype(float)
            meas = born_measure(theta / 2 + half * (math.pi / 2), self.measure_rng, theta)
            basis[~honest], outcome[~honest] = meas.basis, meas.outcome
        return basis, outcome

    def _handle(self, msg: Message) -> list[Message]:
        t = msg.type
        p = self.params
        if t is MessageType.HELLO:
            self._check_hello(msg)
            return []
        if t is MessageType.PULSE:
            self._expect(Phase.TRANSMITTING)
            codes = wire.parse_pulse(msg.payload)
            detected = sample_detection(p.channel, codes.shape[0], self.loss_rng)
            keep = np.flatnonzero(detected)[:self.need - self.n_detected]
            mask = np.zeros(codes.shape[0], dtype=np.uint8)
            mask[keep] = 1
            basis, outcome = self._measure(codes[keep])
            self._basis.append(basis)
            self._outcome.append(outcome)
            self.n_detected += keep.shape[0]
            self.pulses_seen += codes.shape[0]
            if self.n_detected == self.need:
                self._set_phase(Phase.SIFTING)
            return [wire.bit_message(MessageType.DETECT_REPORT, mask)]
        if t is MessageType.STATE_DISCLOSURE:
            self._expect(Phase.SIFTING)
            declared = wire.parse_bits(msg.payload, t)
            if declared.shape[0] != self.need:
                raise ProtocolViolation("state disclosure length differs from the sifted key")
            basis = np.concatenate(self._basis)
            outcome = np.concatenate(self._outcome)
            self.conclusive = outcome != declared
            self.bits = np.where(self.conclusive, 1 - basis, basis).astype(np.uint8)
            self._set_phase(Phase.DISCLOSING)
            return []
        if t is MessageType.BLOCK_MAP:
            self._expect(Phase.DISCLOSING)
            n_blocks, k, order = wire.parse_block_map(msg.payload)
            if (n_blocks, k) != (p.L, p.k):
                raise ProtocolViolation("block map does not match the key dimensions")
            self.order = order
            self._set_phase(Phase.CORRECTING)
            return []
        if t is MessageType.SYNDROMES:
            self._expect(Phase.CORRECTING)
            if self.key is not None:
                raise ProtocolViolation("duplicate syndromes")
            syn = wire.parse_syndromes(msg.payload)
            if syn.shape != (p.L, p.r):
                raise ProtocolViolation("syndrome block does not match the code")
            self._correct(syn)
            return []
        if t is MessageType.ENCRYPTED_DATABASE:
            self._expect(Phase.QUERYING)
            if self.shift is None:
                raise ProtocolViolation("encrypted database before a shift")
            cipher = wire.parse_bits(msg.payload, t)
            if cipher.shape[0] != p.N:
                raise ProtocolViolation("encrypted database has the wrong length")
            self.result = self._decrypt(cipher)
            self.results.append(self.result)
            self._set_phase(Phase.DONE)
            return []
        raise ProtocolViolation(f"ursula does not accept {t.name}")

    def _blocks(self, arr: np.ndarray) -> np.ndarray:
        arr = arr if self.order is None else arr[self.order]
        return arr.reshape(self.params.L, self.params.k)

    def _correct(self, syn: np.ndarray):
        p = self.params
        rates = p.decode_rates
        u = self._blocks(self.bits)
        conc = self._blocks(self.conclusive)
        table = decode_table(p.H, rates)
        key, e_k = table.decode(u, conc, syn)
        if p.use_gate:
            bound = table.gate_bound(p.thresholds.t_U)
            gated = (p.k - conc.sum(axis=1)) > bound
            if gated.any():
                key[gated] = (u[gated].sum(axis=1) % 2).astype(np.uint8)
                e_k[gated] = [tag_only_error(c, rates) for c in conc[gated]]
        self.key, self.e_k = key, np.asarray(e_k, dtype=float)
        self.received_syndromes = syn
        if p.anomaly is not None:
            verdict = anomaly_detector(p.H, compute_syndrome(p.H, u), syn, conc, self.e_k,
                                       rates, p.anomaly)
            self.anomaly_verdict = verdict
            if not verdict.ok:
                raise ProtocolViolation(verdict.reason, AbortReason.CHEAT_DETECTED)
        self.ready_to_query = True

    @property
    def known_indices(self) -> np.ndarray:
        if self.e_k is None:
            return np.zeros(0, dtype=np.int64)
        return np.flatnonzero(self.e_k <= self.params.thresholds.t_U)

    def key_view(self) -> list[tuple[int | None, float]]:
        if self.key is None:
            return []
        return [(None if e >= 0.5 else int(b), float(e)) for b, e in zip(self.key, self.e_k)]

    def query(self, j: int) -> list[Message]:
        """Send the shift aligning a known key bit with database index ``j``."""
        p = self.params
        if not self.ready_to_query:
            raise ProtocolViolation("ursula has not finished error correction")
        if not 0 <= j < p.N:
            raise ValueError(f"query index {j} outside [0, {p.N})")
        self.ready_to_query = False
        known = self.known_indices
        if known.size == 0:
            self.result = QueryResult(target=j, bit=None, failed=True)
            self.results.append(self.result)
            self.failure_count += 1
            self.attempt += 1
            self._reset()
            self._set_phase(Phase.TRANSMITTING)
            return [wire.shift(None)]
        i = int(self.choice_rng.choice(known))
        self.anchor, self.target = i, j
        self.shift = shift_for(i, j, p.N)
        self._set_phase(Phase.QUERYING)
        return [wire.shift(self.shift)]

    def _decrypt(self, cipher: np.ndarray) -> QueryResult:
        p = self.params
        copies = p.N // p.L
        recovered = {}
        for i in self.known_indices:
            for m in range(copies):
                pos = int(i) + m * p.L
                l = (pos + self.shift) % p.N
                recovered[l] = int(cipher[l] ^ self.key[i])
        return QueryResult(target=self.target, bit=recovered.get(self.target),
                           recovered=recovered, shift=self.shift, anchor=self.anchor)


@dataclass
class SessionState:
    phase: Phase
    dave_phase: Phase
    ursula_phase: Phase
    dave_raw: np.ndarray
    dave_sifted: np.ndarray
    dave_oblivious: np.ndarray | None
    ursula_bits: np.ndarray | None
    ursula_conclusive: np.ndarray | None
    ursula_key_view: list
    shift: int | None
    failure_count: int
    pulses_sent: int
    abort_reason: AbortReason | None = None


def party_streams(seed) -> dict[str, np.random.Generator]:
    """Independent generators for Dave, channel loss, measurement and Ursula's choices."""
    ss = np.random.SeedSequence(seed)
    names = ("dave", "loss", "measure", "ursula")
    return {n: np.random.default_rng(s) for n, s in zip(names, ss.spawn(len(names)))}


def make_dave(params: ProtocolParams, database, seed, **kw) -> Dave:
    return Dave(params, database, party_streams(seed)["dave"], **kw)


def make_ursula(params: ProtocolParams, seed) -> Ursula:
    st = party_streams(seed)
    return Ursula(params, st["loss"], st["measure"], st["ursula"])


class Session:
    """Both parties in one process, advanced by a single message queue."""

    def __init__(self, params: ProtocolParams, database, seed=None,
                 behaviour: DaveBehaviour = DaveBehaviour.HONEST, target_block: int = 0):
        self.params = params
        self.dave = make_dave(params, database, seed, behaviour=behaviour,
                              target_block=target_block)
        self.ursula = make_ursula(params, seed)
        self.transcript: list[tuple[str, Message]] = []
        self._queue: deque[tuple[str, Message]] = deque()
        self._started = False

    def _post(self, sender: str, msgs: list[Message]):
        for m in msgs:
            self.transcript.append((sender, m))
            self._queue.append((sender, m))

    def _deliver_one(self):
        sender, msg = self._queue.popleft()
        if sender == "dave":
            self._post("ursula", self.ursula.receive(msg))
        else:
            self._post("dave", self.dave.receive(msg))

    def _pump(self, stop):
        while self._queue and not stop():
            self._deliver_one()

    @property
    def aborted(self) -> bool:
        return Phase.ABORTED in (self.dave.phase, self.ursula.phase)

    def _check(self):
        if self.aborted:
            # let the pending Abort reach the other side before reporting it
            self._pump(lambda: False)
            party = self.dave if self.dave.abort_reason is not None else self.ursula
            raise SessionAborted(party.abort_reason or AbortReason.PROTOCOL_VIOLATION,
                                 party.abort_detail)

    def run_sifting(self) -> SessionState:
        if not self._started:
            self._started = True
            self._post("ursula", [self.ursula.hello()])
        self._pump(lambda: self.dave.ready_to_disclose or self.aborted)
        self._check()
        if not self.dave.ready_to_disclose:
            raise RuntimeError("session is not in the transmitting phase")
        return self.state

    def run_disclosure_and_correction(self) -> SessionState:
        if not self.dave.ready_to_disclose:
            raise RuntimeError("sifting has not completed")
        self._post("dave", self.dave.disclose())
        self._pump(lambda: False)
        self._check()
        return self.state

    def run_query(self, j: int) -> QueryResult:
        self._post("ursula", self.ursula.query(j))
        self._deliver_one()
        if self._queue and self._queue[0][1].type in (MessageType.ENCRYPTED_DATABASE,
                                                      MessageType.ABORT):
            self._deliver_one()
        result = self.ursula.results[-1]
        if not result.failed:
            self._check()
        return result

    def run(self, j: int) -> QueryResult:
        """Repeat key generation until a query succeeds or Dave gives up."""
        while True:
            self.run_sifting()
            self.run_disclosure_and_correction()
            result = self.run_query(j)
            if self.aborted:
                self._check()
            if not result.failed:
                return result

    @property
    def state(self) -> SessionState:
        d, u = self.dave, self.ursula
        if Phase.ABORTED in (d.phase, u.phase):
            phase = Phase.ABORTED
        else:
            phase = min(d.phase, u.phase, key=PHASE_ORDER.get)
        return SessionState(
            phase=phase, dave_phase=d.phase, ursula_phase=u.phase,
            dave_raw=d.dave_raw, dave_sifted=d.sifted_basis, dave_oblivious=d.oblivious_key,
            ursula_bits=u.bits, ursula_conclusive=u.conclusive, ursula_key_view=u.key_view(),
            shift=d.shift, failure_count=d.failure_count, pulses_sent=d.pulses_sent,
            abort_reason=d.abort_reason or u.abort_reason)
