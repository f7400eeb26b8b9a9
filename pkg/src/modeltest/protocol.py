"""Three-party testing protocol: sampling oracles, a Learner holding ``theta_star``,
and an Auditor that only ever sees scalar scores.

Every message crosses an in-process bus that serializes it to JSON and parses
it back before delivery, so what the Auditor can read is exactly what the
transcript records.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import linalg, mestim, models, procedures as P
from .errors import MalformedTranscriptError, PreconditionError
from .models import ModelSpec, Sample

AUDITOR, LEARNER = "auditor", "learner"
KINDS = ("SampleSizeRequest", "SampleDelivery", "ScoreReport", "Decision")
SCORE_FNS = ("projected_residual", "newton_decrement", "newton_decrement_adaptive",
             "glm_local_residual")


def oracle_role(k: int) -> str:
    return f"oracle:{k}"


def sample_to_payload(s: Sample) -> dict:
    out = {"design": s.design.tolist(), "labels": s.labels.tolist()}
    if s.resampled_labels is not None:
        out["resampled_labels"] = s.resampled_labels.tolist()
    return out


def sample_from_payload(d: dict) -> Sample:
    X = np.asarray(d["design"], dtype=float).reshape(len(d["labels"]), -1)
    return Sample(X, d["labels"], d.get("resampled_labels"))


@dataclass(frozen=True)
class Message:
    sender: str
    recipient: str
    kind: str
    seq: int
    payload: dict

    def to_dict(self) -> dict:
        return {"seq": self.seq, "from": self.sender, "to": self.recipient,
                "kind": self.kind, "payload": self.payload}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Message":
        try:
            msg = cls(str(d["from"]), str(d["to"]), str(d["kind"]), int(d["seq"]),
                      dict(d["payload"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedTranscriptError(f"bad message record: {exc}") from None
        if msg.kind not in KINDS:
            raise MalformedTranscriptError(f"unknown message kind {msg.kind!r}")
        return msg


@dataclass
class Transcript:
    messages: list = field(default_factory=list)

    @property
    def outcome(self) -> Optional[int]:
        for m in reversed(self.messages):
            if m.kind == "Decision":
                return int(m.payload["decision"])
        return None

    def to_jsonl(self) -> str:
        return "".join(m.to_json() + "\n" for m in self.messages)

    @classmethod
    def from_jsonl(cls, text: str) -> "Transcript":
        msgs = []
        for i, line in enumerate(text.splitlines()):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedTranscriptError(f"line {i + 1}: {exc}") from None
            msgs.append(Message.from_dict(rec))
        t = cls(msgs)
        validate_transcript(t)
        return t


_STEP = {k: i for i, k in enumerate(KINDS)}


def validate_transcript(t: Transcript) -> None:
    """Sequence numbers strictly increase and steps never go backwards."""
    if not t.messages:
        raise MalformedTranscriptError("empty transcript")
    last_seq, last_step = -1, 0
    for m in t.messages:
        if not isinstance(m, Message):
            raise MalformedTranscriptError("transcript entries must be messages")
        if m.seq <= last_seq:
            raise MalformedTranscriptError(f"message seq {m.seq} out of order")
        step = _STEP.get(m.kind)
        if step is None:
            raise MalformedTranscriptError(f"unknown message kind {m.kind!r}")
        if step < last_step:
            raise MalformedTranscriptError(f"{m.kind} at seq {m.seq} after a later protocol step")
        last_seq, last_step = m.seq, step


class Bus:
    """Delivers messages by value: serialize, record, parse back, enqueue."""

    def __init__(self):
        self.transcript = Transcript()
        self.inbox: dict[str, list] = {}
        self._seq = 0

    def send(self, sender: str, recipient: str, kind: str, payload: dict) -> Message:
        wire = Message(sender, recipient, kind, self._seq, payload).to_json()
        self._seq += 1
        msg = Message.from_dict(json.loads(wire))
        self.transcript.messages.append(msg)
        self.inbox.setdefault(recipient, []).append(msg)
        return msg

    def receive(self, role: str) -> list:
        return self.inbox.pop(role, [])


# ---------------------------------------------------------------------------
# parties


@dataclass(eq=False)
class LearnerState:
    """The Learner's private state. ``theta_star`` never leaves this object.

    ``leak`` exists only to build negative audit fixtures: ``"theta"``
    attaches ``theta_star`` to the score report, ``"sample"`` forwards a raw
    sample to the Auditor.
    """

    theta_star: np.ndarray
    loss: mestim.LossModel
    score_fn: str = "projected_residual"
    nu: Optional[Sequence[float]] = None
    tol: object = None
    leak: Optional[str] = None

    def __post_init__(self):
        self.theta_star = np.asarray(self.theta_star, dtype=float).reshape(-1)
        if self.score_fn not in SCORE_FNS:
            raise PreconditionError(f"unknown score_fn {self.score_fn!r}; known: {SCORE_FNS}")
        if self.leak not in (None, "theta", "sample"):
            raise PreconditionError("leak must be None, 'theta' or 'sample'")

    @property
    def needs_resample(self) -> bool:
        return self.score_fn == "glm_local_residual" and self.nu is None

    def score(self, k: int, s: Sample) -> tuple[float, float]:
        """(raw statistic, debiasing term) for sample ``k``; the score is their difference."""
        theta = self.theta_star
        if s.d != theta.size:
            raise PreconditionError(f"sample {k} has d={s.d}, theta_star has {theta.size}")
        if self.score_fn == "projected_residual":
            return P._projected(s, theta, self.tol)
        if self.score_fn == "newton_decrement":
            dec = mestim.decrement(self.loss, s, theta, self.tol)
            return dec.value, float(dec.rank)
        if self.score_fn == "newton_decrement_adaptive":
            a, b, _ = P.split_halves(s)
            return (mestim.newton_decrement(self.loss, s, theta, self.tol),
                    P.estimate_trace(self.loss, a, b, theta, self.tol))
        family = self.loss.family
        rho, _ = models.local_residuals(family, s, theta)
        nu = P.estimate_nu(family, s, theta) if self.nu is None else float(self.nu[k])
        return float(rho @ rho), s.n * nu


def auditor_decide(scores: Sequence[Sequence[float]]) -> int:
    """Index of the smallest debiased score; ties go to the largest index."""
    debiased = [float(a) - float(b) for a, b in scores]
    best = min(debiased)
    return max(i for i, v in enumerate(debiased) if v == best)


def run_protocol(learner: LearnerState, oracles: Sequence[ModelSpec], sizes: Sequence[int],
                 rng: np.random.Generator) -> tuple[int, Transcript]:
    m = len(oracles)
    if m < 2:
        raise PreconditionError("the protocol needs at least two oracles")
    if len(sizes) != m:
        raise PreconditionError(f"{len(sizes)} sample sizes for {m} oracles")
    if any(int(n) < 1 for n in sizes):
        raise PreconditionError("sample sizes must be >= 1")
    bus = Bus()
    streams = rng.spawn(m)

    # 1. Auditor fixes the sample sizes
    for k in range(m):
        bus.send(AUDITOR, oracle_role(k), "SampleSizeRequest",
                 {"n": int(sizes[k]), "resample": learner.needs_resample})
    # 2. each oracle samples and ships to the Learner only
    for k, spec in enumerate(oracles):
        (req,) = bus.receive(oracle_role(k))
        s = models.draw_sample(spec, req.payload["n"], streams[k])
        if req.payload["resample"]:
            s = models.resample_labels(spec, s, streams[k])
        bus.send(oracle_role(k), LEARNER, "SampleDelivery",
                 {"oracle": k, "sample": sample_to_payload(s)})
    # 3. Learner scores every hypothesis
    samples = {}
    for msg in bus.receive(LEARNER):
        samples[msg.payload["oracle"]] = sample_from_payload(msg.payload["sample"])
    if learner.leak == "sample":
        bus.send(LEARNER, AUDITOR, "SampleDelivery",
                 {"oracle": 0, "sample": sample_to_payload(samples[0])})
    scores = [list(learner.score(k, samples[k])) for k in range(m)]
    report = {"scores": scores}
    if learner.leak == "theta":
        report["diagnostics"] = {"theta": learner.theta_star.tolist()}
    bus.send(LEARNER, AUDITOR, "ScoreReport", report)
    # 4. Auditor picks the best fit
    reports = [msg for msg in bus.receive(AUDITOR) if msg.kind == "ScoreReport"]
    decision = auditor_decide(reports[-1].payload["scores"])
    bus.send(AUDITOR, LEARNER, "Decision", {"decision": decision})
    return decision, bus.transcript


# ---------------------------------------------------------------------------
# audit


@dataclass(frozen=True)
class AuditReport:
    ok: bool
    violations: list

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violations": list(self.violations)}


def _is_numeric_vector(v) -> bool:
    return isinstance(v, list) and len(v) >= 2


def _scan(obj, path: str, hits: list) -> None:
    if isinstance(obj, dict):
        for k, v in obj.items():
            if k in ("sample", "design", "labels", "resampled_labels"):
                hits.append(f"{path}.{k}: raw sample data")
                continue
            _scan(v, f"{path}.{k}", hits)
    elif isinstance(obj, list):
        if _is_numeric_vector(obj):
            hits.append(f"{path}: vector of length {len(obj)}")
        else:
            for i, v in enumerate(obj):
                _scan(v, f"{path}[{i}]", hits)


def audit_nondisclosure(t: Transcript) -> AuditReport:
    """Flag any Auditor-bound message carrying sample data or a vector.

    The only list structure allowed is ``ScoreReport.scores``: a list of
    scalar (statistic, debias) pairs.
    """
    validate_transcript(t)
    violations = []
    for m in t.messages:
        if m.recipient != AUDITOR:
            continue
        hits: list = []
        if m.kind == "SampleDelivery":
            hits.append("sample delivered to auditor")
        payload = dict(m.payload)
        if m.kind == "ScoreReport" and "scores" in payload:
            scores = payload.pop("scores")
            ok = isinstance(scores, list) and all(
                isinstance(p, list) and len(p) == 2
                and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in p)
                for p in scores)
            if not ok:
                hits.append("scores must be a list of scalar pairs")
        _scan(payload, "payload", hits)
        violations.extend({"seq": m.seq, "kind": m.kind, "reason": h} for h in hits)
    return AuditReport(not violations, violations)


# ---------------------------------------------------------------------------
# data deletion


@dataclass(frozen=True)
class DeletionResult:
    decision: int
    transcript: Transcript
    ground_truth: int

    @property
    def correct(self) -> bool:
        return self.decision == self.ground_truth


def deletion_scenario(base: ModelSpec, deletion_set: ModelSpec, delta: float, complied: bool,
                      sizes: Sequence[int], rng: np.random.Generator,
                      score_fn: str = "projected_residual", loss: Optional[mestim.LossModel] = None,
                      leak: Optional[str] = None) -> DeletionResult:
    """Did the Learner retrain without the deleted share ``delta``?

    Oracle 0 samples the pre-deletion law ``(1 - delta) P1 + delta Q``, oracle 1
    the post-deletion law ``P1``. A compliant Learner holds the minimizer
    of ``P1`` (ground truth 1), a violating one that of the mixture (0).
    """
    if not 0.0 <= delta < 1.0:
        raise PreconditionError("delta must lie in [0, 1)")
    if base.d != deletion_set.d or models._family_of(base).name != models._family_of(deletion_set).name:
        raise PreconditionError("base and deletion set must share dimension and family")
    mixture = models.MixtureSpec(((1.0 - delta, base), (delta, deletion_set)))
    held = base if complied else mixture
    theta_star = models.population_minimizer(held, rng)
    if loss is None:
        fam = models._family_of(base).name
        loss = mestim.SquaredLoss(base.d) if fam == "gaussian" else mestim.GlmLoss(base.d, fam)
    learner = LearnerState(theta_star, loss, score_fn, leak=leak)
    decision, transcript = run_protocol(learner, [mixture, base], sizes, rng)
    return DeletionResult(decision, transcript, 1 if complied else 0)
