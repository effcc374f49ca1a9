"""Online greedy placement of requests, segment by segment."""

import logging
import math
from collections.abc import Mapping, Sequence
from enum import Enum
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, Field, confloat, conint, model_validator

from private_placement.core.fleet import Fleet, InsufficientResource, ResourceLedger
from private_placement.core.model import (
    DEFAULT_WORD_BITS,
    LayerKind,
    first_fc_index,
    segment_cost,
    segment_count,
    segment_memory_bits,
)
from private_placement.core.placement import (
    Assignment,
    Constraint,
    Request,
    request_latency,
    request_shared_bits,
    resolve_policy,
    segment_senders,
)
from private_placement.core.privacy import PrivacyPolicy, cap_for_layer, pinned_layers
from private_placement.core.util import min_max

log = logging.getLogger(__name__)

_RESOURCE_TAGS = {
    "memory": Constraint.MEMORY,
    "compute": Constraint.COMPUTE,
    "bandwidth": Constraint.BANDWIDTH,
}


class TieBreak(str, Enum):
    """How to order candidates with equal scores."""

    DEVICE_ID = "device_id"
    RANDOM = "random"


class GreedyConfig(BaseModel, frozen=True):
    """Settings of the greedy scheduler."""

    # Weight of the normalized latency.
    alpha: confloat(ge=0.0, le=1.0) = 0.7

    # Weight of the normalized inverse remaining bandwidth.
    beta: confloat(ge=0.0, le=1.0) = 0.3

    tie_break: TieBreak = TieBreak.DEVICE_ID
    seed: int = 0
    word_bits: conint(ge=1) = DEFAULT_WORD_BITS

    # Whether to record a decision per placement step.
    trace: bool = False

    @model_validator(mode="after")
    def _check_weights(self):
        if not math.isclose(self.alpha + self.beta, 1.0, abs_tol=1e-9):
            raise ValueError(f"alpha + beta must be 1, got {self.alpha} + {self.beta}.")
        return self


class Decision(BaseModel, frozen=True):
    """One placement step."""

    request: str
    layer: int
    segment: int

    # Number of segments placed together in this step.
    segments: int = 1

    device: str | None
    t: float
    nrm: float
    pinned: bool = False
    candidates: int = 0
    failed: tuple[Constraint, ...] = ()


class CandidateScores(NamedTuple):
    """Helpers in ranking order with their estimated time and score."""

    devices: np.ndarray
    t: np.ndarray
    nrm: np.ndarray


class PlacementOutcome(BaseModel, arbitrary_types_allowed=True):
    """The result of placing one request."""

    request: str

    # Placement of the request's segments. Empty if rejected.
    assignment: Assignment = Field(default_factory=Assignment)

    latency: float = 0.0
    shared_bits: int = 0
    rejected: bool = False

    # Constraints that ruled out the last candidates of a rejected request.
    reasons: tuple[Constraint, ...] = ()

    trace: tuple[Decision, ...] = ()


class BatchResult(BaseModel, arbitrary_types_allowed=True):
    """The result of placing a batch of requests against one ledger."""

    outcomes: list[PlacementOutcome] = Field(default_factory=list)
    assignment: Assignment = Field(default_factory=Assignment)
    rejections: list[str] = Field(default_factory=list)
    total_latency: float = 0.0
    shared_bits: int = 0


def _transmit_times(volumes: Mapping[int, int], rates: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    # Slowest sender per candidate. A candidate never sends to itself.
    tx = np.zeros(len(candidates), dtype=np.float64)
    if not volumes:
        return tx
    senders = np.fromiter(volumes.keys(), dtype=np.int64, count=len(volumes))
    times = np.fromiter(volumes.values(), dtype=np.float64, count=len(volumes)) / rates[senders]
    order = np.argsort(-times, kind="stable")
    tx[:] = times[order[0]]
    tx[candidates == senders[order[0]]] = times[order[1]] if len(order) > 1 else 0.0
    return tx


def _bandwidth_ok(volumes: Mapping[int, int], bw: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    short = [i for i, v in volumes.items() if v > bw[i]]
    if not short:
        return np.ones(len(candidates), dtype=bool)
    if len(short) == 1:
        return candidates == short[0]
    return np.zeros(len(candidates), dtype=bool)


def _rank(
    candidates: np.ndarray,
    volumes: Mapping[int, int],
    cost: int,
    fleet: Fleet,
    ledger: ResourceLedger,
    config: GreedyConfig,
    rng: np.random.Generator | None,
) -> CandidateScores:
    t = _transmit_times(volumes, fleet.rates, candidates) + cost / fleet.speeds[candidates]

    bw = ledger.bw[candidates].astype(np.float64)
    inv_bw = np.ones(len(candidates), dtype=np.float64)
    positive = bw > 0
    if positive.any():
        inv_bw[positive] = min_max(1.0 / bw[positive])

    nrm = config.alpha * min_max(t) + config.beta * inv_bw

    if config.tie_break == TieBreak.RANDOM:
        key = (rng if rng is not None else np.random.default_rng(config.seed)).random(len(candidates))
    else:
        key = candidates

    order = np.lexsort((key, nrm))
    return CandidateScores(devices=candidates[order], t=t[order], nrm=nrm[order])


def _sender_indices(senders: Mapping[str, int], fleet: Fleet) -> dict[int, int]:
    return {fleet.index(i): v for i, v in senders.items()}


def score_candidates(
    request: Request,
    l: int,
    p: int,
    fleet: Fleet,
    ledger: ResourceLedger,
    assignment: Assignment,
    config: GreedyConfig | None = None,
    rng: np.random.Generator | None = None,
) -> CandidateScores:
    """
    Rank the helpers for segment p of layer l.

    Each helper j gets the time t(j), the slowest transmission of the segment's input to j plus the segment's compute
    time on j. Helpers are ordered by alpha · t̃(j) + beta · (1/b(j))~, where ~ is min-max normalization over the
    helpers and b(j) is the remaining bandwidth of j. A helper without bandwidth left scores 1 on the second term.

    Parameters
    ----------
    request : Request
        The request.
    l : int
        The layer.
    p : int
        The segment.
    fleet : Fleet
        The devices.
    ledger : ResourceLedger
        The remaining budgets.
    assignment : Assignment
        Placement of the preceding layers of the request.
    config : GreedyConfig | None
        Weights and tie-breaking.
    rng : np.random.Generator | None
        Random source for random tie-breaking.

    Returns
    -------
    CandidateScores
        The helpers in ranking order.

    Raises
    ------
    ValueError
        If the fleet has no helpers.
    """
    config = config or GreedyConfig()
    candidates = fleet.helper_indices
    if candidates.size == 0:
        raise ValueError("The fleet has no helpers.")
    volumes = _sender_indices(segment_senders(assignment, request, l, p, config.word_bits), fleet)
    return _rank(candidates, volumes, segment_cost(request.cnn, l), fleet, ledger, config, rng)


def _failures(fit_mem, fit_comp, bw_ok, cap_ok) -> tuple[Constraint, ...]:
    failed = []
    if not fit_mem.all():
        failed.append(Constraint.MEMORY)
    if not fit_comp.all():
        failed.append(Constraint.COMPUTE)
    if not bw_ok.all():
        failed.append(Constraint.BANDWIDTH)
    if not cap_ok.all():
        failed.append(Constraint.PRIVACY)
    return tuple(failed)


def place_request(
    request: Request,
    fleet: Fleet,
    ledger: ResourceLedger,
    policy: PrivacyPolicy | Mapping[str, PrivacyPolicy] | None,
    config: GreedyConfig | None = None,
    rng: np.random.Generator | None = None,
) -> PlacementOutcome:
    """
    Place all segments of a request, layer by layer.

    The source computes the first and the last layer, and the first fully connected layer if it precedes the split
    point. The first fully connected layer after the split point goes to a single helper. Every other segment goes to
    the best ranked helper that has the memory and compute for it, whose input senders have the bandwidth, and that
    stays within the layer's privacy cap. Resources are deducted from the ledger as segments are placed.

    If some segment has no such helper, the request is rejected and the ledger is restored to its state before the
    request.

    Parameters
    ----------
    request : Request
        The request.
    fleet : Fleet
        The devices.
    ledger : ResourceLedger
        Remaining budgets of the period, updated in place.
    policy : PrivacyPolicy | Mapping[str, PrivacyPolicy] | None
        Privacy caps.
    config : GreedyConfig | None
        Settings.
    rng : np.random.Generator | None
        Random source for random tie-breaking.

    Returns
    -------
    PlacementOutcome
        The outcome.
    """
    config = config or GreedyConfig()
    b = config.word_bits
    cnn = request.cnn
    rid = request.id
    policy = resolve_policy(policy, cnn)
    pinned = pinned_layers(cnn, policy)
    fc = first_fc_index(cnn)

    if rng is None and config.tie_break == TieBreak.RANDOM:
        rng = np.random.default_rng(config.seed)

    src = fleet.index(request.source)
    ids = [d.id for d in fleet.devices]
    helpers = fleet.helper_indices

    before = ledger.copy()
    fragment = Assignment()
    trace: list[Decision] = []

    def reject(l: int, p: int, reasons: tuple[Constraint, ...]) -> PlacementOutcome:
        ledger.restore(before)
        log.debug("rejected %s at layer %d segment %d: %s", rid, l, p, ", ".join(r.value for r in reasons))
        if config.trace:
            trace.append(Decision(request=rid, layer=l, segment=p, device=None, t=0.0, nrm=0.0, failed=reasons))
        return PlacementOutcome(request=rid, rejected=True, reasons=reasons, trace=tuple(trace))

    for l in range(1, cnn.num_layers + 1):
        n = segment_count(cnn, l)
        cost = segment_cost(cnn, l)
        mem = segment_memory_bits(cnn, l, b)

        prev_holders = None
        if l > 1 and cnn.layer(l - 1).kind == LayerKind.CONV:
            prev_holders = set(fragment.layer(rid, l - 1).values())

        if l in pinned:
            for p in range(1, n + 1):
                volumes = _sender_indices(segment_senders(fragment, request, l, p, b, prev_holders), fleet)
                volumes.pop(src, None)
                try:
                    ledger.reserve(src, mem, cost, volumes)
                except InsufficientResource as e:
                    return reject(l, p, (_RESOURCE_TAGS[e.resource], Constraint.SOURCE_PINNING))
                fragment.assign(rid, l, p, request.source)
                if config.trace:
                    trace.append(
                        Decision(request=rid, layer=l, segment=p, device=request.source, t=0.0, nrm=0.0, pinned=True)
                    )
            continue

        if helpers.size == 0:
            return reject(l, 1, (Constraint.COVERAGE,))

        if l == fc:
            # Whole layer on one helper.
            totals: dict[int, int] = {}
            for p in range(1, n + 1):
                for i, v in _sender_indices(segment_senders(fragment, request, l, p, b, prev_holders), fleet).items():
                    totals[i] = totals.get(i, 0) + v
            scores = _rank(helpers, totals, cost * n, fleet, ledger, config, rng)
            d = scores.devices
            cap = cap_for_layer(policy, l)
            fit_mem = ledger.mem[d] >= mem * n
            fit_comp = ledger.comp[d] >= cost * n
            bw_ok = _bandwidth_ok(totals, ledger.bw, d)
            cap_ok = np.full(len(d), cap is None or n <= cap)
            ok = fit_mem & fit_comp & bw_ok & cap_ok
            if not ok.any():
                return reject(l, 1, _failures(fit_mem, fit_comp, bw_ok, cap_ok))
            k = int(np.argmax(ok))
            j = int(d[k])
            ledger.reserve(j, mem * n, cost * n, {i: v for i, v in totals.items() if i != j})
            for p in range(1, n + 1):
                fragment.assign(rid, l, p, ids[j])
            if config.trace:
                trace.append(
                    Decision(
                        request=rid,
                        layer=l,
                        segment=1,
                        segments=n,
                        device=ids[j],
                        t=float(scores.t[k]),
                        nrm=float(scores.nrm[k]),
                        candidates=len(d),
                        failed=_failures(fit_mem[:k], fit_comp[:k], bw_ok[:k], cap_ok[:k]),
                    )
                )
            continue

        cap = cap_for_layer(policy, l)
        counts = np.zeros(len(fleet), dtype=np.int64)

        for p in range(1, n + 1):
            volumes = _sender_indices(segment_senders(fragment, request, l, p, b, prev_holders), fleet)
            scores = _rank(helpers, volumes, cost, fleet, ledger, config, rng)
            d = scores.devices

            # Fit, bandwidth of the senders, privacy cap.
            fit_mem = ledger.mem[d] >= mem
            fit_comp = ledger.comp[d] >= cost
            bw_ok = _bandwidth_ok(volumes, ledger.bw, d)
            cap_ok = np.ones(len(d), dtype=bool) if cap is None else counts[d] + 1 <= cap
            ok = fit_mem & fit_comp & bw_ok & cap_ok

            if not ok.any():
                return reject(l, p, _failures(fit_mem, fit_comp, bw_ok, cap_ok))

            k = int(np.argmax(ok))
            j = int(d[k])
            ledger.reserve(j, mem, cost, {i: v for i, v in volumes.items() if i != j})
            counts[j] += 1
            fragment.assign(rid, l, p, ids[j])

            if config.trace:
                trace.append(
                    Decision(
                        request=rid,
                        layer=l,
                        segment=p,
                        device=ids[j],
                        t=float(scores.t[k]),
                        nrm=float(scores.nrm[k]),
                        candidates=len(d),
                        failed=_failures(fit_mem[:k], fit_comp[:k], bw_ok[:k], cap_ok[:k]),
                    )
                )

    return PlacementOutcome(
        request=rid,
        assignment=fragment,
        latency=request_latency(fragment, request, fleet, b),
        shared_bits=request_shared_bits(fragment, request, b),
        trace=tuple(trace),
    )


def run_batch(
    requests: Sequence[Request],
    fleet: Fleet,
    policies: PrivacyPolicy | Mapping[str, PrivacyPolicy] | None,
    config: GreedyConfig | None = None,
    ledger: ResourceLedger | None = None,
) -> BatchResult:
    """
    Place requests in order against one ledger.

    Parameters
    ----------
    requests : Sequence[Request]
        The requests, in arrival order.
    fleet : Fleet
        The devices.
    policies : PrivacyPolicy | Mapping[str, PrivacyPolicy] | None
        A policy for all requests, or policies by CNN name or dataset.
    config : GreedyConfig | None
        Settings.
    ledger : ResourceLedger | None
        Remaining budgets. Defaults to a fresh ledger.

    Returns
    -------
    BatchResult
        Outcomes per request, the combined assignment of the accepted requests, the ids of the rejected ones, and the
        total latency.
    """
    config = config or GreedyConfig()
    if ledger is None:
        ledger = ResourceLedger.fresh(fleet)
    rng = np.random.default_rng(config.seed) if config.tie_break == TieBreak.RANDOM else None

    result = BatchResult()
    for r in requests:
        outcome = place_request(r, fleet, ledger, policies, config, rng)
        result.outcomes.append(outcome)
        if outcome.rejected:
            result.rejections.append(r.id)
        else:
            result.assignment.update(outcome.assignment)
            result.total_latency += outcome.latency
            result.shared_bits += outcome.shared_bits

    log.debug("placed %d of %d requests", len(requests) - len(result.rejections), len(requests))
    return result
