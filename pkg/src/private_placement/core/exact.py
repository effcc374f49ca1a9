"""Exact placement of small instances by branch and bound, or by plain enumeration."""

import itertools
import logging
import time
from collections import defaultdict
from collections.abc import Mapping, Sequence
from enum import Enum
from typing import NamedTuple

from pydantic import BaseModel, confloat, conint

from private_placement.core.fleet import Fleet, InsufficientResource, ResourceLedger
from private_placement.core.model import (
    DEFAULT_WORD_BITS,
    first_fc_index,
    segment_cost,
    segment_count,
    segment_memory_bits,
)
from private_placement.core.placement import (
    Assignment,
    Constraint,
    Request,
    layer_latency,
    resolve_policy,
    segment_senders,
    total_latency,
    validate,
)
from private_placement.core.privacy import PrivacyPolicy, cap_for_layer, pinned_layers, required_helpers

log = logging.getLogger(__name__)

# Objectives closer than this count as equal.
_TOL = 1e-12


class ExactStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    BUDGET_EXCEEDED = "budget_exceeded"


class SearchMethod(str, Enum):
    BRANCH_AND_BOUND = "branch_and_bound"
    ENUMERATE = "enumerate"


class ExactLimits(BaseModel, frozen=True):
    """Instance size and search effort the exact solver accepts."""

    max_devices: conint(ge=1) = 4
    max_layers: conint(ge=1) = 6
    max_segments: conint(ge=1) = 8
    max_requests: conint(ge=1) = 3
    max_nodes: conint(ge=1) = 2_000_000
    max_seconds: confloat(gt=0) = 60.0


class InstanceTooLarge(ValueError):
    """The instance exceeds the configured limits."""


class ExactResult(BaseModel, arbitrary_types_allowed=True):
    status: ExactStatus
    assignment: Assignment | None = None
    objective: float | None = None
    nodes: int = 0
    seconds: float = 0.0

    # Why the instance is infeasible, if proven without search.
    certificate: str | None = None


class _Slot(NamedTuple):
    request: Request
    layer: int
    segments: tuple[int, ...]
    pinned: bool
    cap: int | None
    cost: int
    mem: int

    # Whether this slot completes its layer.
    closes_layer: bool


class _BudgetExceeded(Exception):
    pass


def _slots(
    requests: Sequence[Request],
    policies: PrivacyPolicy | Mapping[str, PrivacyPolicy] | None,
    word_bits: int,
) -> list[_Slot]:
    slots = []
    for r in requests:
        cnn = r.cnn
        policy = resolve_policy(policies, cnn)
        pinned = pinned_layers(cnn, policy)
        fc = first_fc_index(cnn)
        for l in range(1, cnn.num_layers + 1):
            n = segment_count(cnn, l)
            cost = segment_cost(cnn, l)
            mem = segment_memory_bits(cnn, l, word_bits)
            cap = cap_for_layer(policy, l)
            if l == fc and l not in pinned:
                slots.append(_Slot(r, l, tuple(range(1, n + 1)), False, cap, cost * n, mem * n, True))
                continue
            for p in range(1, n + 1):
                slots.append(_Slot(r, l, (p,), l in pinned, cap, cost, mem, p == n))
    return slots


def prove_infeasible(
    requests: Sequence[Request],
    fleet: Fleet,
    policies: PrivacyPolicy | Mapping[str, PrivacyPolicy] | None,
    word_bits: int = DEFAULT_WORD_BITS,
) -> str | None:
    """
    Look for a simple proof that no valid placement exists.

    Two proofs are tried: a capped layer with P segments and cap Nf needs at least ⌈P/Nf⌉ helpers, and the pinned
    layers of all requests of a source must fit the source's memory and compute.

    Returns
    -------
    str | None
        The proof, starting with the tag of the violated constraint, or None if none was found.
    """
    helpers = len(fleet.helpers)
    mem: dict[str, int] = defaultdict(int)
    comp: dict[str, int] = defaultdict(int)

    for r in requests:
        cnn = r.cnn
        policy = resolve_policy(policies, cnn)

        if r.source not in fleet or not fleet.device(r.source).is_source:
            return f"{Constraint.SOURCE_PINNING.value}: request {r.id} does not come from a source device"

        need = required_helpers(policy, cnn)
        if need > helpers:
            tag = Constraint.PRIVACY if need > 1 else Constraint.COVERAGE
            return f"{tag.value}: request {r.id} needs at least {need} helpers, the fleet has {helpers}"

        for l in pinned_layers(cnn, policy):
            n = segment_count(cnn, l)
            mem[r.source] += n * segment_memory_bits(cnn, l, word_bits)
            comp[r.source] += n * segment_cost(cnn, l)

    for s in sorted(mem):
        d = fleet.device(s)
        if mem[s] > d.mem_cap:
            return f"{Constraint.MEMORY.value}: pinned layers need {mem[s]} bits on {s}, capacity is {d.mem_cap}"
        if comp[s] > d.comp_cap:
            return (
                f"{Constraint.COMPUTE.value}: pinned layers need {comp[s]} multiplications on {s}, "
                f"capacity is {d.comp_cap}"
            )

    return None


def _check_limits(requests: Sequence[Request], fleet: Fleet, limits: ExactLimits) -> None:
    if len(fleet) > limits.max_devices:
        raise InstanceTooLarge(f"{len(fleet)} devices exceed the limit of {limits.max_devices}.")
    if len(requests) > limits.max_requests:
        raise InstanceTooLarge(f"{len(requests)} requests exceed the limit of {limits.max_requests}.")
    for r in requests:
        if r.cnn.num_layers > limits.max_layers:
            raise InstanceTooLarge(
                f"{r.cnn.name} has {r.cnn.num_layers} layers, the limit is {limits.max_layers}."
            )
        widest = max(segment_count(r.cnn, l) for l in range(1, r.cnn.num_layers + 1))
        if widest > limits.max_segments:
            raise InstanceTooLarge(f"{r.cnn.name} has {widest} segments in a layer, the limit is {limits.max_segments}.")


class _Search:
    """Depth-first branch and bound over slots, layer by layer."""

    def __init__(
        self,
        slots: list[_Slot],
        fleet: Fleet,
        limits: ExactLimits,
        word_bits: int,
    ):
        self.slots = slots
        self.fleet = fleet
        self.limits = limits
        self.word_bits = word_bits
        self.ledger = ResourceLedger.fresh(fleet)
        self.assignment = Assignment()
        self.ids = [d.id for d in fleet.devices]

        # Fastest first, then by id.
        self.order = sorted(
            (int(i) for i in fleet.helper_indices), key=lambda i: (-fleet.devices[i].speed, fleet.devices[i].id)
        )

        # Helpers with equal capacities are interchangeable while unused.
        self.kind_of = {
            i: (d.mem_cap, d.comp_cap, d.bw_cap, d.rate, d.speed)
            for i, d in ((i, fleet.devices[i]) for i in self.order)
        }
        self.used = [0] * len(fleet)
        self.counts: dict[tuple[str, int, int], int] = defaultdict(int)

        self.best = float("inf")
        self.best_assignment: Assignment | None = None
        self.nodes = 0
        self.start = time.perf_counter()

    def _tick(self) -> None:
        self.nodes += 1
        if self.nodes > self.limits.max_nodes or time.perf_counter() - self.start > self.limits.max_seconds:
            raise _BudgetExceeded()

    def _candidates(self, slot: _Slot) -> list[int]:
        if slot.pinned:
            return [self.fleet.index(slot.request.source)]
        result = []
        seen = set()
        for j in self.order:
            if self.used[j] == 0:
                kind = self.kind_of[j]
                if kind in seen:
                    continue
                seen.add(kind)
            result.append(j)
        return result

    def _volumes(self, slot: _Slot, j: int) -> dict[int, int]:
        totals: dict[int, int] = defaultdict(int)
        for p in slot.segments:
            for i, v in segment_senders(self.assignment, slot.request, slot.layer, p, self.word_bits).items():
                k = self.fleet.index(i)
                if k != j:
                    totals[k] += v
        return dict(totals)

    def run(self, k: int = 0, closed: float = 0.0) -> None:
        if k == len(self.slots):
            if closed < self.best - _TOL:
                self.best = closed
                self.best_assignment = self.assignment.copy()
            return

        slot = self.slots[k]
        r = slot.request

        for j in self._candidates(slot):
            self._tick()

            key = (r.id, slot.layer, j)
            if not slot.pinned and slot.cap is not None and self.counts[key] + len(slot.segments) > slot.cap:
                continue

            volumes = self._volumes(slot, j)
            try:
                self.ledger.reserve(j, slot.mem, slot.cost, volumes)
            except InsufficientResource:
                continue

            for p in slot.segments:
                self.assignment.assign(r.id, slot.layer, p, self.ids[j])
            self.counts[key] += len(slot.segments)
            self.used[j] += 1

            latency = layer_latency(self.assignment, r, slot.layer, self.fleet, self.word_bits)
            if closed + latency < self.best - _TOL:
                self.run(k + 1, closed + latency if slot.closes_layer else closed)

            self.used[j] -= 1
            self.counts[key] -= len(slot.segments)
            for p in slot.segments:
                self.assignment.unassign(r.id, slot.layer, p)
            self.ledger.release(j, slot.mem, slot.cost, volumes)


def _enumerate(
    slots: list[_Slot],
    requests: Sequence[Request],
    fleet: Fleet,
    policies,
    limits: ExactLimits,
    word_bits: int,
) -> tuple[Assignment | None, float, int, bool]:
    start = time.perf_counter()
    ids = [d.id for d in fleet.devices]
    helpers = [ids[int(i)] for i in fleet.helper_indices]

    base = Assignment()
    free = []
    for slot in slots:
        if slot.pinned:
            for p in slot.segments:
                base.assign(slot.request.id, slot.layer, p, slot.request.source)
        else:
            free.append(slot)

    best, best_assignment, nodes = float("inf"), None, 0
    for choice in itertools.product(helpers, repeat=len(free)):
        nodes += 1
        if nodes > limits.max_nodes or time.perf_counter() - start > limits.max_seconds:
            return best_assignment, best, nodes, True
        assignment = base.copy()
        for slot, device in zip(free, choice):
            for p in slot.segments:
                assignment.assign(slot.request.id, slot.layer, p, device)
        if validate(assignment, fleet, policies, requests, word_bits):
            continue
        objective = total_latency(assignment, requests, fleet, word_bits)
        if objective < best - _TOL:
            best, best_assignment = objective, assignment

    return best_assignment, best, nodes, False


def solve_exact(
    requests: Sequence[Request],
    fleet: Fleet,
    policies: PrivacyPolicy | Mapping[str, PrivacyPolicy] | None,
    limits: ExactLimits | None = None,
    method: SearchMethod | str = SearchMethod.BRANCH_AND_BOUND,
    word_bits: int = DEFAULT_WORD_BITS,
) -> ExactResult:
    """
    Find a valid assignment with the least total latency.

    Parameters
    ----------
    requests : Sequence[Request]
        The requests, all placed in one period.
    fleet : Fleet
        The devices.
    policies : PrivacyPolicy | Mapping[str, PrivacyPolicy] | None
        A policy for all requests, or policies by CNN name or dataset.
    limits : ExactLimits | None
        Instance size and effort limits.
    method : SearchMethod | str
        Branch and bound, or enumeration of all assignments of the free segments.
    word_bits : int
        Bits per value and weight.

    Returns
    -------
    ExactResult
        The optimal assignment, a proof of infeasibility, or the best assignment found when the budget ran out.

    Raises
    ------
    InstanceTooLarge
        If the instance exceeds the limits and is not proven infeasible beforehand.
    """
    limits = limits or ExactLimits()
    method = SearchMethod(method)
    start = time.perf_counter()

    certificate = prove_infeasible(requests, fleet, policies, word_bits)
    if certificate is not None:
        log.info("infeasible without search: %s", certificate)
        return ExactResult(
            status=ExactStatus.INFEASIBLE, certificate=certificate, seconds=time.perf_counter() - start
        )

    _check_limits(requests, fleet, limits)

    slots = _slots(requests, policies, word_bits)

    if method == SearchMethod.ENUMERATE:
        best_assignment, _, nodes, exceeded = _enumerate(slots, requests, fleet, policies, limits, word_bits)
    else:
        search = _Search(slots, fleet, limits, word_bits)
        exceeded = False
        try:
            search.run()
        except _BudgetExceeded:
            exceeded = True
        best_assignment, nodes = search.best_assignment, search.nodes

    seconds = time.perf_counter() - start
    objective = None if best_assignment is None else total_latency(best_assignment, requests, fleet, word_bits)

    if exceeded:
        status = ExactStatus.BUDGET_EXCEEDED
    elif best_assignment is None:
        status = ExactStatus.INFEASIBLE
    else:
        status = ExactStatus.OPTIMAL

    log.info("%s search ended %s after %d nodes in %.3f s", method.value, status.value, nodes, seconds)

    return ExactResult(status=status, assignment=best_assignment, objective=objective, nodes=nodes, seconds=seconds)
