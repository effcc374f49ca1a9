"""Assignments of segments to devices, their data volumes and latency, and the constraints they must satisfy."""

import logging
import math
import os
from collections import Counter, defaultdict
from collections.abc import Iterable, Iterator, Mapping, Sequence
from enum import Enum

import pandas as pd
from pydantic import BaseModel, confloat, model_validator
from typing_extensions import Self

from private_placement.core.fleet import Fleet
from private_placement.core.model import (
    DEFAULT_WORD_BITS,
    CnnSpec,
    LayerKind,
    first_fc_index,
    segment_cost,
    segment_count,
    segment_memory_bits,
)
from private_placement.core.privacy import PrivacyPolicy, cap_for_layer, pinned_layers

log = logging.getLogger(__name__)

PLAN_SCHEMA = "plan/v1"

Key = tuple[str, int, int]


class Constraint(str, Enum):
    """Tags of the constraints a placement must satisfy."""

    # Memory of a device holds the weights of all its segments.
    MEMORY = "MEMORY"

    # Multiplications of a device fit its per-period budget.
    COMPUTE = "COMPUTE"

    # Bits a device sends fit its per-period budget.
    BANDWIDTH = "BANDWIDTH"

    # Every segment is assigned to exactly one known device.
    COVERAGE = "COVERAGE"

    # No helper computes more segments of a layer before the split point than the layer's cap.
    PRIVACY = "PRIVACY"

    # The first fully connected layer runs on a single device.
    FC_INPUT = "FC_INPUT"

    # The source computes the first and the last layer, the first fully connected layer before the split point, and
    # nothing else.
    SOURCE_PINNING = "SOURCE_PINNING"


class Request(BaseModel, frozen=True):
    """A classification request from a source."""

    id: str
    source: str
    cnn: CnnSpec
    arrival: confloat(ge=0.0) = 0.0


class Violation(BaseModel, frozen=True):
    constraint: Constraint
    detail: str
    device: str | None = None
    request: str | None = None
    layer: int | None = None


class Assignment:
    """Maps (request, layer, segment) to the id of the device computing the segment."""

    def __init__(self, entries: Mapping[Key, str] | Iterable[tuple[Key, str]] | None = None):
        self._layers: dict[tuple[str, int], dict[int, str]] = {}
        if entries is not None:
            items = entries.items() if isinstance(entries, Mapping) else entries
            for (r, l, p), device in items:
                self.assign(r, l, p, device)

    def assign(self, r: str, l: int, p: int, device: str) -> None:
        self._layers.setdefault((r, l), {})[p] = device

    def unassign(self, r: str, l: int, p: int) -> None:
        segments = self._layers.get((r, l))
        if segments is None:
            return
        segments.pop(p, None)
        if not segments:
            del self._layers[(r, l)]

    def layer(self, r: str, l: int) -> Mapping[int, str]:
        """Device per segment of layer l of request r."""
        return self._layers.get((r, l), {})

    def get(self, r: str, l: int, p: int, default: str | None = None) -> str | None:
        return self.layer(r, l).get(p, default)

    def __getitem__(self, key: Key) -> str:
        r, l, p = key
        return self._layers[(r, l)][p]

    def __contains__(self, key: Key) -> bool:
        r, l, p = key
        return p in self.layer(r, l)

    def __len__(self) -> int:
        return sum(len(v) for v in self._layers.values())

    def __iter__(self) -> Iterator[Key]:
        for k, _ in self.items():
            yield k

    def items(self) -> Iterator[tuple[Key, str]]:
        """Entries ordered by request, layer and segment."""
        for r, l in sorted(self._layers):
            segments = self._layers[(r, l)]
            for p in sorted(segments):
                yield (r, l, p), segments[p]

    def requests(self) -> list[str]:
        return sorted({r for r, _ in self._layers})

    def update(self, other: "Assignment") -> None:
        for (r, l, p), device in other.items():
            self.assign(r, l, p, device)

    def copy(self) -> Self:
        c = type(self)()
        c._layers = {k: dict(v) for k, v in self._layers.items()}
        return c

    def __eq__(self, other) -> bool:
        if not isinstance(other, Assignment):
            return NotImplemented
        return self._layers == other._layers

    __hash__ = None

    def __repr__(self) -> str:
        return f"Assignment({len(self)} segments)"

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r, l, p, d) for (r, l, p), d in self.items()],
            columns=["request", "layer", "segment", "device"],
        )

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> Self:
        return cls(
            ((str(r), int(l), int(p)), str(d))
            for r, l, p, d in zip(df["request"], df["layer"], df["segment"], df["device"])
        )


def resolve_policy(
    policies: PrivacyPolicy | Mapping[str, PrivacyPolicy] | None, cnn: CnnSpec
) -> PrivacyPolicy:
    """Pick the policy of a CNN, by CNN name, then by dataset. Without one, nothing is capped."""
    if policies is None:
        return PrivacyPolicy.unbounded(cnn.dataset)
    if isinstance(policies, PrivacyPolicy):
        return policies
    policy = policies.get(cnn.name) or policies.get(cnn.dataset)
    return policy if policy is not None else PrivacyPolicy.unbounded(cnn.dataset)


def _maps_of(assignment: Assignment, request: Request, l: int) -> Mapping[int, str]:
    # The image is held by the source as input_channels maps of a virtual layer 0.
    if l == 0:
        return {p: request.source for p in range(1, request.cnn.input_channels + 1)}
    return assignment.layer(request.id, l)


def _map_bits(cnn: CnnSpec, l: int, word_bits: int) -> int:
    layer = cnn.layer(l)
    if layer.kind == LayerKind.FULLY_CONNECTED:
        return layer.neurons * word_bits
    return layer.out_spatial**2 * word_bits


def _passes_whole_maps(cnn: CnnSpec, l: int) -> bool:
    return l == 0 or cnn.layer(l).kind != LayerKind.CONV


def _shared_maps(cnn: CnnSpec, l: int) -> int:
    # Maps p that keep their identity from layer l to layer l + 1.
    before = cnn.input_channels if l == 0 else segment_count(cnn, l)
    return min(before, cnn.layer(l).out_maps)


def output_volume(
    assignment: Assignment,
    request: Request,
    l: int,
    i: str,
    j: str,
    word_bits: int = DEFAULT_WORD_BITS,
) -> int:
    """
    Return the bits device i sends to device j so that j can compute its segments of layer l + 1.

    After a conv layer, every device holding a segment of layer l sends one o² map per segment of layer l + 1 that j
    computes. After any other layer, map p goes from the holder of segment p of layer l to the holder of segment p of
    layer l + 1, with o² values, or n* values after a fully connected layer.

    Parameters
    ----------
    assignment : Assignment
        The assignment.
    request : Request
        The request.
    l : int
        The sending layer, 0 for the image at the source.
    i : str
        The sending device.
    j : str
        The receiving device.
    word_bits : int
        Bits per value.

    Returns
    -------
    int
        The volume in bits, 0 if i equals j.
    """
    if i == j:
        return 0

    cnn = request.cnn
    if not 0 <= l < cnn.num_layers:
        raise ValueError(f"Layer {l} has no successor in {cnn.name}.")

    held = _maps_of(assignment, request, l)
    receivers = assignment.layer(request.id, l + 1)

    if not _passes_whole_maps(cnn, l):
        holds = any(d == i for d in held.values())
        received = sum(1 for d in receivers.values() if d == j)
        return cnn.layer(l).out_spatial**2 * min(1, int(holds)) * received * word_bits

    limit = _shared_maps(cnn, l)
    overlap = sum(1 for p, d in held.items() if p <= limit and d == i and receivers.get(p) == j)
    return _map_bits(cnn, l, 1) * overlap * word_bits


def segment_senders(
    assignment: Assignment,
    request: Request,
    l: int,
    p: int,
    word_bits: int = DEFAULT_WORD_BITS,
    prev_holders: Iterable[str] | None = None,
) -> dict[str, int]:
    """
    Return the bits each device sends as input to segment p of layer l, wherever that segment runs.

    A sender that also computes the segment sends nothing; callers drop it. Summed over all segments of layer l that a
    device j computes, the volumes equal output_volume(..., l - 1, i, j).

    Parameters
    ----------
    prev_holders : Iterable[str] | None
        Devices holding any segment of layer l - 1, if already known.
    """
    cnn = request.cnn
    prev = l - 1

    if not _passes_whole_maps(cnn, prev):
        if prev_holders is None:
            prev_holders = set(assignment.layer(request.id, prev).values())
        bits = cnn.layer(prev).out_spatial**2 * word_bits
        return {i: bits for i in sorted(prev_holders)}

    if p > _shared_maps(cnn, prev):
        return {}
    i = _maps_of(assignment, request, prev).get(p)
    if i is None:
        return {}
    return {i: _map_bits(cnn, prev, word_bits)}


def segment_input_volume(
    assignment: Assignment,
    request: Request,
    l: int,
    p: int,
    j: str,
    word_bits: int = DEFAULT_WORD_BITS,
) -> dict[str, int]:
    """Bits per sender needed for segment p of layer l to run on device j."""
    return {i: v for i, v in segment_senders(assignment, request, l, p, word_bits).items() if i != j}


def layer_volumes(
    assignment: Assignment,
    request: Request,
    l: int,
    word_bits: int = DEFAULT_WORD_BITS,
) -> dict[tuple[str, str], int]:
    """
    Return the non-zero volumes sent from layer l to layer l + 1, by (sender, receiver).
    """
    volumes: dict[tuple[str, str], int] = defaultdict(int)
    receivers = assignment.layer(request.id, l + 1)
    if not receivers:
        return {}
    holders = None if _passes_whole_maps(request.cnn, l) else set(assignment.layer(request.id, l).values())
    for p, j in receivers.items():
        for i, bits in segment_senders(assignment, request, l + 1, p, word_bits, holders).items():
            if i != j and bits > 0:
                volumes[(i, j)] += bits
    return dict(volumes)


def compute_latency(assignment: Assignment, request: Request, l: int, j: str, fleet: Fleet) -> float:
    """
    Return the seconds device j spends on its segments of layer l.

    Returns
    -------
    float
        Number of segments on j times the segment cost, divided by the speed of j.
    """
    count = sum(1 for d in assignment.layer(request.id, l).values() if d == j)
    if count == 0:
        return 0.0
    return count * segment_cost(request.cnn, l) / fleet.device(j).speed


def layer_latency(
    assignment: Assignment,
    request: Request,
    l: int,
    fleet: Fleet,
    word_bits: int = DEFAULT_WORD_BITS,
) -> float:
    """
    Return the latency of layer l of a request.

    Transmission and computation overlap across devices, so this is the largest sum, over receiving devices j, of the
    slowest transmission of input to j and the compute time of j.
    """
    segments = assignment.layer(request.id, l)
    if not segments:
        return 0.0

    cost = segment_cost(request.cnn, l)
    counts = Counter(segments.values())

    transmit: dict[str, float] = defaultdict(float)
    for (i, j), bits in layer_volumes(assignment, request, l - 1, word_bits).items():
        transmit[j] = max(transmit[j], bits / fleet.device(i).rate)

    return max(0.0, max(n * cost / fleet.device(j).speed + transmit[j] for j, n in counts.items()))


def request_latency(
    assignment: Assignment, request: Request, fleet: Fleet, word_bits: int = DEFAULT_WORD_BITS
) -> float:
    """Sum of the latencies of all layers of a request."""
    return sum(layer_latency(assignment, request, l, fleet, word_bits) for l in range(1, request.cnn.num_layers + 1))


def total_latency(
    assignment: Assignment,
    requests: Sequence[Request],
    fleet: Fleet,
    word_bits: int = DEFAULT_WORD_BITS,
) -> float:
    """Sum of the layer latencies over all requests."""
    return sum(request_latency(assignment, r, fleet, word_bits) for r in requests)


def request_shared_bits(assignment: Assignment, request: Request, word_bits: int = DEFAULT_WORD_BITS) -> int:
    """Bits exchanged between devices for one request."""
    return sum(
        sum(layer_volumes(assignment, request, l, word_bits).values()) for l in range(0, request.cnn.num_layers)
    )


def shared_bits(assignment: Assignment, requests: Sequence[Request], word_bits: int = DEFAULT_WORD_BITS) -> int:
    """Bits exchanged between devices over all requests and layers."""
    return sum(request_shared_bits(assignment, r, word_bits) for r in requests)


class PlacementPlan(BaseModel, arbitrary_types_allowed=True):
    """An assignment with its per-layer latencies and data volumes."""

    assignment: Assignment

    # Seconds per (request, layer).
    per_layer_latency: dict[tuple[str, int], float]

    # Bits per (request, sending layer, sender, receiver).
    data_volumes: dict[tuple[str, int, str, str], int]

    objective: float

    @model_validator(mode="after")
    def _check_objective(self):
        if not math.isclose(self.objective, sum(self.per_layer_latency.values()), rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError("Objective must equal the sum of the layer latencies.")
        return self

    @property
    def shared_bits(self) -> int:
        return sum(self.data_volumes.values())


def build_plan(
    assignment: Assignment,
    requests: Sequence[Request],
    fleet: Fleet,
    word_bits: int = DEFAULT_WORD_BITS,
) -> PlacementPlan:
    """Evaluate an assignment."""
    latency = {}
    volumes = {}
    for r in requests:
        for l in range(1, r.cnn.num_layers + 1):
            latency[(r.id, l)] = layer_latency(assignment, r, l, fleet, word_bits)
        for l in range(0, r.cnn.num_layers):
            for (i, j), bits in layer_volumes(assignment, r, l, word_bits).items():
                volumes[(r.id, l, i, j)] = bits
    return PlacementPlan(
        assignment=assignment,
        per_layer_latency=latency,
        data_volumes=volumes,
        objective=sum(latency.values()),
    )


def validate(
    assignment: Assignment,
    fleet: Fleet,
    policies: PrivacyPolicy | Mapping[str, PrivacyPolicy] | None,
    requests: Sequence[Request],
    word_bits: int = DEFAULT_WORD_BITS,
) -> list[Violation]:
    """
    Check an assignment against all constraints.

    Parameters
    ----------
    assignment : Assignment
        The assignment.
    fleet : Fleet
        The devices and their per-period budgets.
    policies : PrivacyPolicy | Mapping[str, PrivacyPolicy] | None
        A policy for all requests, or policies by CNN name or dataset.
    requests : Sequence[Request]
        The requests the assignment serves.
    word_bits : int
        Bits per value and weight.

    Returns
    -------
    list[Violation]
        The violations. Empty if the assignment is valid.
    """
    violations: list[Violation] = []
    by_id = {r.id: r for r in requests}

    mem: dict[str, int] = defaultdict(int)
    comp: dict[str, int] = defaultdict(int)
    sent: dict[str, int] = defaultdict(int)

    for (rid, l, p), device in assignment.items():
        r = by_id.get(rid)
        if r is None:
            violations.append(
                Violation(constraint=Constraint.COVERAGE, request=rid, layer=l, detail="unknown request")
            )
            continue
        if device not in fleet:
            violations.append(
                Violation(
                    constraint=Constraint.COVERAGE,
                    request=rid,
                    layer=l,
                    device=device,
                    detail=f"segment {p} on unknown device",
                )
            )
            continue
        if not 1 <= l <= r.cnn.num_layers or not 1 <= p <= segment_count(r.cnn, l):
            violations.append(
                Violation(
                    constraint=Constraint.COVERAGE,
                    request=rid,
                    layer=l,
                    device=device,
                    detail=f"segment {p} out of range",
                )
            )
            continue
        mem[device] += segment_memory_bits(r.cnn, l, word_bits)
        comp[device] += segment_cost(r.cnn, l)

    for r in requests:
        cnn = r.cnn
        policy = resolve_policy(policies, cnn)
        pinned = pinned_layers(cnn, policy)

        if r.source not in fleet or not fleet.device(r.source).is_source:
            violations.append(
                Violation(
                    constraint=Constraint.SOURCE_PINNING,
                    request=r.id,
                    device=r.source,
                    detail="request does not come from a source device",
                )
            )

        for l in range(1, cnn.num_layers + 1):
            segments = assignment.layer(r.id, l)
            n = segment_count(cnn, l)

            missing = sum(1 for p in range(1, n + 1) if p not in segments)
            if missing:
                violations.append(
                    Violation(
                        constraint=Constraint.COVERAGE,
                        request=r.id,
                        layer=l,
                        detail=f"{missing} of {n} segments unassigned",
                    )
                )

            counts = Counter(d for d in segments.values() if d in fleet)

            cap = cap_for_layer(policy, l)
            if cap is not None:
                for d, k in sorted(counts.items()):
                    if not fleet.device(d).is_source and k > cap:
                        violations.append(
                            Violation(
                                constraint=Constraint.PRIVACY,
                                request=r.id,
                                layer=l,
                                device=d,
                                detail=f"{k} segments exceed the cap of {cap}",
                            )
                        )

            if l in pinned:
                for d, k in sorted(counts.items()):
                    if d != r.source:
                        violations.append(
                            Violation(
                                constraint=Constraint.SOURCE_PINNING,
                                request=r.id,
                                layer=l,
                                device=d,
                                detail=f"{k} segments of a pinned layer off the source",
                            )
                        )
            else:
                for d, k in sorted(counts.items()):
                    if fleet.device(d).is_source:
                        violations.append(
                            Violation(
                                constraint=Constraint.SOURCE_PINNING,
                                request=r.id,
                                layer=l,
                                device=d,
                                detail=f"{k} intermediate segments on a source",
                            )
                        )

        fc = first_fc_index(cnn)
        if fc is not None and len(set(assignment.layer(r.id, fc).values())) > 1:
            violations.append(
                Violation(
                    constraint=Constraint.FC_INPUT,
                    request=r.id,
                    layer=fc,
                    detail="first fully connected layer split over devices",
                )
            )

        for l in range(0, cnn.num_layers):
            for (i, _), bits in layer_volumes(assignment, r, l, word_bits).items():
                sent[i] += bits

    for d in fleet.devices:
        if mem[d.id] > d.mem_cap:
            violations.append(
                Violation(
                    constraint=Constraint.MEMORY,
                    device=d.id,
                    detail=f"{mem[d.id]} bits exceed the capacity of {d.mem_cap}",
                )
            )
        if comp[d.id] > d.comp_cap:
            violations.append(
                Violation(
                    constraint=Constraint.COMPUTE,
                    device=d.id,
                    detail=f"{comp[d.id]} multiplications exceed the capacity of {d.comp_cap}",
                )
            )
        if sent[d.id] > d.bw_cap:
            violations.append(
                Violation(
                    constraint=Constraint.BANDWIDTH,
                    device=d.id,
                    detail=f"{sent[d.id]} bits sent exceed the capacity of {d.bw_cap}",
                )
            )

    return violations


def write_plan(assignment: Assignment, path: str | os.PathLike) -> None:
    """Write an assignment as CSV, one row per segment."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# schema: {PLAN_SCHEMA}\n")
        assignment.to_frame().to_csv(f, index=False)


def read_plan(path: str | os.PathLike) -> Assignment:
    """Read an assignment written by write_plan."""
    df = pd.read_csv(path, comment="#", dtype={"request": str, "device": str})
    return Assignment.from_frame(df)
