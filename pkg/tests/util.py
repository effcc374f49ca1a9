"""Builders and reference implementations for tests.

The checks in this module restate the placement rules from scratch and share no code with the package beyond the
data types.
"""

from collections import defaultdict
from collections.abc import Mapping, Sequence

from private_placement.core.fleet import DeviceClass, DeviceKind, DeviceSpec, Fleet
from private_placement.core.model import CnnSpec, LayerKind
from private_placement.core.placement import Assignment, Request
from private_placement.core.privacy import PrivacyPolicy
from private_placement.core.util import GIBIBYTE

# Helpers that never run out of anything in the test scenarios.
GIANT = DeviceClass(name="Giant", speed=1e5, memory_bytes=64 * GIBIBYTE, rate=1e10)


def small_cnn(name: str = "Tiny", dataset: str = "TINY") -> CnnSpec:
    """Two input channels of 6x6: conv, pool, conv, and two fully connected layers."""
    return CnnSpec(
        name=name,
        dataset=dataset,
        input_channels=2,
        input_spatial=6,
        layers=[
            {"kind": "Conv", "name": "conv1", "filter_size": 3, "out_maps": 2, "out_spatial": 4},
            {"kind": "MaxPool", "name": "pool1", "out_maps": 2, "out_spatial": 2},
            {"kind": "Conv", "name": "conv2", "filter_size": 1, "out_maps": 2, "out_spatial": 2},
            {"kind": "FullyConnected", "name": "fc1", "neurons": 3},
            {"kind": "FullyConnected", "name": "fc2", "neurons": 2},
        ],
    )


def device(id: str, speed: float, rate: float, cap: int = 10_000, cnn: str | None = None, **kw) -> DeviceSpec:
    return DeviceSpec(
        id=id,
        kind=DeviceKind.SOURCE if cnn else DeviceKind.HELPER,
        mem_cap=kw.get("mem_cap", cap),
        comp_cap=kw.get("comp_cap", cap),
        bw_cap=kw.get("bw_cap", cap),
        rate=rate,
        speed=speed,
        cnn=cnn,
    )


def small_fleet(helpers: int = 3, cnn: str = "Tiny", **kw) -> Fleet:
    """A source src0 and up to three helpers of decreasing speed and increasing rate."""
    specs = [(200.0, 50.0), (100.0, 100.0), (50.0, 200.0)]
    return Fleet(
        devices=[device("src0", 1000.0, 100.0, cnn=cnn, cap=kw.pop("source_cap", 10_000))]
        + [device(f"h{k:03d}", speed, rate, **kw) for k, (speed, rate) in enumerate(specs[:helpers])]
    )


def request(cnn: CnnSpec, id: str = "r0", source: str = "src0", arrival: float = 0.0) -> Request:
    return Request(id=id, source=source, cnn=cnn, arrival=arrival)


def assignment(r: str, layers: Mapping[int, Sequence[str]]) -> Assignment:
    """Build an assignment from a device per segment, listed per layer."""
    return Assignment({(r, l, p): d for l, devices in layers.items() for p, d in enumerate(devices, start=1)})


def maps_out(cnn: CnnSpec, l: int) -> int:
    return cnn.input_channels if l == 0 else cnn.layers[l - 1].out_maps


def spatial_out(cnn: CnnSpec, l: int) -> int:
    return cnn.input_spatial if l == 0 else cnn.layers[l - 1].out_spatial


def kind(cnn: CnnSpec, l: int) -> LayerKind | None:
    return None if l == 0 else cnn.layers[l - 1].kind


def count_multiplications(cnn: CnnSpec, l: int) -> int:
    """Multiplications of layer l, counted tap by tap per output value."""
    k = kind(cnn, l)
    layer = cnn.layers[l - 1]
    in_maps = maps_out(cnn, l - 1)
    total = 0
    if k == LayerKind.CONV:
        taps = layer.filter_size * layer.filter_size * in_maps
        for _ in range(layer.out_maps):
            for _ in range(layer.out_spatial * layer.out_spatial):
                total += taps
    elif k == LayerKind.FULLY_CONNECTED:
        prev = kind(cnn, l - 1)
        inputs = cnn.layers[l - 2].neurons if prev == LayerKind.FULLY_CONNECTED else in_maps * spatial_out(cnn, l - 1) ** 2
        for _ in range(layer.neurons):
            total += inputs
    return total


def weights(cnn: CnnSpec, l: int) -> int:
    """Weights stored by one segment of layer l."""
    k = kind(cnn, l)
    layer = cnn.layers[l - 1]
    if k == LayerKind.CONV:
        return layer.filter_size**2 * maps_out(cnn, l - 1) + 1
    if k == LayerKind.FULLY_CONNECTED:
        prev = kind(cnn, l - 1)
        inputs = cnn.layers[l - 2].neurons if prev == LayerKind.FULLY_CONNECTED else spatial_out(cnn, l - 1) ** 2
        return inputs * layer.neurons
    return 0


def cap(policy: PrivacyPolicy, l: int) -> int | None:
    if l >= policy.split_point or not policy.caps:
        return None
    earlier = [k for k in sorted(policy.caps) if k <= l]
    return policy.caps[earlier[-1] if earlier else min(policy.caps)]


def pinned(cnn: CnnSpec, policy: PrivacyPolicy) -> set[int]:
    layers = {1, len(cnn.layers)}
    fcs = [i for i, layer in enumerate(cnn.layers, start=1) if layer.kind == LayerKind.FULLY_CONNECTED]
    if fcs and fcs[0] < policy.split_point:
        layers.add(fcs[0])
    return layers


def volumes(a: Assignment, r: Request, word_bits: int = 4) -> dict[tuple[int, str, str], int]:
    """Bits from i to j after layer l, keyed (l, i, j), written out case by case."""
    cnn = r.cnn
    result: dict[tuple[int, str, str], int] = defaultdict(int)

    def holder(l: int, p: int) -> str | None:
        return r.source if l == 0 else a.get(r.id, l, p)

    for l in range(0, len(cnn.layers)):
        nxt = a.layer(r.id, l + 1)
        if kind(cnn, l) == LayerKind.CONV:
            senders = set(a.layer(r.id, l).values())
            for i in senders:
                for j in set(nxt.values()):
                    if i != j:
                        received = sum(1 for d in nxt.values() if d == j)
                        result[(l, i, j)] += spatial_out(cnn, l) ** 2 * received * word_bits
        else:
            size = cnn.layers[l - 1].neurons if kind(cnn, l) == LayerKind.FULLY_CONNECTED else spatial_out(cnn, l) ** 2
            count = cnn.input_channels if l == 0 else maps_out(cnn, l - 1)
            for p in range(1, min(count, maps_out(cnn, l)) + 1):
                i, j = holder(l, p), nxt.get(p)
                if i is not None and j is not None and i != j:
                    result[(l, i, j)] += size * word_bits

    return dict(result)


def check(
    a: Assignment,
    fleet: Fleet,
    policy: PrivacyPolicy,
    requests: Sequence[Request],
    word_bits: int = 4,
) -> set[str]:
    """Return the tags of all violated constraints."""
    violated = set()
    by_id = {d.id: d for d in fleet.devices}
    mem: dict[str, int] = defaultdict(int)
    comp: dict[str, int] = defaultdict(int)
    sent: dict[str, int] = defaultdict(int)

    served = {r.id for r in requests}
    if any(key[0] not in served for key in a):
        violated.add("COVERAGE")

    for r in requests:
        cnn = r.cnn
        fixed = pinned(cnn, policy)
        fcs = [i for i, layer in enumerate(cnn.layers, start=1) if layer.kind == LayerKind.FULLY_CONNECTED]
        for l in range(1, len(cnn.layers) + 1):
            n = maps_out(cnn, l - 1)
            segments = a.layer(r.id, l)
            if set(segments) != set(range(1, n + 1)) or any(d not in by_id for d in segments.values()):
                violated.add("COVERAGE")
                continue

            per_device: dict[str, int] = defaultdict(int)
            for d in segments.values():
                per_device[d] += 1
                mem[d] += weights(cnn, l) * word_bits
                comp[d] += count_multiplications(cnn, l) // n

            if l in fixed:
                if set(per_device) != {r.source}:
                    violated.add("SOURCE_PINNING")
            else:
                if any(by_id[d].kind == DeviceKind.SOURCE for d in per_device):
                    violated.add("SOURCE_PINNING")
                c = cap(policy, l)
                if c is not None and any(k > c for k in per_device.values()):
                    violated.add("PRIVACY")
            if fcs and l == fcs[0] and len(per_device) > 1:
                violated.add("FC_INPUT")

        for (_, i, _), bits in volumes(a, r, word_bits).items():
            sent[i] += bits

    for d, used in mem.items():
        if d in by_id and used > by_id[d].mem_cap:
            violated.add("MEMORY")
    for d, used in comp.items():
        if d in by_id and used > by_id[d].comp_cap:
            violated.add("COMPUTE")
    for d, used in sent.items():
        if d in by_id and used > by_id[d].bw_cap:
            violated.add("BANDWIDTH")

    return violated
