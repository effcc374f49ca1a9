"""Devices, fleets and per-period resource budgets."""

import functools
import logging
import os
from collections.abc import Mapping, Sequence
from enum import Enum

import numpy as np
from pydantic import BaseModel, confloat, conint, field_validator, model_validator, validate_call
from typing_extensions import Self

from private_placement.core.util import (
    GIBIBYTE,
    MEBIBYTE,
    apportion,
    bytes_to_bits,
    parse_mix,
    read_document,
)

log = logging.getLogger(__name__)

DEFAULT_PERIOD = 1.0

# Device class speeds are given in millions of multiplications per second.
DEFAULT_SPEED_UNIT = 1e6

# Class of all source devices unless configured otherwise.
SOURCE_CLASS = "RPi3"


class DeviceKind(str, Enum):
    SOURCE = "Source"
    HELPER = "Helper"


class DeviceClass(BaseModel, frozen=True):
    """A type of device."""

    name: str

    # Multiplications per second, in units of the fleet's speed unit.
    speed: confloat(gt=0)

    # RAM in bytes.
    memory_bytes: conint(gt=0)

    # Data rate in bits per second.
    rate: confloat(gt=0)


# Registered device classes by name.
_classes: dict[str, DeviceClass] = {
    "RPi3": DeviceClass(name="RPi3", speed=560, memory_bytes=1 * GIBIBYTE, rate=72.2e6),
    "LG-Nexus": DeviceClass(name="LG-Nexus", speed=800, memory_bytes=2 * GIBIBYTE, rate=72.2e6),
    "STM32H7": DeviceClass(name="STM32H7", speed=40, memory_bytes=1 * MEBIBYTE, rate=7.2e6),
}


def register_device_class(device_class: DeviceClass, force: bool = False) -> None:
    """
    Register a device class.

    Parameters
    ----------
    device_class : DeviceClass
        The class to register.
    force : bool
        Whether to replace an existing class of the same name.
    """
    if device_class.name in _classes and not force:
        raise ValueError(f"Device class {device_class.name!r} is already registered.")
    _classes[device_class.name] = device_class


def device_class_names() -> list[str]:
    return list(_classes.keys())


def get_device_class(name: str, extra: Mapping[str, DeviceClass] | None = None) -> DeviceClass:
    """Look up a device class, consulting extra classes first."""
    if extra and name in extra:
        return extra[name]
    try:
        return _classes[name]
    except KeyError:
        available = list(extra or {}) + device_class_names()
        raise ValueError(f"Unknown device class {name!r}, available: {', '.join(available)}.") from None


class DeviceSpec(BaseModel, frozen=True):
    """A participant with its per-period budgets."""

    id: str
    kind: DeviceKind = DeviceKind.HELPER

    # Memory in bits.
    mem_cap: conint(gt=0)

    # Multiplications per period.
    comp_cap: conint(gt=0)

    # Bits sent per period.
    bw_cap: conint(gt=0)

    # Data rate in bits per second.
    rate: confloat(gt=0)

    # Multiplications per second.
    speed: confloat(gt=0)

    # The CNN a source requests.
    cnn: str | None = None

    device_class: str | None = None

    @model_validator(mode="after")
    def _check_binding(self):
        if self.kind == DeviceKind.SOURCE and not self.cnn:
            raise ValueError(f"Source {self.id} must be bound to a CNN.")
        if self.kind == DeviceKind.HELPER and self.cnn:
            raise ValueError(f"Helper {self.id} must not be bound to a CNN.")
        return self

    @property
    def is_source(self) -> bool:
        return self.kind == DeviceKind.SOURCE

    @classmethod
    def from_class(
        cls,
        id: str,
        device_class: DeviceClass,
        kind: DeviceKind = DeviceKind.HELPER,
        cnn: str | None = None,
        period: float = DEFAULT_PERIOD,
        speed_unit: float = DEFAULT_SPEED_UNIT,
    ) -> Self:
        """Create a device whose budgets follow from its class and the period length."""
        speed = device_class.speed * speed_unit
        return cls(
            id=id,
            kind=kind,
            mem_cap=bytes_to_bits(device_class.memory_bytes),
            comp_cap=max(1, int(round(speed * period))),
            bw_cap=max(1, int(round(device_class.rate * period))),
            rate=device_class.rate,
            speed=speed,
            cnn=cnn,
            device_class=device_class.name,
        )


class Fleet(BaseModel, frozen=True):
    """All devices taking part, ordered by id."""

    devices: tuple[DeviceSpec, ...] = ()

    @field_validator("devices")
    @classmethod
    def _sort_devices(cls, devices: tuple[DeviceSpec, ...]) -> tuple[DeviceSpec, ...]:
        ids = [d.id for d in devices]
        if len(set(ids)) != len(ids):
            raise ValueError("Device ids must be unique.")
        return tuple(sorted(devices, key=lambda d: d.id))

    def __len__(self) -> int:
        return len(self.devices)

    @functools.cached_property
    def id_index(self) -> dict[str, int]:
        return {d.id: i for i, d in enumerate(self.devices)}

    def index(self, device: str) -> int:
        try:
            return self.id_index[device]
        except KeyError:
            raise ValueError(f"Unknown device {device!r}.") from None

    def device(self, device: str) -> DeviceSpec:
        return self.devices[self.index(device)]

    def __contains__(self, device: str) -> bool:
        return device in self.id_index

    @property
    def sources(self) -> list[DeviceSpec]:
        return [d for d in self.devices if d.is_source]

    @property
    def helpers(self) -> list[DeviceSpec]:
        return [d for d in self.devices if not d.is_source]

    @functools.cached_property
    def helper_indices(self) -> np.ndarray:
        return np.array([i for i, d in enumerate(self.devices) if not d.is_source], dtype=np.int64)

    @functools.cached_property
    def speeds(self) -> np.ndarray:
        return np.array([d.speed for d in self.devices], dtype=np.float64)

    @functools.cached_property
    def rates(self) -> np.ndarray:
        return np.array([d.rate for d in self.devices], dtype=np.float64)


class SourceSpec(BaseModel, frozen=True):
    """One or more sources requesting the same CNN."""

    cnn: str
    count: conint(ge=1) = 1
    id: str | None = None
    device_class: str = SOURCE_CLASS


class DeviceRecord(BaseModel, frozen=True):
    """A device given explicitly, by class or by capacities."""

    id: str
    kind: DeviceKind = DeviceKind.HELPER
    device_class: str | None = None
    cnn: str | None = None
    mem_cap: conint(gt=0) | None = None
    comp_cap: conint(gt=0) | None = None
    bw_cap: conint(gt=0) | None = None
    rate: confloat(gt=0) | None = None
    speed: confloat(gt=0) | None = None


class FleetSpec(BaseModel, frozen=True):
    """Describes a fleet: sources, a preset mix of helpers, and explicit devices."""

    sources: tuple[SourceSpec, ...] = ()
    helpers: conint(ge=0) = 0
    mix: str | dict[str, float] = "RPi3"
    devices: tuple[DeviceRecord, ...] = ()
    classes: tuple[DeviceClass, ...] = ()
    period: confloat(gt=0) | None = None
    speed_unit: confloat(gt=0) = DEFAULT_SPEED_UNIT

    @field_validator("mix")
    @classmethod
    def _check_mix(cls, mix):
        parse_mix(mix)
        return mix


def _helper_ids(count: int) -> list[str]:
    width = max(3, len(str(max(count - 1, 0))))
    return [f"h{i:0{width}d}" for i in range(count)]


def _source_ids(count: int) -> list[str]:
    return [f"src{i}" for i in range(count)]


def build_fleet(spec: FleetSpec, period: float | None = None) -> Fleet:
    """
    Build a fleet from its description.

    Parameters
    ----------
    spec : FleetSpec
        The description.
    period : float | None
        Period length in seconds. Overrides the description's period; defaults to 1 s.

    Returns
    -------
    Fleet
        The fleet.
    """
    if period is None:
        period = spec.period if spec.period is not None else DEFAULT_PERIOD

    extra = {c.name: c for c in spec.classes}
    devices = []

    n_sources = sum(s.count for s in spec.sources)
    source_ids = iter(_source_ids(n_sources))
    for s in spec.sources:
        cls = get_device_class(s.device_class, extra)
        for k in range(s.count):
            default_id = next(source_ids)
            if s.id is None:
                sid = default_id
            else:
                sid = s.id if s.count == 1 else f"{s.id}{k}"
            devices.append(DeviceSpec.from_class(sid, cls, DeviceKind.SOURCE, s.cnn, period, spec.speed_unit))

    counts = apportion(parse_mix(spec.mix), spec.helpers)
    helper_ids = iter(_helper_ids(spec.helpers))
    for name, n in counts.items():
        cls = get_device_class(name, extra)
        for _ in range(n):
            devices.append(DeviceSpec.from_class(next(helper_ids), cls, period=period, speed_unit=spec.speed_unit))

    for r in spec.devices:
        devices.append(_from_record(r, extra, period, spec.speed_unit))

    fleet = Fleet(devices=devices)
    log.debug("built fleet of %d sources and %d helpers", len(fleet.sources), len(fleet.helpers))
    return fleet


def _from_record(r: DeviceRecord, extra: Mapping[str, DeviceClass], period: float, speed_unit: float) -> DeviceSpec:
    explicit = {
        k: v
        for k, v in r.model_dump(include={"mem_cap", "comp_cap", "bw_cap", "rate", "speed"}).items()
        if v is not None
    }
    if r.device_class is not None:
        base = DeviceSpec.from_class(
            r.id, get_device_class(r.device_class, extra), r.kind, r.cnn, period, speed_unit
        )
        return DeviceSpec(**{**base.model_dump(), **explicit})
    missing = {"mem_cap", "comp_cap", "bw_cap", "rate", "speed"} - set(explicit)
    if missing:
        raise ValueError(f"Device {r.id} needs a class or all of: {', '.join(sorted(missing))}.")
    return DeviceSpec(id=r.id, kind=r.kind, cnn=r.cnn, **explicit)


@validate_call
def load_fleet_preset(
    mix: str | dict[str, float],
    count: conint(ge=0),
    sources: Sequence[str] = (),
    period: confloat(gt=0) = DEFAULT_PERIOD,
    speed_unit: confloat(gt=0) = DEFAULT_SPEED_UNIT,
) -> Fleet:
    """
    Return a fleet of helpers drawn from the preset device classes.

    Parameters
    ----------
    mix : str | dict[str, float]
        Composition, e.g. "70/30" for 70% STM32H7 and 30% RPi3, or fractions per class name.
    count : int
        Number of helpers.
    sources : Sequence[str]
        One RPi3 source per entry, bound to the named CNN.
    period : float
        Period length in seconds.
    speed_unit : float
        Multiplications per second per unit of class speed.

    Returns
    -------
    Fleet
        The fleet.
    """
    spec = FleetSpec(
        sources=tuple(SourceSpec(cnn=c) for c in sources),
        helpers=count,
        mix=mix,
        speed_unit=speed_unit,
    )
    return build_fleet(spec, period)


def load_fleet(path: str | os.PathLike, period: float | None = None) -> Fleet:
    """Load a fleet from a YAML file with schema fleet/v1."""
    return build_fleet(FleetSpec.model_validate(read_document(path, "fleet/v1")), period)


class InsufficientResource(ValueError):
    """A reservation exceeds a remaining budget."""

    def __init__(self, resource: str, device: str, requested: int, available: int):
        super().__init__(f"Insufficient {resource} on {device}: requested {requested}, available {available}.")
        self.resource = resource
        self.device = device
        self.requested = requested
        self.available = available


class ResourceLedger:
    """Remaining memory, compute and bandwidth per device in the current period."""

    def __init__(self, fleet: Fleet, mem: np.ndarray, comp: np.ndarray, bw: np.ndarray):
        self.fleet = fleet
        self.mem = mem
        self.comp = comp
        self.bw = bw

    @classmethod
    def fresh(cls, fleet: Fleet) -> Self:
        """A ledger with every budget at capacity."""
        return cls(
            fleet,
            np.array([d.mem_cap for d in fleet.devices], dtype=np.int64),
            np.array([d.comp_cap for d in fleet.devices], dtype=np.int64),
            np.array([d.bw_cap for d in fleet.devices], dtype=np.int64),
        )

    def copy(self) -> Self:
        return type(self)(self.fleet, self.mem.copy(), self.comp.copy(), self.bw.copy())

    def restore(self, other: "ResourceLedger") -> None:
        """Reset the remaining budgets to those of another ledger of the same fleet."""
        self.mem[:] = other.mem
        self.comp[:] = other.comp
        self.bw[:] = other.bw

    def __eq__(self, other) -> bool:
        if not isinstance(other, ResourceLedger):
            return NotImplemented
        return (
            self.fleet.devices == other.fleet.devices
            and np.array_equal(self.mem, other.mem)
            and np.array_equal(self.comp, other.comp)
            and np.array_equal(self.bw, other.bw)
        )

    __hash__ = None

    def _idx(self, device: str | int) -> int:
        return device if isinstance(device, (int, np.integer)) else self.fleet.index(device)

    def remaining(self, device: str | int) -> dict[str, int]:
        i = self._idx(device)
        return {"memory": int(self.mem[i]), "compute": int(self.comp[i]), "bandwidth": int(self.bw[i])}

    def used(self, device: str | int) -> dict[str, int]:
        """Capacity minus remaining, per resource."""
        d = self.fleet.devices[self._idx(device)]
        left = self.remaining(device)
        return {
            "memory": d.mem_cap - left["memory"],
            "compute": d.comp_cap - left["compute"],
            "bandwidth": d.bw_cap - left["bandwidth"],
        }

    def reserve(
        self,
        device: str | int,
        mem: int = 0,
        comp: int = 0,
        bw_senders: Mapping[str | int, int] | None = None,
    ) -> Self:
        """
        Deduct memory and compute from a device and bandwidth from each sender of its input.

        Either all deductions happen or none.

        Parameters
        ----------
        device : str | int
            The receiving device, by id or index.
        mem : int
            Memory in bits.
        comp : int
            Multiplications.
        bw_senders : Mapping[str | int, int] | None
            Bits per sending device.

        Returns
        -------
        ResourceLedger
            This ledger.

        Raises
        ------
        InsufficientResource
            If any budget does not suffice.
        """
        j = self._idx(device)
        senders = {self._idx(k): int(v) for k, v in (bw_senders or {}).items()}

        if mem < 0 or comp < 0 or any(v < 0 for v in senders.values()):
            raise ValueError("Reserved amounts must be non-negative.")

        if mem > self.mem[j]:
            raise InsufficientResource("memory", self.fleet.devices[j].id, mem, int(self.mem[j]))
        if comp > self.comp[j]:
            raise InsufficientResource("compute", self.fleet.devices[j].id, comp, int(self.comp[j]))
        for i, v in senders.items():
            if v > self.bw[i]:
                raise InsufficientResource("bandwidth", self.fleet.devices[i].id, v, int(self.bw[i]))

        self.mem[j] -= mem
        self.comp[j] -= comp
        for i, v in senders.items():
            self.bw[i] -= v

        return self

    def release(
        self,
        device: str | int,
        mem: int = 0,
        comp: int = 0,
        bw_senders: Mapping[str | int, int] | None = None,
    ) -> Self:
        """Undo a reservation made with the same arguments."""
        j = self._idx(device)
        self.mem[j] += mem
        self.comp[j] += comp
        for k, v in (bw_senders or {}).items():
            self.bw[self._idx(k)] += v
        return self
