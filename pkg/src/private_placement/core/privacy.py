"""Privacy caps derived from measured black-box inversion quality."""

import functools
import logging
import os
from collections.abc import Sequence
from importlib import resources

import pandas as pd
from pydantic import BaseModel, Field, confloat, conint
from typing_extensions import Self

from private_placement.core.model import CnnSpec, first_fc_index, segment_count
from private_placement.core.util import ceil_div

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.01

# Absorbs float noise in tolerance + epsilon, e.g. 0.4 + 0.01 vs. 0.41.
_SLACK = 1e-12

_COLUMNS = ["dataset", "layer_label", "layer_index", "filters", "ssim"]


class SsimCurve(BaseModel, frozen=True):
    """Recovered SSIM of an inversion attack against one layer, by the number of the layer's maps an attacker holds."""

    dataset: str
    layer_label: str
    layer_index: conint(ge=1)
    entries: dict[conint(ge=1), confloat(ge=0.0, le=1.0)]

    @property
    def counts(self) -> list[int]:
        """Measured counts, ascending."""
        return sorted(self.entries.keys())


class PrivacyPolicy(BaseModel, frozen=True):
    """Per-layer caps on the number of segments one helper may compute, up to the split point."""

    dataset: str
    tolerance: confloat(gt=0.0, le=1.0) = 1.0
    epsilon: confloat(ge=0.0) = DEFAULT_EPSILON

    # Cap per measured (or explicitly capped) layer index.
    caps: dict[conint(ge=1), conint(ge=1)] = Field(default_factory=dict)

    # First layer that needs no cap.
    split_point: conint(ge=1) = 1

    # Labels of the measured layers, by layer index.
    labels: dict[conint(ge=1), str] = Field(default_factory=dict)

    # Layers where even the smallest measured count exceeds the tolerance.
    infeasible_layers: tuple[int, ...] = ()

    @classmethod
    def unbounded(cls, dataset: str = "*") -> Self:
        """A policy without caps."""
        return cls(dataset=dataset, tolerance=1.0, caps={}, split_point=1)


def _admits(ssim: float, tolerance: float, epsilon: float) -> bool:
    return ssim <= tolerance + epsilon + _SLACK


def max_filters(curve: SsimCurve, tolerance: float, epsilon: float = DEFAULT_EPSILON) -> int:
    """
    Return the largest measured count whose recovered SSIM is within the tolerance.

    Parameters
    ----------
    curve : SsimCurve
        The measurements.
    tolerance : float
        The maximum tolerated SSIM.
    epsilon : float
        Comparison slack.

    Returns
    -------
    int
        The largest count with SSIM <= tolerance + epsilon. If no count qualifies, the smallest measured count.

    Raises
    ------
    ValueError
        If the curve has no entries.
    """
    if not curve.entries:
        raise ValueError(f"Curve {curve.dataset}/{curve.layer_label} has no entries.")

    best = None
    for count in curve.counts:
        if _admits(curve.entries[count], tolerance, epsilon):
            best = count

    return curve.counts[0] if best is None else best


def split_point(
    dataset_curves: Sequence[SsimCurve],
    tolerance: float,
    epsilon: float = DEFAULT_EPSILON,
    num_layers: int | None = None,
) -> int:
    """
    Return the first layer index from which on no cap is needed.

    This is the layer of the first curve whose entry for the largest count, i.e. all maps on one device, is within the
    tolerance. If that is the shallowest measured curve, nothing needs a cap and the result is 1.

    Parameters
    ----------
    dataset_curves : Sequence[SsimCurve]
        The curves of one dataset.
    tolerance : float
        The maximum tolerated SSIM.
    epsilon : float
        Comparison slack.
    num_layers : int | None
        Number of layers of the CNN. If no curve qualifies, the result is num_layers + 1. Defaults to the deepest
        measured layer index.

    Returns
    -------
    int
        The split point.
    """
    curves = sorted((c for c in dataset_curves if c.entries), key=lambda c: c.layer_index)

    for i, curve in enumerate(curves):
        if _admits(curve.entries[curve.counts[-1]], tolerance, epsilon):
            return 1 if i == 0 else curve.layer_index

    if num_layers is None:
        num_layers = curves[-1].layer_index if curves else 0

    return num_layers + 1


def cap_for_layer(policy: PrivacyPolicy, l: int) -> int | None:
    """
    Return the cap for layer l, or None if the layer is unbounded.

    Layers without a cap of their own inherit the cap of the nearest preceding capped layer. Layers before the first
    capped layer take the first cap.
    """
    if l >= policy.split_point or not policy.caps:
        return None

    preceding = [k for k in policy.caps if k <= l]
    key = max(preceding) if preceding else min(policy.caps)

    return policy.caps[key]


def _embedded_table():
    return resources.files("private_placement").joinpath("data", "ssim_black_box.csv")


@functools.cache
def _embedded_curves() -> tuple[SsimCurve, ...]:
    with resources.as_file(_embedded_table()) as p:
        return tuple(_read_curves(p))


def load_curves(path: str | os.PathLike | None = None) -> list[SsimCurve]:
    """
    Load SSIM curves from a CSV file.

    Parameters
    ----------
    path : str | os.PathLike | None
        The file to read, with columns dataset, layer_label, layer_index, filters, ssim. Lines starting with '#' are
        ignored. Blank ssim cells mean the count is not applicable to the layer. Defaults to the embedded table.

    Returns
    -------
    list[SsimCurve]
        The curves, ordered by dataset and layer index.
    """
    if path is None:
        return list(_embedded_curves())
    return _read_curves(path)


def _read_curves(path) -> list[SsimCurve]:
    df = pd.read_csv(path, comment="#")

    missing = set(_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"SSIM table lacks columns: {', '.join(sorted(missing))}.")

    df = df.dropna(subset=["ssim"])

    curves = []
    for (dataset, label, index), group in df.groupby(["dataset", "layer_label", "layer_index"], sort=False):
        curves.append(
            SsimCurve(
                dataset=str(dataset),
                layer_label=str(label),
                layer_index=int(index),
                entries={int(f): float(s) for f, s in zip(group["filters"], group["ssim"])},
            )
        )

    return sorted(curves, key=lambda c: (c.dataset, c.layer_index))


def datasets(curves: Sequence[SsimCurve] | None = None) -> list[str]:
    """Names of the datasets with curves."""
    if curves is None:
        curves = load_curves()
    return sorted({c.dataset for c in curves})


def curves_for(dataset: str, curves: Sequence[SsimCurve] | None = None) -> list[SsimCurve]:
    """
    Return the curves of a dataset, ordered by layer index.

    Raises
    ------
    ValueError
        If there are no curves for the dataset.
    """
    if curves is None:
        curves = load_curves()
    selected = [c for c in curves if c.dataset == dataset]
    if not selected:
        raise ValueError(f"Unknown dataset {dataset!r}, available: {', '.join(datasets(curves))}.")
    return sorted(selected, key=lambda c: c.layer_index)


def derive_policy(
    dataset: str,
    tolerance: float,
    epsilon: float = DEFAULT_EPSILON,
    num_layers: int | None = None,
    curves: Sequence[SsimCurve] | None = None,
) -> PrivacyPolicy:
    """
    Derive the caps and the split point of a dataset for a tolerated SSIM.

    Parameters
    ----------
    dataset : str
        The dataset.
    tolerance : float
        The maximum tolerated SSIM, in (0, 1].
    epsilon : float
        Comparison slack.
    num_layers : int | None
        Number of layers of the CNN the policy applies to.
    curves : Sequence[SsimCurve] | None
        The curves to use. Defaults to the embedded table.

    Returns
    -------
    PrivacyPolicy
        The policy.
    """
    if not 0.0 < tolerance <= 1.0:
        raise ValueError(f"Tolerance must be in (0, 1], got {tolerance}.")

    selected = curves_for(dataset, curves)
    sp = split_point(selected, tolerance, epsilon, num_layers)

    caps = {}
    infeasible = []
    for curve in selected:
        if curve.layer_index >= sp:
            continue
        nf = max_filters(curve, tolerance, epsilon)
        if not _admits(curve.entries[nf], tolerance, epsilon):
            log.warning(
                "%s %s exceeds SSIM %.2f even at %d maps per device",
                dataset,
                curve.layer_label,
                tolerance,
                nf,
            )
            infeasible.append(curve.layer_index)
        caps[curve.layer_index] = nf

    return PrivacyPolicy(
        dataset=dataset,
        tolerance=tolerance,
        epsilon=epsilon,
        caps=caps,
        split_point=sp,
        labels={c.layer_index: c.layer_label for c in selected},
        infeasible_layers=tuple(infeasible),
    )


def policy_for(cnn: CnnSpec, tolerance: float, epsilon: float = DEFAULT_EPSILON) -> PrivacyPolicy:
    """Derive the policy for a CNN from the embedded table. Datasets without curves get an unbounded policy."""
    if cnn.dataset not in datasets():
        log.warning("no SSIM curves for dataset %s of %s, no caps applied", cnn.dataset, cnn.name)
        return PrivacyPolicy.unbounded(cnn.dataset)
    return derive_policy(cnn.dataset, tolerance, epsilon, cnn.num_layers)


def pinned_layers(cnn: CnnSpec, policy: PrivacyPolicy) -> set[int]:
    """Layers the source computes: the first, the last, and the first fully connected one if it precedes the split."""
    pinned = {1, cnn.num_layers}
    fc = first_fc_index(cnn)
    if fc is not None and fc < policy.split_point:
        pinned.add(fc)
    return pinned


def required_helpers(policy: PrivacyPolicy, cnn: CnnSpec) -> int:
    """
    Return the least number of helpers any valid placement of the CNN needs.

    Any layer computed by helpers needs one, and a capped layer with P segments needs at least ⌈P/Nf⌉.
    """
    pinned = pinned_layers(cnn, policy)
    needed = 0
    for l in range(1, cnn.num_layers + 1):
        if l in pinned:
            continue
        cap = cap_for_layer(policy, l)
        needed = max(needed, 1 if cap is None else ceil_div(segment_count(cnn, l), cap))
    return needed
