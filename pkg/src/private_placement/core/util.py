import os
from collections.abc import Mapping
from pathlib import Path

import numpy as np
import yaml

# Environment variable naming the default directory for relative input paths.
DATA_DIR_ENV = "PRIVATE_PLACEMENT_DATA_DIR"

BITS_PER_BYTE = 8
KIBIBYTE = 2**10
MEBIBYTE = 2**20
GIBIBYTE = 2**30

# Device classes used for the small and the powerful share of a mix string like "70/30".
SMALL_CLASS = "STM32H7"
POWERFUL_CLASS = "RPi3"


def bytes_to_bits(n: int) -> int:
    """Convert a byte count to bits."""
    return int(n) * BITS_PER_BYTE


def ceil_div(a: int, b: int) -> int:
    """
    Integer ceiling division.

    Parameters
    ----------
    a : int
        The dividend, must be non-negative.
    b : int
        The divisor, must be positive.

    Returns
    -------
    int
        The smallest integer not less than a / b.
    """
    if b <= 0:
        raise ValueError("Divisor must be positive.")
    return -(-a // b)


def min_max(values: np.ndarray) -> np.ndarray:
    """
    Min-max normalize values to [0, 1].

    If all values are equal, every entry maps to 0.

    Parameters
    ----------
    values : np.ndarray
        The values to normalize. Must be finite.

    Returns
    -------
    np.ndarray
        The normalized values, as float64.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return values
    lo = values.min()
    span = values.max() - lo
    if span <= 0.0:
        return np.zeros_like(values)
    return (values - lo) / span


def parse_mix(mix: str | Mapping[str, float]) -> dict[str, float]:
    """
    Parse a fleet composition into fractions per device class.

    Accepted forms are a mapping from class name to fraction or percentage, a single class name, or a string "a/b"
    giving the small and the powerful percentage, e.g. "70/30" is 70% STM32H7 and 30% RPi3.

    Parameters
    ----------
    mix : str | Mapping[str, float]
        The composition.

    Returns
    -------
    dict[str, float]
        Fractions per class name, in the given order, summing to 1.

    Raises
    ------
    ValueError
        If any fraction is negative or the fractions do not sum to 1 (or 100).
    """
    if isinstance(mix, str):
        text = mix.strip()
        if "/" in text:
            parts = text.split("/")
            if len(parts) != 2:
                raise ValueError(f"Mix {mix!r} must have the form 'small/powerful'.")
            try:
                small, powerful = (float(x) for x in parts)
            except ValueError as e:
                raise ValueError(f"Mix {mix!r} must contain two numbers.") from e
            raw = {SMALL_CLASS: small, POWERFUL_CLASS: powerful}
        elif text:
            raw = {text: 1.0}
        else:
            raise ValueError("Mix must not be empty.")
    else:
        raw = {str(k): float(v) for k, v in mix.items()}

    if not raw:
        raise ValueError("Mix must not be empty.")

    if any(v < 0 for v in raw.values()):
        raise ValueError(f"Mix {mix!r} contains negative fractions.")

    total = sum(raw.values())

    # Percentages.
    if abs(total - 100.0) < 1e-9:
        raw = {k: v / 100.0 for k, v in raw.items()}
        total = 1.0

    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"Mix {mix!r} must sum to 1 (or 100), got {total}.")

    return raw


def apportion(fractions: Mapping[str, float], count: int) -> dict[str, int]:
    """
    Split a device count over classes by the largest remainder method.

    Parameters
    ----------
    fractions : Mapping[str, float]
        Fractions per class, summing to 1.
    count : int
        The total number of devices.

    Returns
    -------
    dict[str, int]
        Device counts per class, in the given order, summing to count. Ties on the remainder go to the class listed
        first.
    """
    if count < 0:
        raise ValueError("Count must be non-negative.")

    names = list(fractions.keys())
    quotas = [fractions[k] * count for k in names]
    counts = [int(np.floor(q)) for q in quotas]
    left = count - sum(counts)

    # Stable sort keeps the given order among equal remainders.
    order = sorted(range(len(names)), key=lambda i: -(quotas[i] - counts[i]))
    for i in order[:left]:
        counts[i] += 1

    return dict(zip(names, counts))


def resolve_path(path: str | os.PathLike, data_dir: str | os.PathLike | None = None) -> Path:
    """
    Resolve an input path.

    A path that exists relative to the working directory is returned as is. Otherwise, the path is looked up relative to
    the data directory, which defaults to the value of the environment variable PRIVATE_PLACEMENT_DATA_DIR.

    Parameters
    ----------
    path : str | os.PathLike
        The path to resolve.
    data_dir : str | os.PathLike | None
        The data directory. If None, the environment variable is consulted.

    Returns
    -------
    Path
        The resolved path.

    Raises
    ------
    FileNotFoundError
        If the path can be found in neither location.
    """
    p = Path(path)
    if p.exists():
        return p

    if data_dir is None:
        data_dir = os.environ.get(DATA_DIR_ENV) or None

    if data_dir is not None and not p.is_absolute():
        candidate = Path(data_dir) / p
        if candidate.exists():
            return candidate

    raise FileNotFoundError(f"No such file: {str(path)!r}.")


def read_document(path: str | os.PathLike, schema: str) -> dict:
    """
    Read a YAML document and check its schema header.

    Parameters
    ----------
    path : str | os.PathLike
        The file to read.
    schema : str
        The expected value of the top-level 'schema' key, e.g. 'cnn/v1'.

    Returns
    -------
    dict
        The document without the schema key.

    Raises
    ------
    ValueError
        If the document is not a mapping or carries a different schema.
    """
    with open(path, encoding="utf-8") as f:
        doc = yaml.safe_load(f)

    if not isinstance(doc, dict):
        raise ValueError(f"{str(path)!r} must contain a mapping.")

    found = doc.pop("schema", None)
    if found is not None and found != schema:
        raise ValueError(f"{str(path)!r} has schema {found!r}, expected {schema!r}.")

    return doc
