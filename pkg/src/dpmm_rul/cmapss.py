"""Reader and writer for the C-MAPSS turbofan text format.

Each row holds 26 whitespace-separated numbers: unit id, cycle, three
operational settings and 21 sensor readings.  The settings are kept on the
parsed units but are not part of the sensor histories.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .datagen import SensorHistory
from .errors import DataError

log = logging.getLogger(__name__)

N_COLUMNS = 26
N_SETTINGS = 3
N_SENSORS = 21
SENSOR_SYMBOLS = (
    "T2", "T24", "T30", "T50", "P2", "P15", "P30", "Nf", "Nc", "epr", "Ps30",
    "phi", "NRf", "NRc", "BPR", "farB", "htBleed", "Nf_dmd", "PCNfR_dmd", "W31", "W32",
)
EXPECTED_UNITS = 100


@dataclass(frozen=True)
class CmapssUnit:
    unit: int
    cycles: np.ndarray
    settings: np.ndarray  # cycles x 3
    sensors: np.ndarray  # cycles x 21


def parse_file(path) -> list[CmapssUnit]:
    """Parse one train or test file into units ordered by id."""
    rows: dict[int, list[tuple[int, list[float], int]]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != N_COLUMNS:
                raise DataError(f"{path}:{lineno}: expected {N_COLUMNS} columns, found {len(parts)}")
            try:
                values = [float(p) for p in parts]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not all(np.isfinite(values)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            unit, cycle = values[0], values[1]
            if unit != int(unit) or cycle != int(cycle):
                raise DataError(f"{path}:{lineno}: unit and cycle must be integers")
            rows.setdefault(int(unit), []).append((int(cycle), values[2:], lineno))
    units = []
    for unit in sorted(rows):
        recs = rows[unit]
        cycles = np.array([r[0] for r in recs])
        if not np.array_equal(cycles, np.arange(1, len(cycles) + 1)):
            bad = next(r for i, r in enumerate(recs) if r[0] != i + 1)
            raise DataError(f"{path}:{bad[2]}: unit {unit} cycles are not contiguous from 1")
        data = np.array([r[1] for r in recs])
        units.append(CmapssUnit(unit, cycles, data[:, :N_SETTINGS], data[:, N_SETTINGS:]))
    return units


def write_file(path, units) -> None:
    """Write units back in the wire format (round-trips through ``parse_file``)."""
    with open(path, "w") as fh:
        for u in units:
            for i in range(len(u.cycles)):
                vals = [repr(float(v)) for v in (*u.settings[i], *u.sensors[i])]
                fh.write(f"{u.unit} {int(u.cycles[i])} " + " ".join(vals) + "\n")


def parse_rul(path) -> np.ndarray:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            try:
                out.append(float(s.split()[0]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: not a number: {s!r}") from None
    return np.array(out)


def parse_labels(path) -> dict[int, str]:
    """Optional mode labels: one ``unit mode`` pair per line (comma or whitespace separated)."""
    labels = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.replace(",", " ").split()
            if len(parts) < 2:
                raise DataError(f"{path}:{lineno}: expected 'unit mode'")
            try:
                unit = int(parts[0])
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise DataError(f"{path}:{lineno}: bad unit id {parts[0]!r}") from None
            labels[unit] = parts[1]
    return labels


def to_history(u: CmapssUnit, prefix: str, rul_at_end: float = 0.0, mode=None) -> SensorHistory:
    T = len(u.cycles)
    return SensorHistory(f"{prefix}-{u.unit:03d}", u.sensors.copy(), float(T + rul_at_end), mode, float(rul_at_end))


def load_cmapss(train_path, test_path, rul_path, labels_path=None):
    """Train histories (run to failure) and test histories with true RUL attached.

    ``labels_path`` optionally supplies a mode label per unit id, applied to
    the training units.
    """
    for p in (train_path, test_path, rul_path):
        if not os.path.exists(p):
            raise DataError(f"missing file {p}")
    train_units = parse_file(train_path)
    test_units = parse_file(test_path)
    rul = parse_rul(rul_path)
    if len(rul) != len(test_units):
        raise DataError(f"{rul_path}: {len(rul)} RUL values for {len(test_units)} test units")
    for name, units in (("train", train_units), ("test", test_units)):
        if len(units) != EXPECTED_UNITS:
            log.warning("%s file has %d units (expected %d)", name, len(units), EXPECTED_UNITS)
    labels = parse_labels(labels_path) if labels_path else {}
    train = [to_history(u, "train", 0.0, labels.get(u.unit)) for u in train_units]
    test = [to_history(u, "test", r) for u, r in zip(test_units, rul)]
    return train, test


def fd003_paths(data_dir, subset: str = "FD003"):
    return tuple(os.path.join(data_dir, f"{kind}_{subset}.txt") for kind in ("train", "test", "RUL"))
