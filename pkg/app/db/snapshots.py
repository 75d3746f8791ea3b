"""
Snapshot files: a text header followed by raw field values.

    DBPFSNAP
    version 1
    nx 64
    ny 64
    lx 1.0
    ly 1.0
    time 0.5
    fields 2
    names psi phi
    end
    <fields * nx * ny little-endian float64 values, row-major, field after field>
"""

import logging
from pathlib import Path

import numpy as np

from app.exceptions import SnapshotFormatError
from app.services.model import PhaseState
from app.utils.grid_field import Grid2D, ScalarField

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

MAGIC = "DBPFSNAP"
VERSION = 1
DTYPE = np.dtype("<f8")
_KEYS = ("version", "nx", "ny", "lx", "ly", "time", "fields", "names")


def field_names(n_fields: int) -> list[str]:
    return ["psi", "phi"] if n_fields == 2 else [f"phi{k}" for k in range(1, n_fields + 1)]


def write_snapshot(state: PhaseState, path: str | Path) -> Path:
    path = Path(path)
    grid = state.grid
    n_fields = len(state.fields)
    header = [
        MAGIC,
        f"version {VERSION}",
        f"nx {grid.nx}",
        f"ny {grid.ny}",
        f"lx {grid.lx!r}",
        f"ly {grid.ly!r}",
        f"time {float(state.time)!r}",
        f"fields {n_fields}",
        "names " + " ".join(field_names(n_fields)),
        "end",
    ]
    payload = np.stack(state.arrays()).astype(DTYPE, copy=False)
    with path.open("wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(payload.tobytes(order="C"))
    return path


def _parse_header(lines: list[str]) -> dict[str, str]:
    if not lines or lines[0] != MAGIC:
        raise SnapshotFormatError(f"bad magic string {lines[0] if lines else ''!r}, expected {MAGIC!r}")
    entries = {}
    for line in lines[1:]:
        key, _, value = line.partition(" ")
        entries[key] = value
    missing = [k for k in _KEYS if k not in entries]
    if missing:
        raise SnapshotFormatError(f"snapshot header lacks {', '.join(missing)}")
    if entries["version"] != str(VERSION):
        raise SnapshotFormatError(f"unsupported snapshot version {entries['version']}")
    return entries


def read_snapshot(path: str | Path) -> PhaseState:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise SnapshotFormatError(f"cannot read snapshot {path}: {exc}") from exc
    lines, offset = [], 0
    while True:
        end = data.find(b"\n", offset)
        if end < 0:
            raise SnapshotFormatError("snapshot header is not terminated")
        try:
            line = data[offset:end].decode("ascii")
        except UnicodeDecodeError as exc:
            raise SnapshotFormatError("snapshot header is not text") from exc
        offset = end + 1
        if line == "end":
            break
        lines.append(line)
        if len(lines) > len(_KEYS) + 1:
            raise SnapshotFormatError("snapshot header is too long")

    entries = _parse_header(lines)
    try:
        grid = Grid2D(int(entries["nx"]), int(entries["ny"]), float(entries["lx"]), float(entries["ly"]))
        time = float(entries["time"])
        n_fields = int(entries["fields"])
    except ValueError as exc:
        raise SnapshotFormatError(f"corrupt snapshot header: {exc}") from exc

    expected = n_fields * grid.nx * grid.ny * DTYPE.itemsize
    if len(data) - offset != expected:
        raise SnapshotFormatError(
            f"payload holds {len(data) - offset} bytes, header announces {expected}; file is truncated or corrupt"
        )
    values = np.frombuffer(data, dtype=DTYPE, offset=offset).reshape(n_fields, grid.nx, grid.ny)
    logger.debug(f"Read snapshot {path} at t={time}")
    return PhaseState(tuple(ScalarField(grid, values[k].astype(np.float64)) for k in range(n_fields)), time)
