"""File formats: episode records, graph records, checkpoints, CSV reports.

All floating point text output goes through :func:`fmt` (decimal, 9
significant digits) so that reruns of the same computation produce
byte-identical files.

Episode file layout (plain text, one record per line):

    # key=value                      header lines (config_hash, seed, ...)
    <step> <ax> <ay> <angle> <len> <x0> <y0> <x1> <y1> ...

The four action fields describe the push that *produced* this record's
positions; the step-0 record carries ``nan`` action fields. Material labels
are constant over an episode and live in the ``material`` header.

Graph record (single line, same numeric formatting):

    <resolution> <n_edges> <x0> <y0> ... <u0> <v0> <u1> <v1> ...

Checkpoint layout (binary, little-endian):

    magic b"PKT1" | uint32 n_tensors | per tensor:
        uint32 name_len | name utf-8 | uint32 rows | uint32 cols |
        rows*cols float64 row-major
plus a text manifest ("<name> <rows> <cols>" per line) next to it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np


def fmt(x) -> str:
    """Decimal text form of a float, 9 significant digits."""
    return format(float(x), ".9g")


def fmt_row(values) -> str:
    return " ".join(fmt(v) for v in np.asarray(values, dtype=float).ravel())


def config_hash(obj) -> str:
    """Stable 16-hex-digit hash of a JSON-serializable config tree."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# episode records


def write_episode(path, records, header: dict) -> None:
    """records: iterable of (step, action_or_None, positions (n,2))."""
    lines = []
    for key in sorted(header):
        lines.append(f"# {key}={header[key]}")
    for step, action, positions in records:
        if action is None:
            act = [float("nan")] * 4
        else:
            act = [action.start[0], action.start[1], action.angle, action.length]
        lines.append(f"{int(step)} {fmt_row(act)} {fmt_row(positions)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_episode(path):
    """Returns (header dict, list of (step, action4 or None, positions))."""
    header = {}
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            header[key.strip()] = val.strip()
            continue
        parts = line.split()
        step = int(parts[0])
        act = np.array([float(v) for v in parts[1:5]])
        pos = np.array([float(v) for v in parts[5:]], dtype=float).reshape(-1, 2)
        records.append((step, None if np.isnan(act[0]) else act, pos))
    return header, records


def episode_positions(records):
    """Stacked positions (T, n, 2) and actions list from read_episode output."""
    pos = np.stack([r[2] for r in records])
    actions = [r[1] for r in records]
    return pos, actions


# ---------------------------------------------------------------------------
# graph records


def graph_record(graph) -> str:
    edges = np.asarray(graph.edges, dtype=int).reshape(-1, 2)
    fields = [str(graph.resolution), str(len(edges)), fmt_row(graph.particles)]
    if len(edges):
        fields.append(" ".join(str(v) for v in edges.ravel()))
    return " ".join(fields)


def parse_graph_record(line: str):
    parts = line.split()
    omega = int(parts[0])
    n_edges = int(parts[1])
    pos = np.array([float(v) for v in parts[2 : 2 + 2 * omega]]).reshape(omega, 2)
    rest = parts[2 + 2 * omega :]
    edges = np.array([int(v) for v in rest], dtype=int).reshape(n_edges, 2)
    return pos, edges, omega


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"PKT1"


def save_checkpoint(path, tensors: dict) -> None:
    """tensors: ordered name -> 2-D float64 array. Writes <path> and <path>.manifest.txt."""
    path = Path(path)
    out = [_MAGIC, struct.pack("<I", len(tensors))]
    manifest = []
    for name, value in tensors.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        if value.ndim != 2:
            raise ValueError(f"checkpoint tensor {name!r} must be 2-D")
        enc = name.encode()
        out.append(struct.pack("<I", len(enc)))
        out.append(enc)
        out.append(struct.pack("<II", value.shape[0], value.shape[1]))
        out.append(value.tobytes())
        manifest.append(f"{name} {value.shape[0]} {value.shape[1]}")
    path.write_bytes(b"".join(out))
    path.with_suffix(path.suffix + ".manifest.txt").write_text("\n".join(manifest) + "\n")


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a pilekit checkpoint")
    off = 4
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + name_len].decode()
        off += name_len
        rows, cols = struct.unpack_from("<II", raw, off)
        off += 8
        n = rows * cols * 8
        tensors[name] = np.frombuffer(raw[off : off + n], dtype="<f8").reshape(rows, cols).copy()
        off += n
    return tensors


# ---------------------------------------------------------------------------
# CSV reports


def write_csv(path, columns, rows, header_meta: dict | None = None) -> None:
    """Plain CSV with optional '# key=value' metadata lines before the header."""
    lines = []
    if header_meta:
        for key in sorted(header_meta):
            lines.append(f"# {key}={header_meta[key]}")
    lines.append(",".join(columns))
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, (float, np.floating)):
                cells.append(fmt(v))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path):
    meta, columns, rows = {}, None, []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            meta[key.strip()] = val.strip()
        elif columns is None:
            columns = line.split(",")
        else:
            rows.append(line.split(","))
    return meta, columns or [], rows
