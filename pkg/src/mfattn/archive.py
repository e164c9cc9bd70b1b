"""Trajectory archives and provenance-stamped CSV/JSON outputs.

Archive layout (all little-endian):

    16 bytes   magic  b"MFATTN-TRAJ-v1\\0\\0"
    40 bytes   uint64 n, d, H, K (snapshot count); float64 dt
    8 bytes    uint64 length L of the metadata block
    L bytes    UTF-8 JSON metadata (resolved config, version, seed, ...)
    K float64  snapshot times
    K*n*d      float64 token clouds
    K*H*d*d    float64 head ensembles
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import __version__

MAGIC = b"MFATTN-TRAJ-v1\x00\x00"
_HEADER = struct.Struct("<QQQQd")
_LEN = struct.Struct("<Q")


class ArchiveError(ValueError):
    pass


@dataclass
class Archive:
    dt: float
    times: np.ndarray
    clouds: np.ndarray
    ensembles: np.ndarray
    meta: dict


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def write_archive(path, traj, meta):
    """Serialize a Trajectory; byte-identical for identical inputs."""
    clouds = np.ascontiguousarray(traj.clouds, dtype="<f8")
    ens = np.ascontiguousarray(traj.ensembles, dtype="<f8")
    K, n, d = clouds.shape
    H = ens.shape[1]
    blob = _canonical_json({"version": __version__, **meta}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(n, d, H, K, float(traj.dt)))
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(traj.times, dtype="<f8").tobytes())
        fh.write(clouds.tobytes())
        fh.write(ens.tobytes())


def read_archive(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:16] != MAGIC:
        raise ArchiveError(f"{path}: not a trajectory archive (bad magic)")
    off = 16
    n, d, H, K, dt = _HEADER.unpack_from(data, off)
    off += _HEADER.size
    (L,) = _LEN.unpack_from(data, off)
    off += _LEN.size
    meta = json.loads(data[off:off + L].decode("utf-8"))
    off += L
    sizes = (K, K * n * d, K * H * d * d)
    if len(data) - off != 8 * sum(sizes):
        raise ArchiveError(f"{path}: truncated or oversized payload")
    arrays = []
    for size in sizes:
        arrays.append(np.frombuffer(data, dtype="<f8", count=size, offset=off).astype(float))
        off += 8 * size
    times, clouds, ens = arrays
    return Archive(dt, times, clouds.reshape(K, n, d), ens.reshape(K, H, d, d), meta)


def provenance(cfg_dict, seed, **extra):
    return {"version": __version__, "seed": seed, "config": cfg_dict, **extra}


def write_json(path, payload):
    """Deterministic JSON: sorted keys, repr-exact floats, trailing newline."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=1, allow_nan=True))
        fh.write("\n")


def write_csv(path, columns, rows, prov):
    """CSV with the provenance block as leading ``#`` comment lines."""
    buf = io.StringIO()
    buf.write("# " + _canonical_json(prov) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path):
    """Return (provenance dict or None, column names, list of row dicts)."""
    prov = None
    lines = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                if prov is None:
                    try:
                        prov = json.loads(line[1:].strip())
                    except json.JSONDecodeError:
                        pass
                continue
            lines.append(line)
    reader = csv.DictReader(lines)
    return prov, reader.fieldnames, list(reader)
