"""Binary container for frames, tensors and checkpoints, plus CSV helpers.

Container layout::

    8 bytes   magic b"GFNOMA\\x00\\x01"
    4 bytes   header length H, little-endian uint32
    H bytes   UTF-8 JSON header
    payload   concatenated little-endian arrays

The header always carries ``kind``, ``version``, ``config_hash`` and a
``sections`` list of ``{name, dtype, shape, offset, nbytes}`` entries, with
offsets relative to the start of the payload.  Anything else (dims, seed,
architecture) lives in the header alongside them.
"""
from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional

import numpy as np

MAGIC = b"GFNOMA\x00\x01"
VERSION = 1


class ContainerError(ValueError):
    pass


def _le(dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def write_container(path, kind: str, arrays: Mapping[str, np.ndarray],
                    header: Optional[dict] = None, dtypes: Optional[Mapping[str, str]] = None,
                    config_hash: str = "") -> Path:
    """Atomically write ``arrays`` under ``kind``; ``dtypes`` overrides storage types."""
    path = Path(path)
    dtypes = dict(dtypes or {})
    sections = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = _le(dtypes.get(name, arr.dtype))
        data = np.ascontiguousarray(arr, dtype=dt).tobytes()
        sections.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    hdr = dict(header or {})
    hdr.update(kind=kind, version=VERSION, config_hash=config_hash, sections=sections)
    raw = json.dumps(hdr, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)
    return path


def read_header(path) -> dict:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ContainerError(f"{path}: not a container file (bad magic)")
        (n,) = struct.unpack("<I", f.read(4))
        return json.loads(f.read(n).decode("utf-8"))


def read_container(path, kind: Optional[str] = None):
    """Return ``(header, {name: array})``; checks ``kind`` when given."""
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ContainerError(f"{path}: not a container file (bad magic)")
        (n,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(n).decode("utf-8"))
        payload = f.read()
    if header.get("version") != VERSION:
        raise ContainerError(f"{path}: unsupported container version {header.get('version')}")
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, found {header.get('kind')!r}")
    arrays = {}
    for s in header["sections"]:
        buf = payload[s["offset"]:s["offset"] + s["nbytes"]]
        if len(buf) != s["nbytes"]:
            raise ContainerError(f"{path}: section {s['name']!r} is truncated")
        arrays[s["name"]] = np.frombuffer(buf, dtype=np.dtype(s["dtype"])).reshape(s["shape"]).copy()
    return header, arrays


def save_frames(path, frames, config_hash: str = "", tensor: Optional[np.ndarray] = None,
                extra_header: Optional[dict] = None) -> Path:
    """Serialize a FrameBatch (complex payloads stored as complex64)."""
    s = frames.shape
    header = dict(dims=s, noise_var=frames.noise_var, seed=frames.meta.get("seed"),
                  stream=frames.meta.get("stream"), start=frames.meta.get("start"),
                  group_powers=list(frames.powers.group_powers),
                  assignment=list(frames.powers.assignment))
    header.update(extra_header or {})
    arrays = {"codes": frames.codes.codes, "Y": frames.Y, "G": frames.G,
              "activity": frames.activity, "symbols": frames.symbols,
              "true_rate": frames.true_rate}
    dtypes = {"codes": "i1", "Y": "c8", "G": "c8", "activity": "u1", "symbols": "i1",
              "true_rate": "f8"}
    if tensor is not None:
        arrays["tensor"] = tensor
        dtypes["tensor"] = "c8"
    return write_container(path, "frames", arrays, header, dtypes, config_hash)


def load_frames(path):
    """Inverse of :func:`save_frames`; returns ``(FrameBatch, header)``."""
    from .simulator import FrameBatch, PowerProfile, SpreadingMatrix

    header, a = read_container(path, kind="frames")
    powers = PowerProfile(tuple(header["group_powers"]), tuple(header["assignment"]))
    meta = {k: header.get(k) for k in ("seed", "stream", "start", "config_hash")}
    frames = FrameBatch(a["Y"].astype(complex), a["G"].astype(complex), a["activity"],
                        a["symbols"], a["true_rate"], float(header["noise_var"]),
                        SpreadingMatrix(a["codes"]), powers, meta)
    if "tensor" in a:
        frames.meta["tensor"] = a["tensor"]
    return frames, header


def frame_to_csv(path, frame) -> Path:
    """Dump one PacketFrame's received samples as (m, chip, symbol, re, im) rows."""
    Y = frame.received
    rows = []
    for m in range(Y.shape[0]):
        for i in range(Y.shape[1]):
            for j in range(Y.shape[2]):
                v = Y[m, i, j]
                rows.append({"m": m, "chip": i, "symbol": j, "re": repr(float(v.real)),
                             "im": repr(float(v.imag))})
    return write_csv(path, rows, ("m", "chip", "symbol", "re", "im"))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def write_csv(path, rows: Iterable[Mapping], fields, comment: Optional[str] = None) -> Path:
    """Atomic CSV write; floats use ``repr`` so reruns compare bit for bit."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        if comment:
            for line in comment.splitlines():
                f.write(f"# {line}\n")
        w = csv.DictWriter(f, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in fields})
    os.replace(tmp, path)
    return path


def read_csv(path) -> list:
    with open(path, newline="") as f:
        lines = [l for l in f if not l.startswith("#")]
    return list(csv.DictReader(lines))


def csv_comment(path) -> Dict[str, str]:
    """Parse ``# key: value`` lines at the top of a CSV file."""
    out = {}
    with open(path) as f:
        for line in f:
            if not line.startswith("#"):
                break
            key, _, val = line[1:].strip().partition(":")
            out[key.strip()] = val.strip()
    return out
