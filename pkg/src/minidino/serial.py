"""Versioned binary container for parameters, embeddings, logits, checkpoints.

Layout: 4-byte magic, u32 little-endian header length, JSON header, raw
little-endian payload. The header carries the format version, a kind tag,
free-form metadata, an entry table (name, dtype, shape, byte offset) and a
SHA-256 checksum over the payload. Headers are serialized canonically
(sorted keys, fixed separators), so save -> load -> save is byte-identical.
Writes go through a temp file and rename, so a crash never leaves a partial
file at the target path.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from typing import Any

import numpy as np

from .nets import ParameterSet

MAGIC = b"MDC1"
FORMAT_VERSION = 1


class ContainerError(Exception):
    """Raised for malformed, corrupt, or version-mismatched containers."""


@dataclass
class Container:
    kind: str
    meta: dict[str, Any]
    arrays: dict[str, np.ndarray]


def _canonical_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_container(path: str, kind: str, meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "entries": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = _canonical_header(header)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload)
    os.replace(tmp, path)


def load_container(path: str, expect_kind: str | None = None) -> Container:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ContainerError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ContainerError(
            f"{path}: format version mismatch: file has {version}, reader supports {FORMAT_VERSION}"
        )
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise ContainerError(f"{path}: payload checksum failure")
    if expect_kind is not None and header["kind"] != expect_kind:
        raise ContainerError(f"{path}: kind is {header['kind']!r}, expected {expect_kind!r}")
    arrays: dict[str, np.ndarray] = {}
    for e in header["entries"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return Container(kind=header["kind"], meta=header["meta"], arrays=arrays)


# Parameter sets ------------------------------------------------------------


def save_params(path: str, ps: ParameterSet, meta: dict[str, Any] | None = None) -> None:
    full = {"param_version": ps.version}
    full.update(meta or {})
    save_container(path, "params", full, dict(ps.items()))


def load_params(path: str) -> tuple[ParameterSet, dict[str, Any]]:
    c = load_container(path, expect_kind="params")
    ps = ParameterSet(version=int(c.meta.get("param_version", 1)))
    for name, arr in c.arrays.items():
        ps.add(name, arr)
    return ps, c.meta


# Checkpoints ----------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to resume: both networks, center, optimizer, clock."""

    config_pairs: dict[str, Any]
    student: ParameterSet
    teacher: ParameterSet
    center: np.ndarray
    opt_buffers: dict[str, np.ndarray]
    t: int
    epoch: int
    meta: dict[str, Any]


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, arr in ckpt.student.items():
        arrays[f"student/{name}"] = arr
    for name, arr in ckpt.teacher.items():
        arrays[f"teacher/{name}"] = arr
    arrays["center"] = ckpt.center
    for name, arr in ckpt.opt_buffers.items():
        arrays[f"opt/{name}"] = arr
    meta = {
        "config": {k: _jsonable(v) for k, v in ckpt.config_pairs.items()},
        "t": ckpt.t,
        "epoch": ckpt.epoch,
        "student_version": ckpt.student.version,
        "teacher_version": ckpt.teacher.version,
    }
    meta.update(ckpt.meta)
    save_container(path, "checkpoint", meta, arrays)


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def load_checkpoint(path: str) -> Checkpoint:
    c = load_container(path, expect_kind="checkpoint")
    student = ParameterSet(version=int(c.meta.get("student_version", 1)))
    teacher = ParameterSet(version=int(c.meta.get("teacher_version", 1)))
    opt_buffers: dict[str, np.ndarray] = {}
    center = None
    for name, arr in c.arrays.items():
        if name.startswith("student/"):
            student.add(name[len("student/"):], arr)
        elif name.startswith("teacher/"):
            teacher.add(name[len("teacher/"):], arr)
        elif name.startswith("opt/"):
            opt_buffers[name[len("opt/"):]] = arr
        elif name == "center":
            center = arr
    if center is None:
        raise ContainerError(f"{path}: checkpoint missing center vector")
    config_pairs = {
        k: tuple(v) if isinstance(v, list) else v for k, v in c.meta.get("config", {}).items()
    }
    extra = {
        k: v
        for k, v in c.meta.items()
        if k not in ("config", "t", "epoch", "student_version", "teacher_version")
    }
    return Checkpoint(
        config_pairs=config_pairs,
        student=student,
        teacher=teacher,
        center=center,
        opt_buffers=opt_buffers,
        t=int(c.meta["t"]),
        epoch=int(c.meta["epoch"]),
        meta=extra,
    )
