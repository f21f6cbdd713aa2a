"""Binary checkpoint bundle: parameters, Adam state, normalization stats.

Layout (little-endian), see docs/formats.md::

    magic "DEMN" | u32 format_version | 32-byte config digest | u32 epoch | u32 n_sections
    n_sections x ( u16 name_len | name utf-8 | u8 dtype | u8 rank | rank x u32 extent | payload )
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import NormalizationStats
from .model import Architecture, ModelParams, build_demnet
from .optimizer import AdamState

MAGIC = b"DEMN"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sI32sII")

_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_TAG_OF = {(d.kind, d.itemsize): k for k, d in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def config_digest(payload: dict) -> bytes:
    """SHA-256 of the canonical JSON encoding of ``payload``."""
    return hashlib.sha256(json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()).digest()


@dataclass
class Checkpoint:
    params: ModelParams
    optimizer_state: AdamState | None = None
    norm_stats: NormalizationStats | None = None
    config_digest: bytes = bytes(32)
    epoch: int = 0
    arch_args: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def architecture(self) -> Architecture:
        return build_demnet(**self.arch_args)


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    tag = _TAG_OF.get((arr.dtype.kind, arr.dtype.itemsize))
    if tag is None:
        raise CheckpointError(f"cannot store dtype {arr.dtype} for {name}")
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    sections: list[tuple[str, np.ndarray]] = []
    meta = {
        "arch_args": ckpt.arch_args,
        "init_seed": ckpt.params.init_seed,
        "init_scheme": ckpt.params.init_scheme,
        "norm_stats": None if ckpt.norm_stats is None else ckpt.norm_stats.to_dict(),
        "config": ckpt.config,
        "has_optimizer": ckpt.optimizer_state is not None,
    }
    sections.append(("meta", np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)))
    for k, v in ckpt.params.arrays.items():
        sections.append((f"param/{k}", v))
    st = ckpt.optimizer_state
    if st is not None:
        sections.append(("adam/t", np.array([st.t], dtype=np.int64)))
        sections.append(("adam/hyper", np.array([st.lr, st.beta1, st.beta2, st.eps], dtype=np.float64)))
        for k in ckpt.params.arrays:
            sections.append((f"adam/m/{k}", st.m[k]))
            sections.append((f"adam/v/{k}", st.v[k]))
    digest = ckpt.config_digest
    if len(digest) != 32:
        raise CheckpointError(f"config digest must be 32 bytes, got {len(digest)}")
    blob = [HEADER.pack(MAGIC, ckpt.format_version, digest, ckpt.epoch, len(sections))]
    blob += [_pack_array(name, arr) for name, arr in sections]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(blob))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint (needed {n} bytes at offset {self.pos})")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if len(raw) < len(MAGIC) or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    magic, version, digest, epoch, n_sections = r.unpack(HEADER.format)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format_version {version} is not supported (this build reads version {FORMAT_VERSION})")
    sections = {}
    for _ in range(n_sections):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"{path}: section {name} has unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}I")
        dt = _DTYPE_TAGS[tag]
        count = int(np.prod(shape)) if rank else 1
        sections[name] = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape).copy()
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes after the last section")
    if "meta" not in sections:
        raise CheckpointError(f"{path}: missing meta section")
    meta = json.loads(sections.pop("meta").tobytes().decode())
    params = {k[len("param/"):]: v for k, v in sections.items() if k.startswith("param/")}
    state = None
    if meta.get("has_optimizer"):
        lr, b1, b2, eps = (float(x) for x in sections["adam/hyper"])
        state = AdamState(
            m={k: sections[f"adam/m/{k}"] for k in params},
            v={k: sections[f"adam/v/{k}"] for k in params},
            t=int(sections["adam/t"][0]),
            lr=lr, beta1=b1, beta2=b2, eps=eps,
        )
    stats = meta.get("norm_stats")
    return Checkpoint(
        params=ModelParams(params, meta.get("init_seed", 0), meta.get("init_scheme", "")),
        optimizer_state=state,
        norm_stats=None if stats is None else NormalizationStats.from_dict(stats),
        config_digest=digest,
        epoch=epoch,
        arch_args=meta.get("arch_args", {}),
        config=meta.get("config", {}),
        format_version=version,
    )
