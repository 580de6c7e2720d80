"""Checkpoint container.

Layout (little-endian)::

    b"DLAC"  u16 version  u8 flags (bit 0: fused)
    u16 C1   u16 C2       u8 n_stages  u16 channels[n_stages]
    u32 meta_len  meta (UTF-8 JSON: model / discriminator configs, extras)
    u32 n_records
    n_records x [u8 section  u16 name_len  name  DLAT tensor]

Sections: 0 generator, 1 regular discriminator, 2 noise discriminator.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

from .adversarial import Discriminator
from .blocks import FusedModelError, SegModel
from .io_utils import atomic_write_bytes
from .tensor import TensorFormatError, tensor_from_bytes, tensor_to_bytes

MAGIC = b"DLAC"
VERSION = 1
SECTIONS = {"generator": 0, "d1": 1, "d2": 2}
_SECTION_NAMES = {v: k for k, v in SECTIONS.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: SegModel
    d1: Discriminator | None = None
    d2: Discriminator | None = None
    meta: dict = field(default_factory=dict)

    @property
    def fused(self):
        return self.model.fused


def checkpoint_bytes(model: SegModel, d1=None, d2=None, extra=None):
    meta = {"model": model.config, "extra": extra or {}}
    if d1 is not None:
        meta["d1"] = d1.config
    if d2 is not None:
        meta["d2"] = d2.config
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<HBHHB", VERSION, int(model.fused), model.n_boundary, model.n_room,
                              len(model.channels))]
    out.append(struct.pack(f"<{len(model.channels)}H", *model.channels))
    out.append(struct.pack("<I", len(meta_raw)) + meta_raw)
    records = []
    for section, net in (("generator", model), ("d1", d1), ("d2", d2)):
        if net is None:
            continue
        for name, arr in net.state_dict().items():
            raw = name.encode()
            records.append(struct.pack("<BH", SECTIONS[section], len(raw)) + raw + tensor_to_bytes(arr))
    out.append(struct.pack("<I", len(records)))
    out.extend(records)
    return b"".join(out)


def save_checkpoint(path, model, d1=None, d2=None, extra=None):
    atomic_write_bytes(path, checkpoint_bytes(model, d1, d2, extra))


def _need(buf, off, n, what):
    if len(buf) - off < n:
        raise CheckpointError(f"truncated checkpoint while reading {what} (at byte offset {off})")


def parse_checkpoint(buf) -> Checkpoint:
    _need(buf, 0, 12, "header")
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic (at byte offset 0)")
    version, fused, c1, c2, n_stages = struct.unpack_from("<HBHHB", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    _need(buf, off, 2 * n_stages + 4, "stage channels")
    channels = struct.unpack_from(f"<{n_stages}H", buf, off)
    off += 2 * n_stages
    (meta_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    _need(buf, off, meta_len, "metadata")
    meta = json.loads(bytes(buf[off:off + meta_len]).decode())
    off += meta_len
    _need(buf, off, 4, "record count")
    (n_records,) = struct.unpack_from("<I", buf, off)
    off += 4
    states = {"generator": {}, "d1": {}, "d2": {}}
    for _ in range(n_records):
        _need(buf, off, 3, "record header")
        section, name_len = struct.unpack_from("<BH", buf, off)
        if section not in _SECTION_NAMES:
            raise CheckpointError(f"unknown section {section} (at byte offset {off})")
        off += 3
        _need(buf, off, name_len, "record name")
        name = bytes(buf[off:off + name_len]).decode()
        off += name_len
        try:
            arr, off = tensor_from_bytes(buf, off)
        except TensorFormatError as exc:
            raise CheckpointError(f"record {name!r}: {exc}") from None
        states[_SECTION_NAMES[section]][name] = arr
    if off != len(buf):
        raise CheckpointError(f"trailing bytes after last record (at byte offset {off})")

    mcfg = meta["model"]
    if (tuple(mcfg["channels"]), mcfg["n_boundary"], mcfg["n_room"]) != (tuple(channels), c1, c2):
        raise CheckpointError("header and metadata disagree on model shape")
    model = SegModel(channels, mcfg["in_channels"], c1, c2, fused=bool(fused))
    model.load_state_dict(states["generator"])
    discs = {}
    for key in ("d1", "d2"):
        if key in meta:
            cfg = meta[key]
            d = Discriminator(cfg["in_channels"], tuple(cfg["blocks"]), cfg["width"], cfg["stem_stride"])
            d.load_state_dict(states[key])
            discs[key] = d
    return Checkpoint(model, discs.get("d1"), discs.get("d2"), meta.get("extra", {}))


def load_checkpoint(path, for_training=False) -> Checkpoint:
    with open(path, "rb") as fh:
        ckpt = parse_checkpoint(fh.read())
    if for_training and ckpt.fused:
        raise FusedModelError(f"{path} is a fused checkpoint and cannot be trained")
    return ckpt
