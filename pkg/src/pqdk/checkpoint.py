"""PQDK checkpoint container.

Layout (little-endian)::

    magic "PQDK" | version u16 | section count u16
    section table: count x (tag 4s, offset u64, length u64)
    section bodies, in table order
    CRC32 u32 over every preceding byte

Sections: TOPO (JSON topology + parameter manifest), MASK (packed mask bits),
PAYL (parameter values), QPRM (quantization parameters), HIST (JSON stage
history and run metadata), METR (accuracy f64, nonzeros u64).

Masked payloads store only the kept coordinates, so a sparse INT8 weight
costs one bit per weight plus one byte per nonzero.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .pruning import PruneMask
from .quantization import QuantParams, QuantTensor

MAGIC = b"PQDK"
VERSION = 1
SECTION_ORDER = (b"TOPO", b"MASK", b"PAYL", b"QPRM", b"HIST", b"METR")
_HEADER = struct.Struct("<4sHH")
_ENTRY = struct.Struct("<4sQQ")
_QP = struct.Struct("<dB")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    topology: dict
    params: dict  # name -> float32 ndarray or QuantTensor
    masks: dict = field(default_factory=dict)  # name -> bool ndarray
    act_qparams: dict = field(default_factory=dict)  # site -> QuantParams
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    metrics: tuple = (0.0, 0)  # (accuracy %, nonzero weights)

    @property
    def quantized(self) -> bool:
        return any(isinstance(v, QuantTensor) for v in self.params.values())

    def dense_arrays(self) -> dict[str, np.ndarray]:
        """Float32 view of every parameter (dequantized where stored as integers)."""
        return {k: (v.dequantize().astype(np.float32) if isinstance(v, QuantTensor) else v)
                for k, v in self.params.items()}

    def weight_qparams(self) -> dict[str, QuantParams]:
        return {k: v.qparams for k, v in self.params.items() if isinstance(v, QuantTensor)}

    def prune_mask(self) -> PruneMask | None:
        if not self.masks:
            return None
        rho = self.meta.get("rho", 0.0)
        gamma = self.meta.get("gamma", 0.0)
        return PruneMask({k: m.copy() for k, m in self.masks.items()}, rho, gamma)

    def nonzero(self) -> int:
        """Nonzero weight count: values != 0 for float payloads, q != zero point for integer ones."""
        total = 0
        for k, v in self.params.items():
            if not k.endswith(".weight"):
                continue
            if isinstance(v, QuantTensor):
                total += v.nonzero()
            else:
                total += int(np.count_nonzero(v))
        return total

    def num_weights(self) -> int:
        return sum(int(np.prod(v.shape)) for k, v in self.params.items() if k.endswith(".weight"))

    def to_bytes(self) -> bytes:
        return serialize(self)

    def save(self, path) -> int:
        buf = serialize(self)
        try:
            with open(path, "wb") as fh:
                fh.write(buf)
        except OSError as exc:
            raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
        return len(buf)


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _kind(value, masked: bool) -> str:
    base = "u8" if isinstance(value, QuantTensor) else "f32"
    return base + "_masked" if masked else base


def serialize(ckpt: Checkpoint) -> bytes:
    manifest = []
    mask_buf, payload, qbuf = bytearray(), bytearray(), bytearray()
    qentries = []
    for name, value in ckpt.params.items():
        mask = ckpt.masks.get(name)
        kind = _kind(value, mask is not None)
        manifest.append({"name": name, "shape": list(value.shape), "kind": kind})
        data = value.data if isinstance(value, QuantTensor) else np.asarray(value, dtype="<f4")
        if mask is not None:
            if mask.shape != tuple(value.shape):
                raise CheckpointError(f"mask for {name} has shape {mask.shape}, value {value.shape}")
            mask_buf += np.packbits(mask.ravel(), bitorder="little").tobytes()
            data = data.ravel()[mask.ravel()]
        payload += np.ascontiguousarray(data, dtype="u1" if kind.startswith("u8") else "<f4").tobytes()
        if isinstance(value, QuantTensor):
            qentries.append((name, value.qparams))
    qentries += list(ckpt.act_qparams.items())
    qbuf += struct.pack("<I", len(qentries))
    for name, qp in qentries:
        raw = name.encode()
        qbuf += struct.pack("<H", len(raw)) + raw + _QP.pack(qp.scale, qp.zero_point)
    bodies = {
        b"TOPO": _dumps({"topology": ckpt.topology, "params": manifest}),
        b"MASK": bytes(mask_buf),
        b"PAYL": bytes(payload),
        b"QPRM": bytes(qbuf),
        b"HIST": _dumps({"history": ckpt.history, "meta": ckpt.meta}),
        b"METR": struct.pack("<dQ", float(ckpt.metrics[0]), int(ckpt.metrics[1])),
    }
    offset = _HEADER.size + _ENTRY.size * len(SECTION_ORDER)
    table, blob = bytearray(), bytearray()
    for tag in SECTION_ORDER:
        body = bodies[tag]
        table += _ENTRY.pack(tag, offset, len(body))
        blob += body
        offset += len(body)
    head = _HEADER.pack(MAGIC, VERSION, len(SECTION_ORDER)) + bytes(table) + bytes(blob)
    return head + struct.pack("<I", zlib.crc32(head) & 0xFFFFFFFF)


def deserialize(buf: bytes) -> Checkpoint:
    if len(buf) < _HEADER.size:
        raise TruncatedError(f"checkpoint is {len(buf)} bytes, shorter than its header")
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader supports {VERSION}")
    table_end = _HEADER.size + _ENTRY.size * count
    if len(buf) < table_end:
        raise TruncatedError(f"section table needs {table_end} bytes, file has {len(buf)}")
    sections = {}
    end = table_end
    for i in range(count):
        tag, off, length = _ENTRY.unpack_from(buf, _HEADER.size + i * _ENTRY.size)
        sections[tag] = (off, length)
        end = max(end, off + length)
    if len(buf) < end + 4:
        raise TruncatedError(f"checkpoint needs {end + 4} bytes, file has {len(buf)}")
    if len(buf) != end + 4:
        raise CheckpointError(f"{len(buf) - end - 4} trailing bytes after checksum")
    (crc,) = struct.unpack_from("<I", buf, end)
    if zlib.crc32(buf[:end]) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch")
    missing = [t for t in SECTION_ORDER if t not in sections]
    if missing:
        raise CheckpointError(f"missing sections {missing}")

    def body(tag):
        off, length = sections[tag]
        return buf[off:off + length]

    topo = json.loads(body(b"TOPO"))
    hist = json.loads(body(b"HIST"))
    qbody = body(b"QPRM")
    (nq,) = struct.unpack_from("<I", qbody, 0)
    pos, qps = 4, {}
    for _ in range(nq):
        (ln,) = struct.unpack_from("<H", qbody, pos)
        name = qbody[pos + 2:pos + 2 + ln].decode()
        scale, zp = _QP.unpack_from(qbody, pos + 2 + ln)
        qps[name] = QuantParams(scale, zp)
        pos += 2 + ln + _QP.size
    mask_body, payload = body(b"MASK"), body(b"PAYL")
    mpos = ppos = 0
    params, masks = {}, {}
    for entry in topo["params"]:
        name, shape, kind = entry["name"], tuple(entry["shape"]), entry["kind"]
        n = int(np.prod(shape))
        mask = None
        if kind.endswith("_masked"):
            nbytes = (n + 7) // 8
            mask = PruneMask.unpack(mask_body[mpos:mpos + nbytes], shape)
            mpos += nbytes
            masks[name] = mask
        count_vals = int(mask.sum()) if mask is not None else n
        if kind.startswith("u8"):
            qp = qps[name]
            vals = np.frombuffer(payload, dtype="u1", count=count_vals, offset=ppos)
            ppos += count_vals
            full = np.full(n, qp.zero_point, dtype=np.uint8)
        else:
            vals = np.frombuffer(payload, dtype="<f4", count=count_vals, offset=ppos)
            ppos += 4 * count_vals
            full = np.zeros(n, dtype=np.float32)
        if mask is not None:
            full[mask.ravel()] = vals
        else:
            full[:] = vals
        full = full.reshape(shape)
        params[name] = QuantTensor(full, qps[name]) if kind.startswith("u8") else full.astype(np.float32)
    weight_names = {e["name"] for e in topo["params"]}
    act = {k: v for k, v in qps.items() if k not in weight_names}
    acc, nnz = struct.unpack("<dQ", body(b"METR"))
    return Checkpoint(topo["topology"], params, masks, act, hist["history"], hist["meta"], (acc, nnz))


def save_checkpoint(ckpt: Checkpoint, path) -> int:
    return ckpt.save(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    return deserialize(buf)


def section_lengths(buf: bytes) -> dict[str, int]:
    _, _, count = _HEADER.unpack_from(buf, 0)
    out = {}
    for i in range(count):
        tag, _, length = _ENTRY.unpack_from(buf, _HEADER.size + i * _ENTRY.size)
        out[tag.decode()] = length
    return out
