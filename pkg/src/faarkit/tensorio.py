"""On-disk formats: the tensor container, packed NVFP4, rounding checkpoints.

Container layout: a u32 little-endian header length, a UTF-8 JSON header
{"name", "dtype" ("f32"|"f64"), "shape", "byte_order" ("LE")}, then the raw
little-endian row-major payload.

Packed NVFP4 layout: magic "NVF4", version u16, ndim u16, each dim u64,
block_size u32 (all little-endian), then s_global as 4 IEEE-754 bytes, one
E4M3 byte per block scale, and element codes two per byte with element 2k in
the low nibble, zero-padded to a whole byte.

Every write lands via a temp file and os.replace, so a crashed run never
leaves a partial artifact at the target path.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .codec import QuantizedTensor, ScaleSet, e4m3_bits_from_value, e4m3_value_from_bits
from .rounding import RoundingVars, init_rounding_vars

MAGIC = b"NVF4"
PACK_VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8"}


class FormatError(ValueError):
    """A file did not match its wire contract. `code` is machine-readable."""

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(message)


def atomic_write_bytes(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_tensor(arr: np.ndarray, path: str, name: str = "tensor") -> None:
    """Write a float32/float64 array to the container format."""
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        tag = "f32"
    elif arr.dtype == np.float64:
        tag = "f64"
    else:
        raise FormatError("dtype-mismatch", f"container holds f32/f64, not {arr.dtype}")
    if arr.size == 0:
        raise FormatError("empty-tensor", "refusing to write an empty tensor")
    header = json.dumps(
        {"name": name, "dtype": tag, "shape": list(arr.shape), "byte_order": "LE"},
        sort_keys=True,
    ).encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
    atomic_write_bytes(path, struct.pack("<I", len(header)) + header + payload)


def _read_container(path: str) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4:
        raise FormatError("malformed-header", f"{path}: too short for a header length")
    (hlen,) = struct.unpack("<I", blob[:4])
    if len(blob) < 4 + hlen:
        raise FormatError("malformed-header", f"{path}: header length {hlen} exceeds file")
    try:
        header = json.loads(blob[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError("malformed-header", f"{path}: header is not valid JSON: {e}") from e
    if not isinstance(header, dict) or set(header) != {"name", "dtype", "shape", "byte_order"}:
        raise FormatError("malformed-header", f"{path}: header fields wrong: {sorted(header)!r}"
                          if isinstance(header, dict) else f"{path}: header is not an object")
    if header["byte_order"] != "LE":
        raise FormatError("malformed-header", f"{path}: unsupported byte order {header['byte_order']!r}")
    if header["dtype"] not in _DTYPES:
        raise FormatError("dtype-mismatch", f"{path}: unknown dtype tag {header['dtype']!r}")
    shape = header["shape"]
    if (not isinstance(shape, list) or not all(isinstance(d, int) for d in shape)
            or any(d < 0 for d in shape)):
        raise FormatError("malformed-header", f"{path}: bad shape {shape!r}")
    n = 1
    for d in shape:
        n *= d
    if n == 0:
        raise FormatError("empty-tensor", f"{path}: empty tensors are not allowed")
    itemsize = 4 if header["dtype"] == "f32" else 8
    payload = blob[4 + hlen:]
    if len(payload) < n * itemsize:
        raise FormatError("truncated-payload",
                          f"{path}: payload holds {len(payload)} bytes, need {n * itemsize}")
    if len(payload) > n * itemsize:
        raise FormatError("size-inconsistency",
                          f"{path}: {len(payload) - n * itemsize} trailing bytes")
    arr = np.frombuffer(payload, dtype=_DTYPES[header["dtype"]]).reshape(shape)
    return arr.astype(np.float64) if header["dtype"] == "f64" else arr.astype(np.float32), header


def load_tensor(path: str, dtype: str | None = None) -> np.ndarray:
    """Read a container back; pass dtype "f32"/"f64" to insist on one."""
    arr, header = _read_container(path)
    if dtype is not None and header["dtype"] != dtype:
        raise FormatError("dtype-mismatch",
                          f"{path}: expected {dtype}, file holds {header['dtype']}")
    return arr


def load_named_tensor(path: str) -> tuple[np.ndarray, str]:
    arr, header = _read_container(path)
    return arr, str(header["name"])


def pack_nvfp4(q: QuantizedTensor, path: str) -> None:
    """Write a quantized tensor to the packed byte layout."""
    dims = q.shape
    head = struct.pack("<4sHH", MAGIC, PACK_VERSION, len(dims))
    head += struct.pack(f"<{len(dims)}Q", *dims)
    head += struct.pack("<I", q.scales.block_size)
    body = struct.pack("<f", np.float32(q.scales.s_global))
    body += bytes(e4m3_bits_from_value(float(s)) for s in q.scales.s_g)
    codes = q.codes
    if codes.size % 2:
        codes = np.append(codes, np.uint8(0))
    body += (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8).tobytes()
    atomic_write_bytes(path, head + body)


def unpack_nvfp4(path: str) -> QuantizedTensor:
    """Read a packed file back, validating magic, version, and exact size."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise FormatError("bad-magic", f"{path}: too short to be a packed tensor")
    magic, version, ndim = struct.unpack("<4sHH", blob[:8])
    if magic != MAGIC:
        raise FormatError("bad-magic", f"{path}: magic {magic!r} is not {MAGIC!r}")
    if version != PACK_VERSION:
        raise FormatError("version-mismatch",
                          f"{path}: version {version}, this build reads {PACK_VERSION}")
    off = 8 + 8 * ndim
    if len(blob) < off + 4:
        raise FormatError("size-inconsistency", f"{path}: truncated header")
    dims = struct.unpack(f"<{ndim}Q", blob[8:8 + 8 * ndim])
    (block_size,) = struct.unpack("<I", blob[off:off + 4])
    off += 4
    if block_size < 1:
        raise FormatError("size-inconsistency", f"{path}: block_size 0")
    n = 1
    for d in dims:
        n *= d
    if n == 0:
        raise FormatError("empty-tensor", f"{path}: empty tensors are not allowed")
    n_blocks = -(-n // block_size)
    expect = off + 4 + n_blocks + (n + 1) // 2
    if len(blob) != expect:
        raise FormatError("size-inconsistency",
                          f"{path}: file is {len(blob)} bytes, layout needs {expect}")
    (s_global,) = struct.unpack("<f", blob[off:off + 4])
    off += 4
    try:
        s_g = np.array([e4m3_value_from_bits(b) for b in blob[off:off + n_blocks]])
    except ValueError as e:
        raise FormatError("invalid-scale", f"{path}: {e}") from e
    off += n_blocks
    packed = np.frombuffer(blob[off:], dtype=np.uint8)
    codes = np.empty(2 * packed.size, dtype=np.uint8)
    codes[0::2] = packed & 0xF
    codes[1::2] = packed >> 4
    if n % 2 and codes[n] != 0:
        raise FormatError("size-inconsistency", f"{path}: padding nibble is not zero")
    try:
        scales = ScaleSet(s_global=float(s_global), s_g=s_g, block_size=int(block_size))
        return QuantizedTensor(shape=tuple(int(d) for d in dims), codes=codes[:n], scales=scales)
    except ValueError as e:
        raise FormatError("invalid-scale", f"{path}: {e}") from e


def save_rounding_vars(rv: RoundingVars, json_path: str, weights_file: str,
                       name: str = "layer") -> None:
    """Checkpoint: v in a sibling container, scales and the weight reference in JSON."""
    if not json_path.endswith(".rv.json"):
        raise ValueError("checkpoint path must end in .rv.json")
    v_path = json_path[: -len(".json")] + ".tensor"
    save_tensor(rv.v, v_path, name=name)
    doc = {
        "kind": "rounding-vars",
        "version": 1,
        "name": name,
        "weights_file": weights_file,
        "block_size": rv.scales.block_size,
        "s_global": rv.scales.s_global,
        "s_g_bits": bytes(e4m3_bits_from_value(float(s)) for s in rv.scales.s_g).hex(),
        "v_file": os.path.basename(v_path),
    }
    atomic_write_text(json_path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_rounding_vars(json_path: str) -> tuple[RoundingVars, str, str]:
    """Rebuild a RoundingVars from a checkpoint; returns (rv, weights_path, name)."""
    with open(json_path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError("malformed-header", f"{json_path}: {e}") from e
    if not isinstance(doc, dict) or doc.get("kind") != "rounding-vars":
        raise FormatError("malformed-header", f"{json_path}: not a rounding-vars checkpoint")
    if doc.get("version") != 1:
        raise FormatError("version-mismatch", f"{json_path}: version {doc.get('version')!r}")
    base = os.path.dirname(os.path.abspath(json_path))

    def resolve(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(base, p)

    W = load_tensor(resolve(doc["weights_file"]))
    s_g = np.array([e4m3_value_from_bits(b) for b in bytes.fromhex(doc["s_g_bits"])])
    scales = ScaleSet(s_global=float(doc["s_global"]), s_g=s_g,
                      block_size=int(doc["block_size"]))
    rv = init_rounding_vars(W, scales)
    v = load_tensor(resolve(doc["v_file"]), dtype="f64")
    if v.shape != rv.v.shape:
        raise FormatError("size-inconsistency",
                          f"{json_path}: v shape {v.shape} does not match weights {rv.v.shape}")
    if np.any(v < 0) or np.any(v > 1):
        raise FormatError("size-inconsistency", f"{json_path}: v outside [0, 1]")
    rv.v[...] = v
    return rv, resolve(doc["weights_file"]), str(doc.get("name", "layer"))
