"""Byte encodings for scalars, nestings and delta-compressed columns."""
from __future__ import annotations

import functools
import struct
from typing import Any, Sequence

from .algebra import (
    Labeled, ListOf, Nest, Nesting, Scalar, ScalarType, scalar_kind, unlabel,
)

FIXEDPOINT_SCALE = 1_000_000
_MAX_VARINT_BYTES = 10

_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")


class DecodeError(ValueError):
    """Truncated or malformed encoded data."""


def encode_varint(n: int) -> bytes:
    if n < 0:
        raise ValueError(f"varint of negative value {n}")
    if n >= 1 << 64:
        raise ValueError(f"varint overflow: {n}")
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def decode_varint(buf: bytes | memoryview, pos: int = 0) -> tuple[int, int]:
    n = 0
    shift = 0
    for k in range(_MAX_VARINT_BYTES):
        if pos + k >= len(buf):
            raise DecodeError("truncated varint")
        b = buf[pos + k]
        n |= (b & 0x7F) << shift
        if not b & 0x80:
            if n >= 1 << 64:
                raise DecodeError("varint overflow")
            return n, pos + k + 1
        shift += 7
    raise DecodeError("varint overflow")


def zigzag(n: int) -> int:
    return (n << 1) if n >= 0 else ((-n << 1) - 1)


def unzigzag(z: int) -> int:
    return (z >> 1) if not z & 1 else -((z + 1) >> 1)


def encode_scalar(v: Any) -> bytes:
    kind = scalar_kind(v)
    if kind is ScalarType.INT:
        return _I64.pack(v)
    if kind is ScalarType.FLOAT:
        return _F64.pack(v)
    if kind is ScalarType.STR:
        raw = v.encode("utf-8")
        return encode_varint(len(raw)) + raw
    raise TypeError(f"not a storable scalar: {v!r}")


def decode_scalar(buf: bytes | memoryview, pos: int, kind: ScalarType) -> tuple[Any, int]:
    if kind is ScalarType.STR:
        n, pos = decode_varint(buf, pos)
        if pos + n > len(buf):
            raise DecodeError("truncated string")
        return bytes(buf[pos:pos + n]).decode("utf-8"), pos + n
    if pos + 8 > len(buf):
        raise DecodeError("truncated fixed-width scalar")
    if kind is ScalarType.INT:
        return _I64.unpack_from(buf, pos)[0], pos + 8
    return _F64.unpack_from(buf, pos)[0], pos + 8


def encode_value(v: Any) -> bytes:
    """Scalars in their fixed encodings; nestings as a child count then children."""
    if isinstance(v, tuple):
        return encode_varint(len(v)) + b"".join(encode_value(c) for c in v)
    return encode_scalar(v)


def decode_value(buf: bytes | memoryview, t: Any, pos: int = 0) -> tuple[Any, int]:
    t = unlabel(t)
    if isinstance(t, ScalarType):
        return decode_scalar(buf, pos, t)
    if isinstance(t, Scalar):
        return decode_scalar(buf, pos, t.kind)
    n, pos = decode_varint(buf, pos)
    if isinstance(t, Nesting):
        if n != len(t.children):
            raise DecodeError(f"nesting of {n} children, type expects {len(t.children)}")
        out = []
        for c in t.children:
            v, pos = decode_value(buf, c, pos)
            out.append(v)
        labels = t.labels
        return Nest(out, labels if any(lab is not None for lab in labels) else None), pos
    if isinstance(t, ListOf):
        out = []
        for _ in range(n):
            if t.item is None:
                raise DecodeError("nonempty list of unknown item type")
            v, pos = decode_value(buf, t.item, pos)
            out.append(v)
        return Nest(out), pos
    raise TypeError(f"not a type: {t!r}")


def scalar_width(kind: ScalarType) -> int | None:
    return None if kind is ScalarType.STR else 8


# --------------------------------------------------------------------------
# delta-fixedpoint columns

def to_fixedpoint(v: Any, kind: ScalarType) -> int:
    if kind is ScalarType.INT:
        return v
    if kind is ScalarType.FLOAT:
        return round(v * FIXEDPOINT_SCALE)
    raise TypeError("delta encoding needs numeric attributes")


def from_fixedpoint(k: int, kind: ScalarType) -> Any:
    return k if kind is ScalarType.INT else k / FIXEDPOINT_SCALE


class RecordCodec:
    """Encodes flat records of known scalar kinds.

    Attributes listed in `delta` are stored as zigzag varints of the
    difference from the previous record of the same run (fixed point at
    1e-6 for floats); a run starts at zero.
    """

    def __init__(self, kinds: Sequence[ScalarType], delta: Sequence[int] = ()):
        self.kinds = tuple(kinds)
        self.delta = frozenset(delta)
        for i in self.delta:
            if self.kinds[i] is ScalarType.STR:
                raise TypeError("delta encoding needs numeric attributes")
        widths = [scalar_width(k) for k in self.kinds]
        self.width = None if (self.delta or None in widths) else sum(widths)

    def encode_run(self, records: Sequence[Sequence[Any]]) -> bytes:
        out = bytearray()
        prev = [0] * len(self.kinds)
        for r in records:
            for i, (v, kind) in enumerate(zip(r, self.kinds)):
                if i in self.delta:
                    k = to_fixedpoint(v, kind)
                    out += encode_varint(zigzag(k - prev[i]))
                    prev[i] = k
                else:
                    out += encode_scalar(v)
        return bytes(out)

    def record_sizes(self, records: Sequence[Sequence[Any]]) -> list[int]:
        return [len(self.encode_run([r])) for r in records]

    def decode_run(self, buf: bytes | memoryview, pos: int, count: int) -> tuple[list, int]:
        if self.width is not None:
            end = pos + count * self.width
            if end > len(buf):
                raise DecodeError("truncated record run")
            return list(self._struct.iter_unpack(buf[pos:end])) if count else [], end
        try:
            return _run_decoder(self.kinds, tuple(sorted(self.delta)))(buf, pos, count)
        except (struct.error, IndexError):
            raise DecodeError("truncated record run") from None

    @property
    def _struct(self) -> struct.Struct:
        return _fixed_struct(self.kinds)


_FMT = {ScalarType.INT: "q", ScalarType.FLOAT: "d"}


@functools.lru_cache(maxsize=None)
def _fixed_struct(kinds: tuple) -> struct.Struct:
    return struct.Struct("<" + "".join(_FMT[k] for k in kinds))


@functools.lru_cache(maxsize=None)
def _run_decoder(kinds: tuple, delta: tuple):
    """Compile a record-run decoder specialised to one record shape."""
    ns = {"decode_varint": decode_varint, "DecodeError": DecodeError, "SCALE": FIXEDPOINT_SCALE}
    body = []
    fixed: list[int] = []

    def flush():
        if fixed:
            name = f"S{fixed[0]}"
            ns[name] = struct.Struct("<" + "".join(_FMT[kinds[i]] for i in fixed))
            body.append(f"{''.join(f'v{i}, ' for i in fixed)}= {name}.unpack_from(buf, pos)")
            body.append(f"pos += {ns[name].size}")
            fixed.clear()

    for i, kind in enumerate(kinds):
        if i in delta:
            flush()
            body += ["z = buf[pos]", "if z < 128: pos += 1",
                     "else: z, pos = decode_varint(buf, pos)",
                     f"p{i} += (z >> 1) if not z & 1 else -((z + 1) >> 1)",
                     f"v{i} = p{i} / SCALE" if kind is ScalarType.FLOAT else f"v{i} = p{i}"]
        elif kind is ScalarType.STR:
            flush()
            body += ["n = buf[pos]", "if n < 128: pos += 1",
                     "else: n, pos = decode_varint(buf, pos)",
                     "if pos + n > size: raise DecodeError('truncated string')",
                     f"v{i} = str(buf[pos:pos + n], 'utf-8')", "pos += n"]
        else:
            fixed.append(i)
    flush()
    lines = ["def decode(buf, pos, count):", "    out = []", "    append = out.append", "    size = len(buf)"]
    lines += [f"    p{i} = 0" for i in delta]
    lines.append("    for _ in range(count):")
    lines += ["        " + b for b in body]
    lines.append(f"        append(({''.join(f'v{i}, ' for i in range(len(kinds)))}))")
    lines.append("    return out, pos")
    exec("\n".join(lines), ns)
    return ns["decode"]
