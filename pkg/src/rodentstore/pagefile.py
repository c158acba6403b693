"""Fixed-size page file with a header page, a segment catalog and IO counters."""
from __future__ import annotations

import os
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

from .encoding import DecodeError, decode_varint, encode_varint

MAGIC = b"RDNT"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHIQ")
DEFAULT_PAGE_SIZE = 8192
MIN_PAGE_SIZE = HEADER.size

KIND_CODES = {"rows": 0, "column": 1, "cells": 2, "blob": 3}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
ENCODING_CODES = {"plain": 0, "delta-fixedpoint": 1}
ENCODING_NAMES = {v: k for k, v in ENCODING_CODES.items()}
ORDER_CODES = {"insertion": 0, "keys": 1, "morton": 2, "rowmajor": 3, "custom": 4}
ORDER_NAMES = {v: k for k, v in ORDER_CODES.items()}
_U64 = struct.Struct("<Q")


class PageFileError(IOError):
    pass


@dataclass(frozen=True)
class Ordering:
    """How a segment's entries are ordered.

    `keys` holds (attr, "ASC"|"DESC") pairs for the keys kind and bare
    attribute names (direction "ASC") for morton and rowmajor.
    `within_groups` marks an order that holds only inside each group.
    """
    kind: str = "insertion"
    keys: tuple = ()
    within_groups: bool = False

    def describe(self) -> str:
        if self.kind == "keys":
            return ", ".join(f"{a} {d}" for a, d in self.keys)
        if self.kind in ("morton", "rowmajor"):
            return f"{self.kind}({', '.join(a for a, _ in self.keys)})"
        return self.kind

    def encode(self) -> bytes:
        out = bytearray([ORDER_CODES[self.kind], int(self.within_groups)])
        out += encode_varint(len(self.keys))
        for attr, direction in self.keys:
            raw = attr.encode("utf-8")
            out += encode_varint(len(raw)) + raw
            out.append(0 if direction == "ASC" else 1)
        return bytes(out)

    @classmethod
    def decode(cls, buf, pos: int) -> tuple["Ordering", int]:
        if pos + 2 > len(buf):
            raise DecodeError("truncated ordering descriptor")
        kind = ORDER_NAMES.get(buf[pos])
        if kind is None:
            raise DecodeError(f"bad ordering kind {buf[pos]}")
        within = bool(buf[pos + 1])
        n, pos = decode_varint(buf, pos + 2)
        keys = []
        for _ in range(n):
            m, pos = decode_varint(buf, pos)
            attr = bytes(buf[pos:pos + m]).decode("utf-8")
            pos += m
            keys.append((attr, "ASC" if buf[pos] == 0 else "DESC"))
            pos += 1
        return cls(kind, tuple(keys), within), pos


@dataclass(frozen=True)
class CatalogEntry:
    id: int
    kind: str
    first_page: int
    span: int
    entries: int
    ordering: Ordering = field(default_factory=Ordering)
    encoding: str = "plain"

    def encode(self) -> bytes:
        return (encode_varint(self.id) + bytes([KIND_CODES[self.kind]])
                + struct.pack("<QQQ", self.first_page, self.span, self.entries)
                + self.ordering.encode() + bytes([ENCODING_CODES[self.encoding]]))

    @classmethod
    def decode(cls, buf, pos: int) -> tuple["CatalogEntry", int]:
        sid, pos = decode_varint(buf, pos)
        if pos + 25 > len(buf):
            raise DecodeError("truncated catalog entry")
        kind = KIND_NAMES.get(buf[pos])
        if kind is None:
            raise DecodeError(f"bad segment kind {buf[pos]}")
        first, span, entries = struct.unpack_from("<QQQ", buf, pos + 1)
        ordering, pos = Ordering.decode(buf, pos + 25)
        if pos >= len(buf):
            raise DecodeError("truncated catalog entry")
        encoding = ENCODING_NAMES.get(buf[pos])
        if encoding is None:
            raise DecodeError(f"bad encoding {buf[pos]}")
        return cls(sid, kind, first, span, entries, ordering, encoding), pos + 1


def encode_catalog(entries) -> bytes:
    return encode_varint(len(entries)) + b"".join(e.encode() for e in entries)


def decode_catalog(buf) -> list[CatalogEntry]:
    n, pos = decode_varint(buf, 0)
    out = []
    for _ in range(n):
        e, pos = CatalogEntry.decode(buf, pos)
        out.append(e)
    return out


@dataclass
class Counters:
    pages_read: int = 0
    pages_written: int = 0
    seeks: int = 0

    def as_dict(self) -> dict:
        return {"pages_read": self.pages_read, "pages_written": self.pages_written, "seeks": self.seeks}


class PageFile:
    """Page-granular file access.  Page 0 holds the header."""

    def __init__(self, path: str, page_size: int, fh, catalog_page: int):
        self.path = path
        self.page_size = page_size
        self._fh = fh
        self.catalog_page = catalog_page
        self.counters = Counters()
        self._last_read: int | None = None
        self._lock = threading.Lock()

    @classmethod
    def create(cls, path: str, page_size: int = DEFAULT_PAGE_SIZE) -> "PageFile":
        if page_size < MIN_PAGE_SIZE:
            raise PageFileError(f"page size {page_size} too small")
        if os.path.exists(path):
            raise PageFileError(f"{path} already exists")
        fh = open(path, "w+b")
        pf = cls(path, page_size, fh, 0)
        pf.write_header(0)
        return pf

    @classmethod
    def open(cls, path: str) -> "PageFile":
        try:
            fh = open(path, "r+b")
        except OSError as ex:
            raise PageFileError(f"cannot open {path}: {ex.strerror}") from None
        raw = fh.read(HEADER.size)
        if len(raw) < HEADER.size:
            fh.close()
            raise PageFileError(f"{path}: truncated header")
        magic, version, page_size, catalog = HEADER.unpack(raw)
        if magic != MAGIC:
            fh.close()
            raise PageFileError(f"{path}: not a database file")
        if version != FORMAT_VERSION:
            fh.close()
            raise PageFileError(f"{path}: unsupported format version {version}")
        return cls(path, page_size, fh, catalog)

    def close(self) -> None:
        self._fh.close()

    @property
    def page_count(self) -> int:
        self._fh.seek(0, os.SEEK_END)
        return self._fh.tell() // self.page_size

    def header_bytes(self, catalog_page: int) -> bytes:
        return HEADER.pack(MAGIC, FORMAT_VERSION, self.page_size, catalog_page)

    def write_header(self, catalog_page: int) -> None:
        self.write_page(0, self.header_bytes(catalog_page))
        self.catalog_page = catalog_page

    def read_page(self, index: int) -> bytes:
        if index < 0 or index >= self.page_count:
            raise PageFileError(f"page {index} out of range (page count {self.page_count})")
        with self._lock:
            self._fh.seek(index * self.page_size)
            data = self._fh.read(self.page_size)
            self.counters.pages_read += 1
            if self._last_read is None or index != self._last_read + 1:
                self.counters.seeks += 1
            self._last_read = index
        if len(data) != self.page_size:
            raise PageFileError(f"short read on page {index}")
        return data

    def peek_page(self, index: int) -> bytes:
        """Read a page without touching the IO counters (catalog snapshots, costing)."""
        if index < 0 or index >= self.page_count:
            raise PageFileError(f"page {index} out of range (page count {self.page_count})")
        with self._lock:
            self._fh.seek(index * self.page_size)
            return self._fh.read(self.page_size)

    def read_run(self, first: int, count: int) -> bytes:
        return b"".join(self.read_page(first + k) for k in range(count))

    def write_page(self, index: int, data: bytes) -> None:
        if len(data) > self.page_size:
            raise PageFileError("page overflow")
        with self._lock:
            self._fh.seek(index * self.page_size)
            self._fh.write(data.ljust(self.page_size, b"\0"))
            self.counters.pages_written += 1

    def write_run(self, first: int, data: bytes) -> int:
        """Write `data` densely from page `first`; returns the page span."""
        span = max(1, -(-len(data) // self.page_size))
        for k in range(span):
            self.write_page(first + k, data[k * self.page_size:(k + 1) * self.page_size])
        return span

    def sync(self) -> None:
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def reset_counters(self) -> None:
        with self._lock:
            self.counters = Counters()
            self._last_read = None

    @contextmanager
    def uncounted(self):
        """Leave the counters as they were once the block ends."""
        with self._lock:
            saved = (Counters(**self.counters.as_dict()), self._last_read)
        try:
            yield
        finally:
            with self._lock:
                self.counters, self._last_read = saved

    def forget_position(self) -> None:
        """Make the next read count as a seek (e.g. between queries)."""
        with self._lock:
            self._last_read = None
