"""Per-batch parameter update records used by amnesiac unlearning."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import FormatError

_MAGIC = b"ULEDGER1"


@dataclass
class LedgerEntry:
    epoch: int
    batch: int
    member_ids: tuple
    delta: np.ndarray


@dataclass
class UpdateLedger:
    initial: np.ndarray
    entries: List[LedgerEntry] = field(default_factory=list)
    final: Optional[np.ndarray] = None

    def total(self, keep=None) -> np.ndarray:
        """Sequential sum of entry deltas (optionally only entries where ``keep(entry)``)."""
        s = np.zeros_like(self.initial)
        for e in self.entries:
            if keep is None or keep(e):
                s = s + e.delta
        return s

    def telescopes(self) -> bool:
        """True when ``initial + sum(deltas)`` equals ``final`` bitwise."""
        return self.final is not None and np.array_equal(self.initial + self.total(), self.final)

    def touching(self, ids) -> List[LedgerEntry]:
        ids = set(int(i) for i in ids)
        return [e for e in self.entries if ids.intersection(e.member_ids)]

    def all_ids(self) -> set:
        out = set()
        for e in self.entries:
            out.update(e.member_ids)
        return out

    # ------------------------------------------------------------ file format
    # header: magic, n_params, n_entries, sha256(initial), sha256(final)
    # then initial, final blocks, then per entry: epoch, batch, n_ids, ids, delta

    def save(self, path: str) -> None:
        final = self.final if self.final is not None else self.initial + self.total()
        init = self.initial.astype("<f8")
        fin = final.astype("<f8")
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<QQ", init.size, len(self.entries)))
            fh.write(hashlib.sha256(init.tobytes()).digest())
            fh.write(hashlib.sha256(fin.tobytes()).digest())
            fh.write(init.tobytes())
            fh.write(fin.tobytes())
            for e in self.entries:
                ids = np.asarray(sorted(e.member_ids), dtype="<i8")
                fh.write(struct.pack("<qqQ", e.epoch, e.batch, ids.size))
                fh.write(ids.tobytes())
                fh.write(np.asarray(e.delta, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "UpdateLedger":
        with open(path, "rb") as fh:
            buf = fh.read()
        try:
            if buf[:8] != _MAGIC:
                raise FormatError("not a ledger file")
            n, m = struct.unpack_from("<QQ", buf, 8)
            pos = 24
            h_init, h_fin = buf[pos : pos + 32], buf[pos + 32 : pos + 64]
            pos += 64
            init = _read(buf, pos, n)
            fin = _read(buf, pos + 8 * n, n)
            pos += 16 * n
            if hashlib.sha256(init.tobytes()).digest() != h_init or hashlib.sha256(fin.tobytes()).digest() != h_fin:
                raise FormatError("ledger digest mismatch")
            entries = []
            for _ in range(m):
                epoch, batch, k = struct.unpack_from("<qqQ", buf, pos)
                pos += 24
                ids = np.frombuffer(buf, "<i8", k, pos)
                pos += 8 * k
                delta = _read(buf, pos, n)
                pos += 8 * n
                entries.append(LedgerEntry(epoch, batch, tuple(int(i) for i in ids), delta))
        except (struct.error, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"truncated ledger file: {exc}") from exc
        if pos != len(buf):
            raise FormatError("trailing bytes in ledger file")
        return cls(init.astype(np.float64), entries, fin.astype(np.float64))


def _read(buf, pos, n):
    if pos + 8 * n > len(buf):
        raise FormatError("truncated ledger file")
    return np.frombuffer(buf, "<f8", n, pos).astype(np.float64)
