"""Behavioral 8x8-bit signed approximate multipliers.

Three kinds are supported:

* ``exact``: the true signed product.
* ``truncated``: the ``k`` least-significant bits of both operands are
  cleared (two's complement) before an exact multiply.
* ``table``: an arbitrary 65,536-entry product table, e.g. exported from a
  gate-level library. Index order is ``(a + 128) * 256 + (b + 128)``.

Every kind exposes :meth:`MultiplierModel.dot`, an integer dot-product
kernel used by the quantized engine. For ``exact`` and ``truncated`` the
product factorizes into per-operand maps, which lets the kernel use a
float64 matmul; sums stay far below 2**53 so the result is bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LUT_MAGIC = b"AXM8"
LUT_VERSION = 1
LUT_ENTRIES = 65536
_HEADER = struct.Struct("<4sIII")

# Per-product gather budget for the table kernel.
_TABLE_CHUNK = 1 << 22


class MultiplierError(ValueError):
    pass


class TableLoadError(MultiplierError):
    pass


def _operand_grid() -> tuple[np.ndarray, np.ndarray]:
    v = np.arange(-128, 128, dtype=np.int32)
    a, b = np.meshgrid(v, v, indexing="ij")
    return a.ravel(), b.ravel()


def trunc_operand(x, k: int):
    """Zero the ``k`` LSBs of each operand's two's-complement form."""
    x = np.asarray(x)
    if k == 0:
        return x
    return x & ~((1 << k) - 1)


@dataclass(frozen=True, eq=False)
class MultiplierModel:
    id: str
    kind: str
    energy_per_op: float = 1.0
    k: int = 0
    table: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("exact", "truncated", "table"):
            raise MultiplierError(f"unknown multiplier kind {self.kind!r}")
        if not self.energy_per_op > 0:
            raise MultiplierError("energy_per_op must be > 0")
        if self.kind == "truncated" and not 0 <= self.k <= 7:
            raise MultiplierError(f"truncation bit count must be in 0..7, got {self.k}")
        if self.kind == "table":
            t = np.asarray(self.table)
            if t.size != LUT_ENTRIES:
                raise MultiplierError(f"table must have {LUT_ENTRIES} entries, got {t.size}")
            if t.min() < -32768 or t.max() > 32767:
                raise MultiplierError("table entries must fit in 16-bit signed")
            t = t.astype(np.int16).reshape(256, 256)
            t.setflags(write=False)
            object.__setattr__(self, "table", t)

    def multiply(self, a, b):
        """Elementwise product of 8-bit signed operands (scalars or arrays)."""
        a_arr = np.asarray(a)
        b_arr = np.asarray(b)
        if a_arr.size and (a_arr.min() < -128 or a_arr.max() > 127):
            raise MultiplierError("operand a out of 8-bit signed range")
        if b_arr.size and (b_arr.min() < -128 or b_arr.max() > 127):
            raise MultiplierError("operand b out of 8-bit signed range")
        a_arr = a_arr.astype(np.int32)
        b_arr = b_arr.astype(np.int32)
        if self.kind == "table":
            out = self.table[a_arr + 128, b_arr + 128].astype(np.int32)
        else:
            k = self.k if self.kind == "truncated" else 0
            out = trunc_operand(a_arr, k) * trunc_operand(b_arr, k)
        if out.ndim == 0:
            return int(out)
        return out

    def dot(self, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Sum of ``multiply(w[o, k], x[p, k])`` over ``k``.

        ``w`` has shape (O, K) and ``x`` shape (P, K); returns int64 (P, O).
        """
        w = np.asarray(w, dtype=np.int32)
        x = np.asarray(x, dtype=np.int32)
        if self.kind == "table":
            return self._table_dot(w, x)
        k = self.k if self.kind == "truncated" else 0
        wf = trunc_operand(w, k).astype(np.float64)
        xf = trunc_operand(x, k).astype(np.float64)
        return np.rint(xf @ wf.T).astype(np.int64)

    def _table_dot(self, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        P, K = x.shape
        O = w.shape[0]
        out = np.empty((P, O), dtype=np.int64)
        rows = self.table[w + 128]  # (O, K, 256): row for each stored weight
        step = max(1, _TABLE_CHUNK // max(1, K * O))
        kidx = np.arange(K)
        for s in range(0, P, step):
            xs = x[s : s + step] + 128  # (p, K)
            prods = rows[:, kidx[None, :], xs]  # (O, p, K)
            out[s : s + step] = prods.sum(axis=2, dtype=np.int64).T
        return out

    def product_table(self) -> np.ndarray:
        """All 65,536 products in canonical on-disk order (int16)."""
        a, b = _operand_grid()
        return np.asarray(self.multiply(a, b), dtype=np.int16)


def make_exact(energy_per_op: float = 1.0, id: str = "exact") -> MultiplierModel:
    return MultiplierModel(id=id, kind="exact", energy_per_op=energy_per_op)


def make_truncated(k: int, energy_per_op: float | None = None, id: str | None = None) -> MultiplierModel:
    """Operand-truncation multiplier masking ``k`` LSBs of each operand.

    If no energy is given, the cost scales with the surviving partial
    products, ``((8 - k) / 8) ** 2`` relative to exact.
    """
    if not isinstance(k, (int, np.integer)) or not 0 <= k <= 7:
        raise MultiplierError(f"truncation bit count must be in 0..7, got {k!r}")
    if energy_per_op is None:
        energy_per_op = ((8 - k) / 8) ** 2
    return MultiplierModel(id=id or f"trunc{k}", kind="truncated", energy_per_op=energy_per_op, k=int(k))


def make_table(table, energy_per_op: float = 1.0, id: str = "table") -> MultiplierModel:
    return MultiplierModel(id=id, kind="table", energy_per_op=energy_per_op, table=np.asarray(table))


def save_table(m: MultiplierModel, path) -> None:
    entries = m.product_table().astype("<i2")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(LUT_MAGIC, LUT_VERSION, LUT_ENTRIES, 0))
        fh.write(entries.tobytes())


def load_table(path, energy_per_op: float = 1.0, id: str | None = None) -> MultiplierModel:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TableLoadError(f"truncated header at offset {len(raw)}")
    magic, version, count, reserved = _HEADER.unpack_from(raw, 0)
    if magic != LUT_MAGIC:
        raise TableLoadError(f"bad magic {magic!r} at offset 0")
    if version != LUT_VERSION:
        raise TableLoadError(f"unsupported version {version} at offset 4")
    if count != LUT_ENTRIES:
        raise TableLoadError(f"entry count {count} != {LUT_ENTRIES} at offset 8")
    if reserved != 0:
        raise TableLoadError("nonzero reserved field at offset 12")
    body = raw[_HEADER.size :]
    expected = 2 * LUT_ENTRIES
    if len(body) < expected:
        raise TableLoadError(
            f"truncated table: {len(body) // 2} entries, data ends at offset {len(raw)}"
        )
    if len(body) > expected:
        raise TableLoadError(f"trailing bytes after table at offset {_HEADER.size + expected}")
    # int16 storage cannot hold out-of-range values, so no value check is needed here
    table = np.frombuffer(body, dtype="<i2").astype(np.int16)
    return make_table(table, energy_per_op=energy_per_op, id=id or Path(path).stem)


@dataclass(frozen=True)
class ErrorProfile:
    mean_abs_error: float
    max_abs_error: int
    error_rate: float


def error_profile(m: MultiplierModel) -> ErrorProfile:
    a, b = _operand_grid()
    err = np.abs(m.product_table().astype(np.int64) - a.astype(np.int64) * b)
    return ErrorProfile(
        mean_abs_error=float(err.mean()),
        max_abs_error=int(err.max()),
        error_rate=float(np.count_nonzero(err)) / LUT_ENTRIES,
    )


# Stand-ins spanning the energy/accuracy range used by the harness.
def default_multipliers() -> dict[str, MultiplierModel]:
    return {
        "exact": make_exact(),
        "trunc2": make_truncated(2),
        "trunc4": make_truncated(4),
    }


def resolve_multiplier(spec: str) -> MultiplierModel:
    """Resolve ``exact``, ``truncN`` or a path to a LUT file."""
    if spec == "exact":
        return make_exact()
    if spec.startswith("trunc") and spec[5:].isdigit():
        return make_truncated(int(spec[5:]))
    p = Path(spec)
    if p.exists():
        return load_table(p)
    raise MultiplierError(f"unknown multiplier id {spec!r}")
