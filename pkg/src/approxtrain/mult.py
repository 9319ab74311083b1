"""Approximate-multiplier simulation.

Inputs and weights are quantized to 8-bit sign-magnitude (sign bit plus a
7-bit magnitude). Magnitudes go through a 128x128 product table, the sign is
the XOR of the operand signs, and products accumulate exactly in integers.

Any 7x7-bit unsigned multiplier can be plugged in as a table; the built-in
default is a truncated partial-product array.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import counters
from .tensor.functional import check_conv_shapes, im2col

log = logging.getLogger(__name__)

SIDE = 128
ENTRIES = SIDE * SIDE
TABLE_MAGIC = b"MTBL"
DEFAULT_DROP_K = 3


class MultTableError(ValueError):
    pass


def default_truncated_mul(a: int, b: int, drop_k: int = DEFAULT_DROP_K) -> int:
    """7x7-bit array multiplier with the ``drop_k`` least-significant partial-product columns removed."""
    if not (0 <= a < SIDE and 0 <= b < SIDE):
        raise ValueError(f"operands must be 7-bit unsigned, got {a}, {b}")
    if not 0 <= drop_k <= 6:
        raise ValueError(f"drop_k must be in [0, 6], got {drop_k}")
    total = 0
    for i in range(7):
        if not (a >> i) & 1:
            continue
        for j in range(7):
            if (b >> j) & 1 and i + j >= drop_k:
                total += 1 << (i + j)
    return total


def truncated_products(drop_k: int) -> np.ndarray:
    """The full 128x128 product grid of :func:`default_truncated_mul` (vectorised)."""
    if not 0 <= drop_k <= 6:
        raise ValueError(f"drop_k must be in [0, 6], got {drop_k}")
    a = np.arange(SIDE)[:, None]
    b = np.arange(SIDE)[None, :]
    out = np.zeros((SIDE, SIDE), dtype=np.int64)
    for i in range(7):
        for j in range(7):
            if i + j >= drop_k:
                out += (((a >> i) & 1) * ((b >> j) & 1)) << (i + j)
    return out.astype(np.uint16)


@dataclass(frozen=True, eq=False)
class MultTable:
    products: np.ndarray  # [128, 128] uint16, row = first operand
    name: str = "table"
    bits: int = 7

    def __post_init__(self):
        arr = np.asarray(self.products)
        if arr.shape != (SIDE, SIDE):
            raise MultTableError(f"product table must be {SIDE}x{SIDE}, got {arr.shape}")
        if arr.min() < 0 or arr.max() > 0xFFFF:
            raise MultTableError("table entries must fit in 16 unsigned bits")
        arr = arr.astype(np.uint16)
        arr.setflags(write=False)
        object.__setattr__(self, "products", arr)

    def __eq__(self, other):
        return isinstance(other, MultTable) and np.array_equal(self.products, other.products)

    def __hash__(self):
        return hash(self.products.tobytes())

    @classmethod
    def truncated(cls, drop_k: int = DEFAULT_DROP_K) -> "MultTable":
        return cls(truncated_products(drop_k), name=f"truncated_k{drop_k}")

    @classmethod
    def exact(cls) -> "MultTable":
        return cls.truncated(0)


def resolve_table(source: str | Path | MultTable | None) -> MultTable:
    """Accept a table, a path, ``default`` or ``default:K``."""
    if isinstance(source, MultTable):
        return source
    if source is None or str(source) == "default":
        return MultTable.truncated(DEFAULT_DROP_K)
    text = str(source)
    if text.startswith("default:"):
        try:
            k = int(text.split(":", 1)[1])
        except ValueError as exc:
            raise MultTableError(f"bad multiplier name {text!r}") from exc
        return MultTable.truncated(k)
    return load_mult_table(text)


def dump_mult_table(table: MultTable, path, fmt: str = "binary") -> None:
    path = Path(path)
    if fmt == "binary":
        path.write_bytes(TABLE_MAGIC + table.products.astype("<u2").tobytes())
    elif fmt == "text":
        lines = [f"{a} {b} {int(table.products[a, b])}" for a in range(SIDE) for b in range(SIDE)]
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown table format {fmt!r}")


def load_mult_table(path) -> MultTable:
    """Load a binary (``MTBL`` + 16384 LE u16) or text (``a b product`` lines) table."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == TABLE_MAGIC:
        body = raw[4:]
        if len(body) != 2 * ENTRIES:
            raise MultTableError(
                f"{path}: binary table holds {len(body) // 2} entries, expected {ENTRIES}; "
                f"data ends at entry {len(body) // 2} (byte offset {len(raw)})"
            )
        products = np.frombuffer(body, dtype="<u2").reshape(SIDE, SIDE)
    else:
        products = _parse_text_table(path, raw)
    table = MultTable(products, name=path.stem)
    stats = characterize(table)
    log.info("loaded multiplier %s: %s", table.name, stats)
    return table


def _parse_text_table(path: Path, raw: bytes) -> np.ndarray:
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MultTableError(f"{path}: not a binary table and not ASCII text (byte {exc.start})") from exc
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    products = np.full((SIDE, SIDE), -1, dtype=np.int64)
    for entry, line in enumerate(lines):
        fields = line.split()
        try:
            a, b, p = (int(f) for f in fields)
        except ValueError as exc:
            raise MultTableError(f"{path}: cannot parse entry {entry}: {line!r}") from exc
        if not (0 <= a < SIDE and 0 <= b < SIDE and 0 <= p <= 0xFFFF):
            raise MultTableError(f"{path}: entry {entry} out of range: {line!r}")
        if products[a, b] >= 0:
            raise MultTableError(f"{path}: entry {entry} repeats pair ({a}, {b})")
        products[a, b] = p
    if len(lines) != ENTRIES:
        raise MultTableError(f"{path}: expected {ENTRIES} entries, file ends at entry {len(lines)}")
    return products


@dataclass(frozen=True)
class MultErrorStats:
    mean_relative_error: float
    max_abs_error: int
    mean_error: float
    error_variance: float


def characterize(table: MultTable) -> MultErrorStats:
    """Exhaustive error statistics over all 128x128 operand pairs.

    The relative error skips pairs whose exact product is zero.
    """
    a = np.arange(SIDE)[:, None]
    b = np.arange(SIDE)[None, :]
    exact = (a * b).astype(np.int64)
    err = table.products.astype(np.int64) - exact
    nz = exact != 0
    # exact rational mean: group |err| by product so each distinct denominator appears once
    per_product = np.bincount(exact[nz], weights=np.abs(err[nz]).astype(np.float64))
    rel = sum((Fraction(int(s), p) for p, s in enumerate(per_product) if s), Fraction(0))
    total = int(err.sum())
    sq = int((err * err).sum())
    n = err.size
    return MultErrorStats(
        mean_relative_error=float(rel / int(nz.sum())),
        max_abs_error=int(np.abs(err).max()),
        mean_error=float(Fraction(total, n)),
        error_variance=float(Fraction(n * sq - total * total, n * n)),
    )


def approx_mul_signed(a: int, b: int, table: MultTable) -> int:
    """Sign-magnitude product: sign is XOR of signs, magnitude from the table."""
    if abs(a) >= SIDE or abs(b) >= SIDE:
        raise ValueError(f"operands must have 7-bit magnitude, got {a}, {b}")
    mag = int(table.products[abs(a), abs(b)])
    return -mag if (a < 0) != (b < 0) else mag


@dataclass(frozen=True)
class QuantParams:
    scale: float


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize8(x) -> tuple[np.ndarray, QuantParams]:
    """Symmetric sign-magnitude quantization, ``scale = max|x| / 127``."""
    x = np.asarray(x, dtype=np.float64)
    maxabs = float(np.abs(x).max()) if x.size else 0.0
    scale = maxabs / 127.0 if maxabs > 0 else 1.0
    q = np.clip(round_half_away(x / scale), -127, 127).astype(np.int8)
    return q, QuantParams(scale)


def dequantize(q, params: QuantParams) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) * params.scale).astype(np.float32)


def fake_quantize8(x) -> np.ndarray:
    q, params = quantize8(x)
    return dequantize(q, params)


_MAX_CHUNK = 1 << 22


def _table_dot(xq_cols: np.ndarray, wq: np.ndarray, table: MultTable) -> np.ndarray:
    """``sum_q sign * table[|x[r,q]|, |w[k,q]|]`` for every row r and filter k (int64)."""
    rows, q = xq_cols.shape
    k = wq.shape[0]
    limit = int(table.products.max()) * q
    assert limit < 2**31, f"integer accumulator would overflow: {limit}"
    flat = table.products.astype(np.int32).ravel()
    xm = np.abs(xq_cols.astype(np.int32))
    xneg = (xq_cols < 0).any()
    wm = np.abs(wq.astype(np.int32))
    wsign = np.where(wq < 0, -1, 1).astype(np.int32)
    out = np.empty((rows, k), dtype=np.int64)
    step = max(1, _MAX_CHUNK // max(1, k * q))
    for start in range(0, rows, step):
        xm_c = xm[start:start + step]
        prod = flat[xm_c[:, None, :] * SIDE + wm[None, :, :]] * wsign[None]
        if xneg:
            prod *= np.where(xq_cols[start:start + step] < 0, -1, 1).astype(np.int32)[:, None, :]
        out[start:start + step] = prod.sum(axis=2, dtype=np.int64)
    counters.bump("mult_table_ops", rows * k * q)
    return out


def am_conv2d(x, w, bias=None, table: MultTable | None = None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Convolution where every scalar product goes through the approximate multiplier."""
    table = table or MultTable.truncated()
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    check_conv_shapes(x, w, bias, stride, pad)
    xq, xp = quantize8(x)
    wq, wp = quantize8(w)
    k, _, kh, kw = w.shape
    cols, (ho, wo) = im2col(xq, kh, kw, stride, pad)
    n, p, q = cols.shape
    acc = _table_dot(cols.reshape(n * p, q), wq.reshape(k, q), table)
    counters.bump("am_kernel_calls")
    y = acc.reshape(n, ho, wo, k).transpose(0, 3, 1, 2) * (xp.scale * wp.scale)
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64).reshape(1, -1, 1, 1)
    return y.astype(np.float32)


def am_linear(x, w, bias=None, table: MultTable | None = None) -> np.ndarray:
    x = np.asarray(x)
    w = np.asarray(w)
    return am_conv2d(x[:, :, None, None], w[:, :, None, None], bias, table)[:, :, 0, 0]
