"""Shared-exponent fixed-point arrays.

An L-bit array stores signed integer mantissas with ``|mant| <= 2**(L-1) - 1``
and one exponent for the whole array; element ``i`` represents
``mant[i] * 2**(expo - (L-1))``. Quantization truncates the magnitude toward
zero and saturates on overflow.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import kernels
from .errors import AllZeroInput, ConfigInvalid, DegenerateDistribution, ZeroNorm

MAX_BITS = 64
ROUNDING_MODES = ("trunc", "floor")


# --------------------------------------------------------------------------
# exponent selection
# --------------------------------------------------------------------------

def _ceil_log2(m: float) -> int:
    # exact: an exact power of two 2**p maps to p
    frac, e = math.frexp(m)
    return e - 1 if frac == 0.5 else e


def max_exponent(x) -> int:
    """Smallest ``e`` with ``max|x| <= 2**e``.

    Raises :class:`AllZeroInput` when every element is zero.
    """
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("max_exponent of an empty array")
    m = float(np.max(np.abs(x)))
    if m == 0.0:
        raise AllZeroInput("all elements are zero")
    return _ceil_log2(m)


def distribution_exponent(x) -> int:
    """``ceil(log2(|mean| + 3*std))`` with the population standard deviation."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("distribution_exponent of an empty array")
    spread = abs(float(np.mean(x))) + 3.0 * float(np.std(x))
    if spread == 0.0:
        raise DegenerateDistribution("|mean| + 3 std is zero")
    return _ceil_log2(spread)


def int_max_exponent(acc, lsb_exp: int) -> int:
    """Exact :func:`max_exponent` of ``acc * 2**lsb_exp`` for integer ``acc``."""
    m = int(np.max(np.abs(acc))) if np.size(acc) else 0
    if m == 0:
        raise AllZeroInput("all elements are zero")
    return (m - 1).bit_length() + lsb_exp


@dataclass(frozen=True)
class MaxAbs:
    """Exponent from the largest magnitude, refreshed on every use."""

    def choose(self, step, current, values, maxabs=None):
        try:
            return maxabs() if maxabs is not None else max_exponent(_resolve(values))
        except AllZeroInput:
            return 0

    def __str__(self):
        return "maxabs"


@dataclass(frozen=True)
class Distribution:
    """Exponent from ``|mean| + 3 std``, refreshed every ``period`` steps."""

    period: int = 1

    def __post_init__(self):
        if self.period < 1:
            raise ConfigInvalid("distribution period must be >= 1")

    def choose(self, step, current, values, maxabs=None):
        if current is not None and step % self.period != 0:
            return current
        try:
            return distribution_exponent(_resolve(values))
        except DegenerateDistribution:
            return 0

    def __str__(self):
        return f"dist:{self.period}"


@dataclass(frozen=True)
class Fixed:
    value: int

    def choose(self, step, current, values, maxabs=None):
        return self.value

    def __str__(self):
        return f"fixed:{self.value}"


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant exponent keyed by step: ``((step, value), ...)``."""

    steps: tuple

    def __post_init__(self):
        steps = tuple((int(s), int(v)) for s, v in self.steps)
        if not steps:
            raise ConfigInvalid("schedule needs at least one entry")
        if any(b[0] <= a[0] for a, b in zip(steps, steps[1:])):
            raise ConfigInvalid("schedule steps must be strictly increasing")
        object.__setattr__(self, "steps", steps)

    def value_at(self, step: int) -> int:
        value = self.steps[0][1]
        for s, v in self.steps:
            if s > step:
                break
            value = v
        return value

    def choose(self, step, current, values, maxabs=None):
        return self.value_at(step)

    def __str__(self):
        return "schedule:" + ",".join(f"{s}={v}" for s, v in self.steps)


ExponentPolicy = Union[MaxAbs, Distribution, Fixed, Schedule]


def fixed_decrement(start: int, interval: int, floor: int) -> Schedule:
    """Exponent ``start`` lowered by one every ``interval`` steps down to ``floor``."""
    if interval < 1 or floor > start:
        raise ConfigInvalid("need interval >= 1 and floor <= start")
    return Schedule(tuple((i * interval, start - i) for i in range(start - floor + 1)))


def parse_policy(text: str) -> ExponentPolicy:
    """Parse ``maxabs``, ``dist[:period]``, ``fixed:E``, ``decrement:start,interval,floor``
    or ``schedule:step=E,step=E,...``."""
    kind, _, arg = text.strip().lower().partition(":")
    try:
        if kind == "maxabs" and not arg:
            return MaxAbs()
        if kind in ("dist", "distribution"):
            return Distribution(int(arg) if arg else 1)
        if kind == "fixed":
            return Fixed(int(arg))
        if kind == "decrement":
            start, interval, floor = (int(v) for v in arg.split(","))
            return fixed_decrement(start, interval, floor)
        if kind == "schedule":
            pairs = [item.split("=") for item in arg.split(",")]
            return Schedule(tuple((int(s), int(v)) for s, v in pairs))
    except ValueError as exc:
        raise ConfigInvalid(f"bad exponent policy {text!r}: {exc}") from exc
    raise ConfigInvalid(f"unknown exponent policy {text!r}")


def _resolve(values):
    return values() if callable(values) else values


# --------------------------------------------------------------------------
# fixed-point arrays
# --------------------------------------------------------------------------

def _check_bits(bits):
    if not 2 <= bits <= MAX_BITS:
        raise ConfigInvalid(f"bit width must lie in [2, {MAX_BITS}], got {bits}")


@dataclass(frozen=True, eq=False)
class FixedArray:
    """Immutable L-bit mantissas sharing one exponent.

    ``n_saturated`` records how many elements clipped when the array was made;
    it is bookkeeping only and does not take part in equality.
    """

    mant: np.ndarray
    expo: int
    bits: int
    n_saturated: int = field(default=0, compare=False)

    def __post_init__(self):
        _check_bits(self.bits)
        mant = np.array(self.mant, dtype=np.int64)
        limit = (1 << (self.bits - 1)) - 1
        if mant.size and int(np.max(np.abs(mant))) > limit:
            raise ValueError(f"mantissa exceeds {self.bits}-bit range")
        mant.setflags(write=False)
        object.__setattr__(self, "mant", mant)
        object.__setattr__(self, "expo", int(self.expo))
        object.__setattr__(self, "bits", int(self.bits))

    @property
    def shape(self):
        return self.mant.shape

    @property
    def lsb_exp(self) -> int:
        return self.expo - (self.bits - 1)

    @property
    def limit(self) -> int:
        return (1 << (self.bits - 1)) - 1

    def dequantize(self) -> np.ndarray:
        return dequantize(self)

    def __eq__(self, other):
        if not isinstance(other, FixedArray):
            return NotImplemented
        return (self.bits == other.bits and self.expo == other.expo
                and self.mant.shape == other.mant.shape
                and bool(np.array_equal(self.mant, other.mant)))

    __hash__ = None

    def __repr__(self):
        return f"FixedArray(shape={self.shape}, expo={self.expo}, bits={self.bits})"

    def to_record(self) -> dict:
        return {"bits": self.bits, "expo": self.expo, "shape": list(self.shape),
                "mant": [int(v) for v in self.mant.ravel()]}

    @classmethod
    def from_record(cls, record: dict) -> "FixedArray":
        mant = np.array(record["mant"], dtype=np.int64).reshape(record["shape"])
        return cls(mant, record["expo"], record["bits"])

    def to_json(self) -> str:
        return json.dumps(self.to_record(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "FixedArray":
        return cls.from_record(json.loads(text))

    def to_csv_row(self) -> str:
        """``bits,expo,d0xd1,mant...`` on one line."""
        dims = "x".join(str(d) for d in self.shape)
        return ",".join([str(self.bits), str(self.expo), dims]
                        + [str(int(v)) for v in self.mant.ravel()])

    @classmethod
    def from_csv_row(cls, line: str) -> "FixedArray":
        fields = line.strip().split(",")
        shape = [int(d) for d in fields[2].split("x")] if fields[2] else []
        mant = np.array([int(v) for v in fields[3:]], dtype=np.int64).reshape(shape)
        return cls(mant, int(fields[1]), int(fields[0]))


def quantize(x, bits: int, policy: ExponentPolicy = MaxAbs(), step: int = 0,
             current: int | None = None) -> FixedArray:
    """Convert real values to an L-bit fixed-point array.

    Mantissas are ``floor(|x| * 2**(L-1-expo))`` with the sign applied
    afterwards, clipped to ``±(2**(L-1) - 1)``.
    """
    _check_bits(bits)
    x = np.asarray(x, dtype=float)
    expo = policy.choose(step, current, x)
    scaled = np.floor(np.ldexp(np.abs(x), bits - 1 - expo))
    limit = (1 << (bits - 1)) - 1
    over = scaled >= 2.0 ** (bits - 1)
    mag = np.where(over, 0.0, scaled).astype(np.int64)
    mag[over] = limit
    mant = np.where(x < 0, -mag, mag)
    return FixedArray(mant, expo, bits, n_saturated=int(np.count_nonzero(over)))


def dequantize(xq: FixedArray) -> np.ndarray:
    return np.ldexp(xq.mant.astype(float), xq.lsb_exp)


def zeta_of(x, xq: FixedArray) -> float:
    """Normalized rounding error; spectral norms for matrices, l2 for vectors."""
    x = np.asarray(x, dtype=float)
    diff = x - dequantize(xq)
    if x.ndim == 2:
        denom = float(np.linalg.norm(x, 2))
        num = float(np.linalg.norm(diff, 2))
    else:
        denom = float(np.linalg.norm(x))
        num = float(np.linalg.norm(diff))
    if denom == 0.0:
        raise ZeroNorm("reference array has zero norm")
    return num / denom


# --------------------------------------------------------------------------
# wide integers
# --------------------------------------------------------------------------

_INT64_SAFE = 1 << 62


def fits_int64(bound: int) -> bool:
    return bound < _INT64_SAFE


def as_wide(values) -> np.ndarray:
    """Integer array as int64 if safe, else as an object array of Python ints."""
    arr = np.asarray(values)
    if arr.dtype == object:
        m = max((abs(int(v)) for v in arr.ravel()), default=0)
        if fits_int64(m):
            return arr.astype(np.int64)
        return arr
    return arr.astype(np.int64)


def wide_to_float(acc, lsb_exp: int) -> np.ndarray:
    acc = np.asarray(acc)
    if acc.dtype == object:
        return np.array([math.ldexp(float(v), lsb_exp) for v in acc.ravel()],
                        dtype=float).reshape(acc.shape)
    return np.ldexp(acc.astype(float), lsb_exp)


def _shift_object(acc, shift, bits, rounding):
    limit = (1 << (bits - 1)) - 1
    out = []
    n_sat = 0
    for v in acc.ravel():
        v = int(v)
        if shift >= 0:
            r = v >> shift if (rounding == "floor" or v >= 0) else -((-v) >> shift)
        else:
            r = v << -shift
        if r > limit:
            r, n_sat = limit, n_sat + 1
        elif r < -limit:
            r, n_sat = -limit, n_sat + 1
        out.append(r)
    return np.array(out, dtype=np.int64).reshape(acc.shape), n_sat


def requantize(acc, lsb_exp: int, bits: int, expo: int,
               rounding: str = "trunc") -> FixedArray:
    """Round exact integers ``acc * 2**lsb_exp`` to an L-bit array at ``expo``.

    ``rounding="trunc"`` drops magnitude bits (matching :func:`quantize`);
    ``"floor"`` is an arithmetic right shift. Out-of-range values saturate.
    """
    if rounding not in ROUNDING_MODES:
        raise ConfigInvalid(f"unknown rounding mode {rounding!r}")
    _check_bits(bits)
    shift = (expo - (bits - 1)) - lsb_exp
    acc = np.asarray(acc)
    if acc.dtype == object:
        mant, n_sat = _shift_object(acc, shift, bits, rounding)
    else:
        mant, n_sat = kernels.requantize_shift(acc.astype(np.int64), shift, bits, rounding)
    return FixedArray(mant, expo, bits, n_saturated=n_sat)


def align(parts: Sequence[FixedArray]):
    """Exact integer views of several arrays at their finest common LSB.

    Returns ``(ints, lsb_exp)`` with each entry int64 when it fits, else an
    object array of Python ints.
    """
    lsb = min(p.lsb_exp for p in parts)
    out = []
    for p in parts:
        s = p.lsb_exp - lsb
        bound = (p.limit << s) if p.mant.size else 0
        if bound < (1 << 60):  # headroom for sums of a few aligned terms
            out.append(p.mant.astype(np.int64) << s)
        else:
            out.append(np.array([int(v) << s for v in p.mant.ravel()],
                                dtype=object).reshape(p.shape))
    return out, lsb
