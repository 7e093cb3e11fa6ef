"""src/ecnfallback/intlog.py
Fixed-point integer helpers shared by the RTT tracker and the score machine.

Values that are smoothed with a gain of 2^-g are held "upscaled", i.e. as
value << g, so that the EWMA update needs nothing but shifts and adds.
"""
from dataclasses import dataclass

from ecnfallback.errors import ContractError

MAX_SHIFT = 19
# Samples are clamped below 2^24 us (about 16.7 s).
VALUE_BITS = 24
VALUE_MAX = (1 << VALUE_BITS) - 1
U64_MAX = (1 << 64) - 1


def ilog2(x: int) -> int:
    """Returns floor(log2(x)), the position of the most significant set bit."""
    if x < 1:
        raise ContractError(f"ilog2 needs a positive integer, got {x}")
    return x.bit_length() - 1


@dataclass
class CarryState:
    """The geometric carry of a dithered integer log.

    Attributes:
        carry: A real in [1, 2), upscaled by the shift of the EWMA it serves.
    """

    carry: int

    @classmethod
    def initial(cls, shift: int) -> "CarryState":
        """Returns a carry holding 3/2 upscaled by shift."""
        if shift < 1:
            raise ContractError(f"carry shift must be at least 1, got {shift}")
        return cls(3 << (shift - 1))

    def rescale(self, old_shift: int, new_shift: int) -> None:
        self.carry = _shift_by(self.carry, new_shift - old_shift)


@dataclass
class UpscaledEwma:
    """An EWMA stored as true value << gain_shift.

    Attributes:
        value: The upscaled accumulator.
        gain_shift: log2 of the reciprocal of the gain.
    """

    value: int
    gain_shift: int

    @classmethod
    def start(cls, true_value: int, gain_shift: int) -> "UpscaledEwma":
        return cls(true_value << gain_shift, gain_shift)

    @property
    def true_value(self) -> int:
        return self.value >> self.gain_shift

    def rescale(self, new_shift: int) -> None:
        self.value = _shift_by(self.value, new_shift - self.gain_shift)
        self.gain_shift = new_shift


def carry_ilog2(arg: int, shift: int, carry: CarryState) -> int:
    """Returns a dithered integer log2 of arg and updates the carry.

    The fractional part of the log that plain ilog2 would throw away is kept
    in the carry and multiplied into the next argument. Over a run of calls
    the outputs therefore average to the true log2. For a constant 500, the
    result is 9 about 96.6% of the time and 8 otherwise, averaging 8.966.

    Args:
        arg: The value to take the log of, not upscaled.
        shift: The upscaling of carry.
        carry: Updated in place.

    Returns:
        The integer log, not upscaled.
    """
    if arg < 1:
        raise ContractError(f"carry_ilog2 needs a positive argument, got {arg}")
    if shift < 1:
        raise ContractError(f"carry_ilog2 shift must be at least 1, got {shift}")
    arg *= carry.carry
    # Add upscaled 1/2 to unbias the truncation below.
    arg += 1 << (shift - 1)
    if arg > U64_MAX:
        raise ContractError(f"carry_ilog2 product overflows 64 bits: {arg:#x}")
    result = ilog2(arg) - shift
    carry.carry = arg >> result
    return result


def fixed_log2(x: int, bits: int) -> int:
    """Returns log2(x) * 2^bits rounded to nearest, by repeated squaring.

    fixed_log2(750, 20) == 10014684 and fixed_log2(2000, 20) == 11498458.
    """
    whole = ilog2(x)
    precision = 64
    one = 1 << precision
    # Mantissa in [1, 2), as a fixed-point number.
    y = (x << precision) >> whole
    # One guard bit below the requested resolution, for rounding.
    result = whole << (bits + 1)
    for i in range(bits + 1):
        y = (y * y) >> precision
        if y >= 2 * one:
            y >>= 1
            result |= 1 << (bits - i)
    return (result + 1) >> 1


def rescale_on_shift_change(
    ewma: UpscaledEwma, carry: CarryState, old_shift: int, new_shift: int
) -> None:
    """Moves an EWMA and the carry beside it from one upscaling to another.

    Shrinking the shift drops low bits of both values for good.
    """
    for shift in (old_shift, new_shift):
        if not 1 <= shift <= MAX_SHIFT:
            raise ContractError(f"shift {shift} outside [1, {MAX_SHIFT}]")
    ewma.value = _shift_by(ewma.value, new_shift - old_shift)
    ewma.gain_shift = new_shift
    carry.rescale(old_shift, new_shift)


def _shift_by(value: int, delta: int) -> int:
    if delta > 0:
        return value << delta
    if delta < 0:
        return value >> -delta
    return value
