"""Deterministic logistic-map sequences used as watermark signals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Control-parameter band where the map behaves chaotically; outside it the
# orbit collapses into short cycles and loses key sensitivity.
CHAOTIC_R_MIN = 3.57
CHAOTIC_R_MAX = 4.0

# Widest band a recovery search box may use; the map stays bounded on (0, 4].
PERMISSIVE_R_MIN = 0.0
PERMISSIVE_R_MAX = 4.0


class InvalidParamsError(ValueError):
    """A parameter set violated one or more generation constraints."""

    def __init__(self, violations):
        self.violations = tuple(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class ChaoticParams:
    """Secret key for one watermark: map parameters plus signal length.

    epsilon is the embedding strength in weight units. length is the number
    of sequence elements, normally the element count of the marked layer;
    0 means "not fixed yet" (embedding fills it in).
    """

    r: float
    x0: float
    epsilon: float
    length: int = 0


def validate_params(params: ChaoticParams, chaotic_band: bool = True) -> list[str]:
    """Check every constraint and return a description of each violation.

    An empty list means the parameters are valid. chaotic_band=False relaxes
    the control parameter to (0, 4], which is only appropriate when bounding
    a recovery search box, never when generating a key.
    """
    violations = []
    # NaN fails every comparison below, so it is reported on each field too.
    if not params.x0 > 0.0 or not params.x0 < 1.0:
        violations.append(f"x0 must lie strictly inside (0, 1), got {params.x0!r}")
    if chaotic_band:
        if not (CHAOTIC_R_MIN <= params.r <= CHAOTIC_R_MAX):
            violations.append(
                f"r must lie in the chaotic band [{CHAOTIC_R_MIN}, {CHAOTIC_R_MAX}], "
                f"got {params.r!r}"
            )
    elif not (PERMISSIVE_R_MIN < params.r <= PERMISSIVE_R_MAX):
        violations.append(f"r must lie in (0, {PERMISSIVE_R_MAX}], got {params.r!r}")
    if not params.epsilon > 0.0:
        violations.append(f"epsilon must be positive, got {params.epsilon!r}")
    if params.length < 0:
        violations.append(f"length must be non-negative, got {params.length!r}")
    return violations


def require_valid(params: ChaoticParams, chaotic_band: bool = True) -> None:
    violations = validate_params(params, chaotic_band=chaotic_band)
    if violations:
        raise InvalidParamsError(violations)


def generate_chaotic_sequence(params: ChaoticParams) -> np.ndarray:
    """Iterate x <- r*x*(1-x) from x0 and return the visited points.

    The seed x0 itself is not emitted: element 0 is the first iterate. All
    arithmetic is 64-bit; a given key always reproduces the same sequence
    bit for bit.
    """
    require_valid(params)
    out = np.empty(params.length, dtype=np.float64)
    r = float(params.r)
    x = float(params.x0)
    for i in range(params.length):
        x = (r * x) * (1.0 - x)
        out[i] = x
    return out


def generate_batch(r_values, x0_values, length: int) -> np.ndarray:
    """Generate one sequence per (r, x0) pair, as rows of an (n, length) array.

    Accepts the permissive r band (search-box candidates); row i is bit-equal
    to generate_chaotic_sequence for the same scalar key because the update
    uses the same operation order.
    """
    r = np.asarray(r_values, dtype=np.float64)
    x0 = np.asarray(x0_values, dtype=np.float64)
    if r.ndim != 1 or x0.shape != r.shape:
        raise ValueError("r_values and x0_values must be 1-D and equally long")
    violations = []
    if not (np.all(r > PERMISSIVE_R_MIN) and np.all(r <= PERMISSIVE_R_MAX)):
        violations.append(f"every r must lie in (0, {PERMISSIVE_R_MAX}]")
    if not (np.all(x0 > 0.0) and np.all(x0 < 1.0)):
        violations.append("every x0 must lie strictly inside (0, 1)")
    if length < 0:
        violations.append(f"length must be non-negative, got {length!r}")
    if violations:
        raise InvalidParamsError(violations)
    out = np.empty((r.size, length), dtype=np.float64)
    x = x0.copy()
    for i in range(length):
        x = (r * x) * (1.0 - x)
        out[:, i] = x
    return out
