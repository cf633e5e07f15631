"""Fixed-length face descriptors.

A signature is a 32x32 luminance template: the crop is resampled in real
arithmetic (no 8-bit rounding, so brightness and contrast shifts cancel
exactly), centered to zero mean, and scaled to unit L2 norm. Matching is a
dot product against a similarity floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import GrayImage, resample_bilinear

SIDE = 32
LENGTH = SIDE * SIDE
DEFAULT_TAU = 0.9

_NORM_FLOOR = 1e-9
_INVARIANT_TOL = 1e-6
_SNAP = 1e-12


class DegenerateCropError(ValueError):
    """The crop carries no usable texture (flat after centering)."""


@dataclass(frozen=True)
class Signature:
    """Zero-mean, unit-norm 1024-vector, row-major over the 32x32 template."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.shape != (LENGTH,):
            raise ValueError(f"signature must hold {LENGTH} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("signature values must be finite")
        if abs(float(v.mean())) > _INVARIANT_TOL:
            raise ValueError("signature mean is off zero")
        if abs(float(np.linalg.norm(v)) - 1.0) > _INVARIANT_TOL:
            raise ValueError("signature norm is off one")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    def to_wire(self) -> list[float]:
        return [float(x) for x in self.vector]

    @classmethod
    def from_wire(cls, values) -> "Signature":
        return cls(np.asarray(values, dtype=np.float64))

    def __eq__(self, other):
        return isinstance(other, Signature) and np.array_equal(self.vector, other.vector)

    def __hash__(self):
        return hash(self.vector.tobytes())


def signature(crop: GrayImage) -> Signature:
    """Descriptor for a face crop of at least 8x8 pixels."""
    if crop.width < 8 or crop.height < 8:
        raise ValueError(f"crop must be at least 8x8, got {crop.width}x{crop.height}")
    flat = resample_bilinear(crop, SIDE, SIDE).ravel()
    centered = flat - flat.mean()
    norm = float(np.linalg.norm(centered))
    if norm < _NORM_FLOOR:
        raise DegenerateCropError("crop is flat; no signature possible")
    return Signature(centered / norm)


def similarity(a: Signature, b: Signature) -> float:
    """Dot product in [-1, 1]; exact at the endpoints for identical or
    opposite vectors (float residue within 1e-12 snaps to the endpoint)."""
    s = float(np.dot(a.vector, b.vector))
    if abs(s - 1.0) < _SNAP:
        return 1.0
    if abs(s + 1.0) < _SNAP:
        return -1.0
    return min(1.0, max(-1.0, s))


def matches(a: Signature, b: Signature, tau: float = DEFAULT_TAU) -> bool:
    """True when the pair clears the similarity floor tau."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    return similarity(a, b) >= tau
