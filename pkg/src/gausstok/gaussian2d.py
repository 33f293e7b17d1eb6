"""2D Gaussian primitive: covariance construction, kernel evaluation, analytic derivatives.

This module is the scalar float64 reference for all Gaussian math. The batched
production kernels in `splat` repeat the same formulas vectorized in torch and
are tested against this implementation.

Conventions: positions live in normalized image coordinates [0,1]^2, scales are
standard deviations in the same units, rotation is the angle of the first
principal axis, reduced to [0, 2*pi).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Floor added to softplus so constructed scales are bounded away from zero.
SCALE_EPS = 1e-4
TWO_PI = 2.0 * np.pi


def softplus(x):
    """log(1 + exp(x)), stable for large |x|."""
    return np.logaddexp(0.0, x)


def scales_from_raw(raw) -> np.ndarray:
    """Map unconstrained scale logits to strictly positive scales: softplus(raw) + eps."""
    return softplus(np.asarray(raw, dtype=np.float64)) + SCALE_EPS


def rotation_from_raw(sin_raw: float, cos_raw: float) -> float:
    """Map a (sin-like, cos-like) raw pair to an angle in [0, 2*pi)."""
    return float(np.arctan2(sin_raw, cos_raw) % TWO_PI)


@dataclass(frozen=True)
class Covariance2:
    """2x2 symmetric positive-definite matrix with cached inverse and determinant."""

    matrix: np.ndarray
    inverse: np.ndarray
    det: float


@dataclass(frozen=True)
class Gaussian2D:
    """One splatting primitive.

    Invariants: scales strictly positive, opacity in (0, 1], rotation stored
    reduced modulo 2*pi. Enforced at construction.
    """

    position: np.ndarray  # (2,)
    rotation: float       # radians in [0, 2*pi)
    scales: np.ndarray    # (2,) standard deviations
    opacity: float        # (0, 1]
    feature: np.ndarray   # (d,)

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "scales", np.asarray(self.scales, dtype=np.float64))
        object.__setattr__(self, "feature", np.asarray(self.feature, dtype=np.float64))
        if self.position.shape != (2,):
            raise ValueError(f"position must be a 2-vector, got shape {self.position.shape}")
        if self.scales.shape != (2,):
            raise ValueError(f"scales must be a 2-vector, got shape {self.scales.shape}")
        if not (self.scales > 0).all():
            raise ValueError(f"scales must be strictly positive, got {self.scales}")
        if not (0.0 < self.opacity <= 1.0):
            raise ValueError(f"opacity must be in (0, 1], got {self.opacity}")
        object.__setattr__(self, "rotation", float(self.rotation) % TWO_PI)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def build_covariance(rotation: float, scales) -> Covariance2:
    """Sigma = R(theta) diag(s^2) R(theta)^T with closed-form 2x2 inverse.

    The inverse is computed by adjugate/determinant, which is exact for 2x2 and
    avoids a general decomposition.
    """
    scales = np.asarray(scales, dtype=np.float64)
    if scales.shape != (2,) or not (scales > 0).all():
        raise ValueError(f"scales must be a strictly positive 2-vector, got {scales}")
    r = rotation_matrix(rotation)
    matrix = r @ np.diag(scales**2) @ r.T
    det = matrix[0, 0] * matrix[1, 1] - matrix[0, 1] * matrix[1, 0]
    inverse = np.array(
        [[matrix[1, 1], -matrix[0, 1]], [-matrix[1, 0], matrix[0, 0]]], dtype=np.float64
    ) / det
    return Covariance2(matrix=matrix, inverse=inverse, det=float(det))


def _local_frame(g: Gaussian2D, x) -> tuple[np.ndarray, float, float]:
    """Offset of x from the center expressed in the Gaussian's principal frame."""
    d = np.asarray(x, dtype=np.float64) - g.position
    c, s = np.cos(g.rotation), np.sin(g.rotation)
    u0 = c * d[0] + s * d[1]
    u1 = -s * d[0] + c * d[1]
    return d, u0, u1


def eval_gaussian(g: Gaussian2D, x) -> float:
    """exp(-1/2 (x-p)^T Sigma^{-1} (x-p)), in (0, 1], equal to 1 iff x == p."""
    _, u0, u1 = _local_frame(g, x)
    q = (u0 / g.scales[0]) ** 2 + (u1 / g.scales[1]) ** 2
    return float(np.exp(-0.5 * q))


def eval_gaussian_grad(g: Gaussian2D, x) -> tuple[np.ndarray, float, np.ndarray]:
    """Analytic gradients of eval_gaussian at x.

    Returns (dG/dposition (2,), dG/drotation, dG/dscales (2,)). Derivation: with
    u = R^T (x - p) the exponent is E = -1/2 (u0^2/s0^2 + u1^2/s1^2), so

        dG/dp      = G * Sigma^{-1} (x - p) = G * R (u0/s0^2, u1/s1^2)
        dG/dtheta  = G * u0 u1 (1/s1^2 - 1/s0^2)
        dG/dscales = G * (u0^2/s0^3, u1^2/s1^3)
    """
    _, u0, u1 = _local_frame(g, x)
    s0, s1 = g.scales
    inv_s0sq = 1.0 / (s0 * s0)
    inv_s1sq = 1.0 / (s1 * s1)
    value = np.exp(-0.5 * (u0 * u0 * inv_s0sq + u1 * u1 * inv_s1sq))

    c, s = np.cos(g.rotation), np.sin(g.rotation)
    v0 = u0 * inv_s0sq
    v1 = u1 * inv_s1sq
    dpos = value * np.array([c * v0 - s * v1, s * v0 + c * v1])
    drot = value * u0 * u1 * (inv_s1sq - inv_s0sq)
    dscales = value * np.array([u0 * u0 * inv_s0sq / s0, u1 * u1 * inv_s1sq / s1])
    return dpos, float(drot), dscales
