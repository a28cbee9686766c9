"""
Spherical-harmonics machinery: direction grids, rigid-sphere radial functions,
steering vectors, HRTF interpolation and head-rotation geometry.

Conventions:
  - theta is measured from +z downwards, phi from +x towards +y.
  - Radial functions use the spherical Hankel function of the second kind, which
    matches numpy's FFT sign: a delay tau multiplies a spectrum by exp(-2j*pi*f*tau),
    and a mic closer to the source gets a phase lead.
  - Complex SH with Condon-Shortley phase, columns ordered (0,0),(1,-1),(1,0),(1,1),...
"""
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from . import config

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi


class UnderdeterminedFitError(ValueError):
    """SH fit requested with fewer grid points than coefficients."""


@dataclass(frozen=True)
class Direction:
    """Plane-wave direction: theta (elevation from +z, rad), phi (azimuth, rad)."""

    theta: float
    phi: float

    def __post_init__(self):
        theta = float(self.theta)
        phi = float(self.phi)
        if not (math.isfinite(theta) and math.isfinite(phi)):
            raise ValueError(f"Direction angles must be finite, got theta={theta}, phi={phi}")
        if theta < -1e-9 or theta > np.pi + 1e-9:
            raise ValueError(f"theta must lie in [0, pi], got {theta}")
        phi = phi % TWO_PI
        if phi >= TWO_PI:
            phi = 0.0
        object.__setattr__(self, "theta", min(max(theta, 0.0), np.pi))
        object.__setattr__(self, "phi", phi)

    @classmethod
    def from_degrees(cls, elevation_deg: float, azimuth_deg: float) -> "Direction":
        return cls(math.radians(elevation_deg), math.radians(azimuth_deg))

    @property
    def elevation_deg(self) -> float:
        return math.degrees(self.theta)

    @property
    def azimuth_deg(self) -> float:
        return math.degrees(self.phi)

    def unit_vector(self) -> np.ndarray:
        st = math.sin(self.theta)
        return np.array([st * math.cos(self.phi), st * math.sin(self.phi), math.cos(self.theta)])


def angles(dirs: Sequence[Direction]) -> Tuple[np.ndarray, np.ndarray]:
    """Return (theta, phi) arrays for a list of directions."""
    theta = np.array([d.theta for d in dirs], dtype=float)
    phi = np.array([d.phi for d in dirs], dtype=float)
    return theta, phi


def unit_vectors(dirs: Sequence[Direction]) -> np.ndarray:
    theta, phi = angles(dirs)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1).reshape(-1, 3)


def vector_angles(vecs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(theta, phi) of the rows of an [n, 3] array of nonzero vectors."""
    vecs = np.asarray(vecs, dtype=float).reshape(-1, 3)
    norms = np.linalg.norm(vecs, axis=1)
    theta = np.arccos(np.clip(vecs[:, 2] / norms, -1.0, 1.0))
    phi = np.arctan2(vecs[:, 1], vecs[:, 0]) % TWO_PI
    return theta, phi


def rotate_vectors(vecs: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate [n, 3] vectors about +z (same sense as rotate_azimuth)."""
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
    return np.asarray(vecs, dtype=float).reshape(-1, 3) @ rot.T


def direction_from_vector(vec: np.ndarray) -> Direction:
    x, y, z = (float(v) for v in vec)
    norm = math.sqrt(x * x + y * y + z * z)
    if norm == 0.0:
        raise ValueError("Cannot take the direction of a zero vector")
    return Direction(math.acos(max(-1.0, min(1.0, z / norm))), math.atan2(y, x))


def rotate_azimuth(dirs: Sequence[Direction], angle_deg: float) -> List[Direction]:
    """Rotate directions about +z; theta is unchanged."""
    delta = math.radians(angle_deg)
    return [Direction(d.theta, d.phi + delta) for d in dirs]


# ================= SPHERICAL HARMONICS =================

def _sh_matrix(order: int, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    out = np.empty((theta.size, (order + 1) ** 2), dtype=complex)
    idx = 0
    for n in range(order + 1):
        for m in range(-n, n + 1):
            out[:, idx] = special.sph_harm_y(n, m, theta, phi)
            idx += 1
    return out


def sph_harmonics(order: int, dirs: Sequence[Direction]) -> np.ndarray:
    """Complex SH matrix of shape (len(dirs), (order+1)**2)."""
    if order < 0:
        raise ValueError(f"SH order must be >= 0, got {order}")
    theta, phi = angles(dirs)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(phi))):
        raise ValueError("SH evaluation needs finite angles")
    return _sh_matrix(order, theta, phi)


def nearly_uniform_grid(num_points: int = config.GRID_SIZE) -> Tuple[List[Direction], np.ndarray]:
    """Fibonacci-spiral grid with equal-area quadrature weights summing to 4*pi."""
    if num_points < 1:
        raise ValueError(f"Grid needs at least one point, got {num_points}")
    i = np.arange(num_points)
    z = 1.0 - 2.0 * (i + 0.5) / num_points
    theta = np.arccos(np.clip(z, -1.0, 1.0))
    phi = (np.pi * (3.0 - np.sqrt(5.0)) * i) % TWO_PI
    weights = np.full(num_points, 4.0 * np.pi / num_points)
    weights[-1] = 4.0 * np.pi - weights[:-1].sum()
    return [Direction(t, p) for t, p in zip(theta, phi)], weights


# ================= RIGID SPHERE =================

def spherical_hankel2(n, z, derivative: bool = False):
    """Spherical Hankel function of the second kind (or its derivative)."""
    with np.errstate(invalid="ignore", over="ignore"):
        yn = special.spherical_yn(n, z, derivative)
    return special.spherical_jn(n, z, derivative) - 1j * yn


def _i_power(orders: np.ndarray) -> np.ndarray:
    return np.array([1.0, 1j, -1.0, -1j])[np.asarray(orders) % 4]


def _surface_radial(orders: np.ndarray, ka: np.ndarray) -> np.ndarray:
    """j_n - (j_n'/h_n') h_n at r == a through the Wronskian: -i / ((ka)^2 h_n'(ka)).

    Broadcasts orders against ka; finite for every order (vanishes when h_n' overflows).
    """
    orders = np.asarray(orders)
    ka = np.asarray(ka, dtype=float)
    safe_ka = np.where(ka > 0, ka, 1.0)
    with np.errstate(all="ignore"):
        dh = spherical_hankel2(orders, safe_ka, derivative=True)
        radial = np.where(np.isfinite(dh) & (dh != 0), -1j / (safe_ka ** 2 * dh), 0.0)
    dc = np.where(orders == 0, 1.0, 0.0)
    return np.where(ka > 0, radial, dc)


def rigid_sphere_radial(n: int, k: float, r: float, a: float) -> complex:
    """Mode strength b_n(k, r, a) of a unit plane wave on a rigid sphere of radius a."""
    if n < 0:
        raise ValueError(f"Order must be >= 0, got {n}")
    if not (a > 0):
        raise ValueError(f"Sphere radius must be positive, got {a}")
    if r < a:
        raise ValueError(f"Evaluation radius {r} m lies inside the rigid sphere (a={a} m)")
    if not (k >= 0 and math.isfinite(k)):
        raise ValueError(f"Wavenumber must be finite and >= 0, got {k}")
    prefix = 4.0 * np.pi * _i_power(n)
    if k == 0.0:
        return complex(prefix if n == 0 else 0.0)
    ka, kr = k * a, k * r
    if r == a:
        return complex(prefix * _surface_radial(np.array(n), np.array(ka)))
    with np.errstate(all="ignore"):
        jn = special.spherical_jn(n, kr)
        ratio = special.spherical_jn(n, ka, True) / spherical_hankel2(n, ka, True)
        radial = jn - ratio * spherical_hankel2(n, kr)
    if not np.isfinite(radial):
        # scattering term underflows long before the Hankel functions overflow
        radial = jn
    return complex(prefix * radial)


def steering_order(k: float, radius: float) -> int:
    """SH truncation order for a plane wave on a sphere of the given radius."""
    return max(config.STEERING_MIN_ORDER, math.ceil(math.e * k * radius / 2.0) + config.STEERING_ORDER_MARGIN)


def modal_strengths(
    freqs: np.ndarray,
    radius: float,
    n_max: int,
    order: Optional[int] = None,
    c: float = config.SPEED_OF_SOUND,
) -> np.ndarray:
    """i^n * radial term on the sphere surface, shape (F, n_max+1), zeroed above each bin's order.

    Multiplied by (2n+1) P_n(cos gamma) and summed over n this gives the pressure
    relative to a unit plane wave at the sphere centre.
    """
    freqs = np.asarray(freqs, dtype=float)
    k = TWO_PI * freqs / c
    orders = np.arange(n_max + 1)
    out = _i_power(orders)[None, :] * _surface_radial(orders[None, :], (k * radius)[:, None])
    limits = np.array([order if order is not None else steering_order(kf, radius) for kf in k])
    out[orders[None, :] > limits[:, None]] = 0.0
    return out


def legendre_kernel(points: np.ndarray, dirs: np.ndarray, n_max: int) -> np.ndarray:
    """(2n+1) P_n(cos gamma) between unit vectors, shape (n_max+1, P, L)."""
    cos_gamma = np.clip(points @ dirs.T, -1.0, 1.0)
    orders = np.arange(n_max + 1)
    return (2 * orders + 1)[:, None, None] * special.eval_legendre(orders[:, None, None], cos_gamma[None])


def max_order_for(freqs: np.ndarray, radius: float, order: Optional[int] = None,
                  c: float = config.SPEED_OF_SOUND) -> int:
    if order is not None:
        return int(order)
    f_top = float(np.max(freqs)) if np.size(freqs) else 0.0
    return steering_order(TWO_PI * f_top / c, radius)


def sphere_response(
    points: Sequence[Direction],
    radius: float,
    dirs: Sequence[Direction],
    freqs,
    order: Optional[int] = None,
    c: float = config.SPEED_OF_SOUND,
) -> np.ndarray:
    """Pressure at surface points of a rigid sphere for unit plane waves from dirs, (F, P, L)."""
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    if freqs.size and (np.any(freqs < 0) or not np.all(np.isfinite(freqs))):
        raise ValueError("Frequencies must be finite and >= 0")
    n_max = max_order_for(freqs, radius, order, c)
    kernel = legendre_kernel(unit_vectors(points), unit_vectors(dirs), n_max)
    strengths = modal_strengths(freqs, radius, n_max, order, c)
    values = np.einsum("fn,npl->fpl", strengths, kernel)
    # unit plane wave at DC is exactly 1 everywhere
    values[freqs == 0.0] = 1.0
    return values


# ================= ARRAY =================

@dataclass(frozen=True)
class ArrayGeometry:
    """Microphones on the surface of a rigid sphere, rotated relative to the head."""

    sphere_radius: float
    mic_directions: Tuple[Direction, ...]
    rotation_deg: float = 0.0

    def __post_init__(self):
        if not (self.sphere_radius > 0):
            raise ValueError(f"Sphere radius must be positive, got {self.sphere_radius}")
        if len(self.mic_directions) < 1:
            raise ValueError("Array needs at least one microphone")
        object.__setattr__(self, "mic_directions", tuple(self.mic_directions))

    @classmethod
    def semicircular(
        cls,
        num_mics: int = config.NUM_MICS,
        radius: float = config.ARRAY_RADIUS,
        rotation_deg: float = 0.0,
    ) -> "ArrayGeometry":
        """Horizontal semicircle from +90 deg (left) to -90 deg (right), equally spaced."""
        if num_mics < 1:
            raise ValueError(f"Array needs at least one microphone, got {num_mics}")
        if num_mics == 1:
            phis = [0.0]
        else:
            phis = [np.pi / 2 - np.pi * m / (num_mics - 1) for m in range(num_mics)]
        return cls(radius, tuple(Direction(np.pi / 2, p) for p in phis), rotation_deg)

    @property
    def num_mics(self) -> int:
        return len(self.mic_directions)

    def head_frame_mics(self) -> List[Direction]:
        return rotate_azimuth(self.mic_directions, self.rotation_deg)

    def with_rotation(self, rotation_deg: float) -> "ArrayGeometry":
        return dataclasses.replace(self, rotation_deg=rotation_deg)


@dataclass(frozen=True)
class SteeringMatrix:
    """Per-frequency M x L steering matrices for a fixed list of plane-wave directions."""

    freqs: np.ndarray
    values: np.ndarray
    directions: Tuple[Direction, ...]

    def __post_init__(self):
        freqs = np.atleast_1d(np.asarray(self.freqs, dtype=float))
        values = np.asarray(self.values)
        if values.ndim != 3 or values.shape[0] != freqs.size or values.shape[2] != len(self.directions):
            raise ValueError(
                f"Steering values must be (F, M, L) = ({freqs.size}, M, {len(self.directions)}), got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("Steering matrix has non-finite entries")
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "directions", tuple(self.directions))

    @property
    def num_mics(self) -> int:
        return self.values.shape[1]

    @property
    def num_directions(self) -> int:
        return self.values.shape[2]


def steering_matrix(
    geom: ArrayGeometry,
    dirs: Sequence[Direction],
    freqs,
    order: Optional[int] = None,
    c: float = config.SPEED_OF_SOUND,
) -> SteeringMatrix:
    """Steering vectors of the head-frame array for head-frame directions, all frequencies."""
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    if np.any(freqs < 0):
        raise ValueError(f"Frequencies must be >= 0, got min {freqs.min()} Hz")
    values = sphere_response(geom.head_frame_mics(), geom.sphere_radius, dirs, freqs, order, c)
    return SteeringMatrix(freqs, values, tuple(dirs))


def steering_vector(
    geom: ArrayGeometry,
    direction: Direction,
    f: float,
    order: Optional[int] = None,
) -> np.ndarray:
    """Complex M-vector for one plane wave at one frequency."""
    if f < 0:
        raise ValueError(f"Frequency must be >= 0, got {f} Hz")
    return steering_matrix(geom, [direction], [f], order).values[0, :, 0]


# ================= HRTF =================

@dataclass(frozen=True)
class EarModel:
    """Point ears on a rigid spherical head."""

    radius: float
    left: Direction
    right: Direction

    @classmethod
    def symmetric(cls, radius: float = config.HEAD_RADIUS, offset_deg: float = 0.0) -> "EarModel":
        return cls(
            radius,
            Direction.from_degrees(90.0, 90.0 + offset_deg),
            Direction.from_degrees(90.0, -90.0 - offset_deg),
        )

    def response(self, dirs: Sequence[Direction], freqs) -> np.ndarray:
        """(F, len(dirs), 2) left/right transfer functions."""
        values = sphere_response([self.left, self.right], self.radius, dirs, freqs)
        return np.transpose(values, (0, 2, 1))


@dataclass(eq=False)
class HrtfSet:
    """Direction-indexed left/right HRIRs with SH-domain interpolation."""

    grid: Tuple[Direction, ...]
    hrirs: np.ndarray  # (Q, 2, taps)
    fs: int
    sh_order: int = config.HRTF_SH_ORDER
    source: str = "measured"
    lead_samples: int = 0
    ear_model: Optional[EarModel] = None
    _cache: Dict[tuple, np.ndarray] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.grid = tuple(self.grid)
        self.hrirs = np.asarray(self.hrirs, dtype=float)
        if self.hrirs.ndim != 3 or self.hrirs.shape[1] != 2:
            raise ValueError(f"HRIRs must be shaped (directions, 2, taps), got {self.hrirs.shape}")
        if self.hrirs.shape[0] != len(self.grid):
            raise ValueError(f"{self.hrirs.shape[0]} HRIR pairs for {len(self.grid)} grid directions")
        if self.sh_order < 0:
            raise ValueError(f"SH order must be >= 0, got {self.sh_order}")
        if self.source not in ("measured", "analytic-sphere"):
            raise ValueError(f"Unknown HRTF source '{self.source}'")
        if self.source == "analytic-sphere" and self.ear_model is None:
            raise ValueError("An analytic-sphere HRTF set needs its ear model")

    @property
    def num_taps(self) -> int:
        return self.hrirs.shape[2]

    def grid_response(self, freqs) -> np.ndarray:
        """Transfer functions on the measurement grid, (F, Q, 2)."""
        freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
        if self.ear_model is not None:
            return self.ear_model.response(self.grid, freqs)
        n = np.arange(self.num_taps) - self.lead_samples
        kernel = np.exp(-2j * np.pi * np.outer(freqs, n) / self.fs)
        return np.einsum("ft,qet->fqe", kernel, self.hrirs)

    def fit_operator(self, order: int) -> np.ndarray:
        """Regularized pseudo-inverse of the grid SH matrix, ((order+1)^2, Q)."""
        key = ("fit", order)
        if key not in self._cache:
            n_coef = (order + 1) ** 2
            if len(self.grid) < n_coef:
                raise UnderdeterminedFitError(
                    f"SH order {order} needs at least {n_coef} grid points, the set has {len(self.grid)}"
                )
            ymat = sph_harmonics(order, self.grid)
            u, s, vh = np.linalg.svd(ymat, full_matrices=False)
            if s[-1] <= 0 or s[0] / s[-1] > config.HRTF_FIT_BORDERLINE_COND:
                lam = config.HRTF_FIT_REGULARIZATION * s[0] ** 2
                logger.debug("Borderline SH fit at order %d, Tikhonov lambda=%.3g", order, lam)
                gains = s / (s ** 2 + lam)
            else:
                gains = 1.0 / s
            self._cache[key] = (vh.conj().T * gains) @ u.conj().T
        return self._cache[key]

    def sh_coefficients(self, freqs, order: Optional[int] = None) -> np.ndarray:
        """SH coefficients of both ears per frequency, (F, (order+1)^2, 2)."""
        order = self.sh_order if order is None else order
        freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
        key = ("coef", order, freqs.tobytes())
        if key not in self._cache:
            operator = self.fit_operator(order)
            self._cache[key] = np.einsum("kq,fqe->fke", operator, self.grid_response(freqs))
        return self._cache[key]


def hrtf_response(hrtf: HrtfSet, targets: Sequence[Direction], freqs, order: Optional[int] = None) -> np.ndarray:
    """SH-interpolated HRTFs at target directions, (F, len(targets), 2)."""
    order = hrtf.sh_order if order is None else order
    coefs = hrtf.sh_coefficients(freqs, order)
    return np.einsum("tk,fke->fte", sph_harmonics(order, targets), coefs)


def hrtf_interpolate(hrtf: HrtfSet, targets: Sequence[Direction], f: float) -> np.ndarray:
    """(len(targets), 2) left/right HRTF values at one frequency."""
    if f < 0:
        raise ValueError(f"Frequency must be >= 0, got {f} Hz")
    return hrtf_response(hrtf, targets, [f])[0]
