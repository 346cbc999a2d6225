"""Radiation patterns, array geometry, precoding and steering vectors.

Spherical convention used everywhere: theta is the zenith angle from the
local +z axis, phi the azimuth from +x, and the unit direction is
``k(theta, phi) = (sin t cos p, sin t sin p, cos t)``. Patterns return the
complex pair ``(C_theta, C_phi)`` on the local (theta-hat, phi-hat) basis.
All evaluators are pure and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def direction_from_angles(theta, phi) -> np.ndarray:
    """Unit direction(s) for zenith angle theta and azimuth phi (radians)."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def angles_from_direction(k: np.ndarray):
    """Inverse of :func:`direction_from_angles`; phi in (-pi, pi]."""
    k = np.asarray(k, dtype=np.float64)
    theta = np.arccos(np.clip(k[..., 2], -1.0, 1.0))
    phi = np.arctan2(k[..., 1], k[..., 0])
    return theta, phi


def _check_angles(theta, phi):
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if np.any(theta < 0.0) or np.any(theta > np.pi):
        raise ValueError("theta out of range [0, pi]")
    if np.any(phi < -np.pi) or np.any(phi > np.pi):
        raise ValueError("phi out of range [-pi, pi]")
    return theta, phi


class AntennaPattern:
    """Base class: maps (theta, phi) to the complex pair (C_theta, C_phi)."""

    def eval(self, theta, phi):
        raise NotImplementedError

    def __call__(self, theta, phi):
        theta, phi = _check_angles(theta, phi)
        c_th, c_ph = self.eval(theta, phi)
        return np.asarray(c_th, dtype=np.complex128), np.asarray(c_ph, dtype=np.complex128)


class IsotropicPattern(AntennaPattern):
    """Vertically polarized isotropic element: C_theta = 1, C_phi = 0."""

    def eval(self, theta, phi):
        one = np.ones(np.broadcast(theta, phi).shape)
        return one, np.zeros_like(one)


class CosinePowerPattern(AntennaPattern):
    """Directional horn-like element, C_theta = K cos^n(theta) on the front
    hemisphere, zero behind. K normalizes the sphere integral of |C|^2 to 4*pi
    so the boresight power gain equals the directivity 2(2n+1).
    """

    def __init__(self, exponent: float = 4.0):
        if exponent < 0:
            raise ValueError("exponent must be >= 0")
        self.exponent = float(exponent)
        self.scale = np.sqrt(2.0 * (2.0 * self.exponent + 1.0))

    @classmethod
    def from_hpbw(cls, hpbw_deg: float) -> "CosinePowerPattern":
        """Pick the exponent so the power pattern drops 3 dB at hpbw/2."""
        half = np.radians(hpbw_deg) / 2.0
        n = np.log(0.5) / (2.0 * np.log(np.cos(half)))
        return cls(exponent=n)

    def eval(self, theta, phi):
        theta = np.asarray(theta, dtype=np.float64)
        front = np.cos(theta) > 0.0
        c = np.where(front, self.scale * np.cos(theta) ** self.exponent, 0.0)
        return c, np.zeros_like(c)


class DipolePattern(AntennaPattern):
    """Half-wave dipole along z: peak C_theta at theta = pi/2, C_phi = 0."""

    _NORM = 1.2808792  # sqrt(1.643) so the sphere integral of |C|^2 is 4*pi

    def eval(self, theta, phi):
        theta = np.asarray(theta, dtype=np.float64)
        st = np.sin(theta)
        safe = np.where(st < 1e-12, 1.0, st)
        c = np.where(st < 1e-12, 0.0, self._NORM * np.cos(0.5 * np.pi * np.cos(theta)) / safe)
        return c, np.zeros_like(c)


class TabulatedPattern(AntennaPattern):
    """Pattern sampled on a regular (theta, phi) grid, bilinearly interpolated.

    CSV rows: theta_deg, phi_deg, ReC_theta, ImC_theta, ReC_phi, ImC_phi.
    The grid must be complete (every theta x phi combination present).
    """

    def __init__(self, theta_deg: np.ndarray, phi_deg: np.ndarray,
                 c_theta: np.ndarray, c_phi: np.ndarray):
        self.theta_grid = np.radians(np.asarray(theta_deg, dtype=np.float64))
        self.phi_grid = np.radians(np.asarray(phi_deg, dtype=np.float64))
        self.c_theta = np.asarray(c_theta, dtype=np.complex128)
        self.c_phi = np.asarray(c_phi, dtype=np.complex128)
        if self.c_theta.shape != (len(self.theta_grid), len(self.phi_grid)):
            raise ValueError("pattern table shape mismatch")

    @classmethod
    def from_csv(cls, path: str | Path) -> "TabulatedPattern":
        rows = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        th = np.unique(rows[:, 0])
        ph = np.unique(rows[:, 1])
        if len(th) * len(ph) != len(rows):
            raise ValueError(f"{path}: incomplete (theta, phi) grid")
        order = np.lexsort((rows[:, 1], rows[:, 0]))
        rows = rows[order]
        cth = (rows[:, 2] + 1j * rows[:, 3]).reshape(len(th), len(ph))
        cph = (rows[:, 4] + 1j * rows[:, 5]).reshape(len(th), len(ph))
        return cls(th, ph, cth, cph)

    def eval(self, theta, phi):
        theta = np.asarray(theta, dtype=np.float64)
        phi = np.asarray(phi, dtype=np.float64)

        def interp(grid_vals):
            it = np.clip(np.searchsorted(self.theta_grid, theta) - 1, 0, len(self.theta_grid) - 2)
            ip = np.clip(np.searchsorted(self.phi_grid, phi) - 1, 0, len(self.phi_grid) - 2)
            t0, t1 = self.theta_grid[it], self.theta_grid[it + 1]
            p0, p1 = self.phi_grid[ip], self.phi_grid[ip + 1]
            wt = np.clip((theta - t0) / np.where(t1 > t0, t1 - t0, 1.0), 0.0, 1.0)
            wp = np.clip((phi - p0) / np.where(p1 > p0, p1 - p0, 1.0), 0.0, 1.0)
            return ((1 - wt) * (1 - wp) * grid_vals[it, ip]
                    + (1 - wt) * wp * grid_vals[it, ip + 1]
                    + wt * (1 - wp) * grid_vals[it + 1, ip]
                    + wt * wp * grid_vals[it + 1, ip + 1])

        return interp(self.c_theta), interp(self.c_phi)


def make_pattern(spec: str | dict) -> AntennaPattern:
    """Pattern factory used by config files."""
    if isinstance(spec, str):
        spec = {"type": spec}
    kind = spec["type"]
    if kind == "isotropic":
        return IsotropicPattern()
    if kind == "cosine_power":
        if "hpbw_deg" in spec:
            return CosinePowerPattern.from_hpbw(spec["hpbw_deg"])
        return CosinePowerPattern(spec.get("exponent", 4.0))
    if kind == "dipole":
        return DipolePattern()
    if kind == "tabulated":
        return TabulatedPattern.from_csv(spec["path"])
    raise ValueError(f"unknown pattern type {kind!r}")


# ---------------------------------------------------------------------------
# Arrays


@dataclass(frozen=True)
class ArrayGeometry:
    """Element offsets (meters, local frame) and the carrier wavelength."""

    element_offsets: np.ndarray  # (M, 3)
    wavelength: float

    def __post_init__(self):
        offs = np.atleast_2d(np.asarray(self.element_offsets, dtype=np.float64))
        if not np.all(np.isfinite(offs)):
            raise ValueError("element offsets must be finite")
        if self.wavelength <= 0:
            raise ValueError("wavelength must be positive")
        object.__setattr__(self, "element_offsets", offs)

    @property
    def n_elements(self) -> int:
        return len(self.element_offsets)


def single_element(wavelength: float) -> ArrayGeometry:
    return ArrayGeometry(np.zeros((1, 3)), wavelength)


def uniform_rectangular_array(nx: int, ny: int, wavelength: float,
                              spacing: float | None = None) -> ArrayGeometry:
    """Centered URA in the local z=0 plane; default spacing half-wavelength."""
    if nx < 1 or ny < 1:
        raise ValueError("array dimensions must be >= 1")
    d = 0.5 * wavelength if spacing is None else spacing
    xs = (np.arange(nx) - (nx - 1) / 2.0) * d
    ys = (np.arange(ny) - (ny - 1) / 2.0) * d
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    offs = np.stack([gx.ravel(), gy.ravel(), np.zeros(nx * ny)], axis=1)
    return ArrayGeometry(offs, wavelength)


@dataclass(frozen=True)
class Precoding:
    """Per-element complex transmit weights."""

    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights",
                           np.atleast_1d(np.asarray(self.weights, dtype=np.complex128)))


def matched_precoding(array: ArrayGeometry, k: np.ndarray,
                      taper: np.ndarray | None = None) -> Precoding:
    """Weights that add coherently toward unit direction ``k``; |W(k)| = sum(taper)."""
    k = np.asarray(k, dtype=np.float64)
    phase = 2.0 * np.pi / array.wavelength * array.element_offsets @ k
    w = np.exp(-1j * phase)
    if taper is not None:
        w = w * np.asarray(taper, dtype=np.float64)
    return Precoding(w)


def tx_array_weight(array: ArrayGeometry, precoding: Precoding, k: np.ndarray):
    """Synthetic transmit array weight W(k) = sum_n w_n exp(+j 2pi/lambda d_n.k).

    ``k`` may be a single unit vector or an (R, 3) batch.
    """
    w = precoding.weights
    if len(w) != array.n_elements:
        raise ValueError(f"precoding length {len(w)} != element count {array.n_elements}")
    k = np.asarray(k, dtype=np.float64)
    phase = 2.0 * np.pi / array.wavelength * (k @ array.element_offsets.T)
    return np.exp(1j * phase) @ w if k.ndim > 1 else np.sum(w * np.exp(1j * phase))


def rx_element_phase(array: ArrayGeometry, m: int, k: np.ndarray) -> complex:
    """Unit-modulus phase exp(-j 2pi/lambda d_m.k) for arrival direction k."""
    if not 0 <= m < array.n_elements:
        raise IndexError(f"element index {m} out of range")
    k = np.asarray(k, dtype=np.float64)
    return np.exp(-2j * np.pi / array.wavelength * float(array.element_offsets[m] @ k))


def rx_phase_matrix(array: ArrayGeometry, k: np.ndarray) -> np.ndarray:
    """All-element phases for arrival directions k (R, 3) -> (M, R) complex."""
    k = np.atleast_2d(np.asarray(k, dtype=np.float64))
    return np.exp(-2j * np.pi / array.wavelength * (array.element_offsets @ k.T))


def steering_vector(array: ArrayGeometry, theta: float, phi: float) -> np.ndarray:
    """Element-wise exp(-j 2pi/lambda d_m.k(theta, phi)), length M."""
    theta, phi = _check_angles(theta, phi)
    k = direction_from_angles(theta, phi)
    return np.exp(-2j * np.pi / array.wavelength * (array.element_offsets @ k))


def hanning_taper(m: int) -> np.ndarray:
    """Symmetric raised-cosine window, w[i] = 0.5 (1 - cos(2pi i/(M-1)))."""
    if m < 1:
        raise ValueError("need at least one element")
    if m == 1:
        return np.ones(1)
    i = np.arange(m, dtype=np.float64)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * i / (m - 1)))


def hanning_taper_2d(nx: int, ny: int) -> np.ndarray:
    """Separable 2D taper matching the URA element ordering."""
    return np.outer(hanning_taper(nx), hanning_taper(ny)).ravel()
