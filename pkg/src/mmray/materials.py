"""Electromagnetic materials and the directional ray-surface interaction.

The single-lobe scattering pattern replaces mirror-law reflection: outgoing
power is spread over directions near the specular one with density
``f(psi) = lobe(psi) / F`` where ``lobe(psi) = ((1 + cos psi) / 2) ** alpha_r``
and ``F`` normalizes the above-horizon integral to one (energy conservation).
A larger lobe exponent gives a narrower, more mirror-like pattern.

Reflection amplitudes come from the classic air/half-space Fresnel
coefficients per polarization; an XPD matrix models cross-polarization
leakage; the scattering coefficient ``s`` splits reflected amplitude between
the directional lobe (sqrt(1 - s^2)) and a Lambertian diffuse term (s).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import CubicSpline

from . import autodiff as ad
from .constants import VACUUM_PERMITTIVITY
from .geometry import Intersection

EPS_R_RANGE = (1.0, 200.0)
SIGMA_RANGE = (1e-3, 1e6)


@lru_cache(maxsize=8)
def _leggauss(n: int):
    return leggauss(n)


@dataclass(frozen=True)
class RadioMaterial:
    """Per-surface electromagnetic parameters.

    eps_r: relative permittivity; sigma: conductivity (S/m); s: fraction of
    reflected amplitude routed to diffuse scattering; xpd: cross-polar
    discrimination coefficient; alpha_r: lobe directivity exponent.
    """

    eps_r: float
    sigma: float
    s: float = 0.0
    xpd: float = 0.0
    alpha_r: float = 100.0

    def __post_init__(self):
        if not EPS_R_RANGE[0] <= self.eps_r <= EPS_R_RANGE[1]:
            raise ValueError(f"eps_r {self.eps_r} outside {EPS_R_RANGE}")
        if not SIGMA_RANGE[0] <= self.sigma <= SIGMA_RANGE[1]:
            raise ValueError(f"sigma {self.sigma} outside {SIGMA_RANGE}")
        if not 0.0 <= self.s <= 1.0:
            raise ValueError("s must be in [0, 1]")
        if not 0.0 <= self.xpd <= 1.0:
            raise ValueError("xpd must be in [0, 1]")
        if self.alpha_r < 0.0:
            raise ValueError("alpha_r must be >= 0")


def load_material_table(path: str | Path, alpha_r: float | None = None) -> list[RadioMaterial]:
    """JSON array of named material records -> list indexed by position."""
    records = json.loads(Path(path).read_text())
    out = []
    for rec in records:
        kwargs = {k: rec[k] for k in ("eps_r", "sigma", "s", "xpd") if k in rec}
        a = rec.get("alpha_r", alpha_r)
        if a is not None:
            kwargs["alpha_r"] = a
        out.append(RadioMaterial(**kwargs))
    return out


def save_material_table(materials: list[RadioMaterial], path: str | Path,
                        names: list[str] | None = None) -> None:
    recs = []
    for i, m in enumerate(materials):
        recs.append({"name": names[i] if names else f"material_{i}",
                     "eps_r": m.eps_r, "sigma": m.sigma, "s": m.s,
                     "xpd": m.xpd, "alpha_r": m.alpha_r})
    Path(path).write_text(json.dumps(recs, indent=2) + "\n")


def complex_permittivity(eps_r, sigma, frequency_hz: float):
    """eta = eps_r - j sigma / (2 pi f eps0), the lossy relative permittivity."""
    if frequency_hz <= 0:
        raise ValueError("frequency must be positive")
    return np.asarray(eps_r, dtype=np.complex128) - 1j * np.asarray(sigma) / (
        2.0 * np.pi * frequency_hz * VACUUM_PERMITTIVITY)


def fresnel_pair(eta_re, eta_im, cos_theta):
    """Fresnel reflection coefficients as (re, im) pairs, autodiff-friendly.

    Air-side incidence on a half-space of complex relative permittivity eta.
    Returns ((rTE_re, rTE_im), (rTM_re, rTM_im)).
    """
    ct = cos_theta
    s2 = 1.0 - ct * ct
    root = ad.csqrt((eta_re - s2, eta_im))
    r_te = ad.cdiv((ct - root[0], -root[1]), (ct + root[0], root[1]))
    ect = (eta_re * ct, eta_im * ct)
    r_tm = ad.cdiv((ect[0] - root[0], ect[1] - root[1]), (ect[0] + root[0], ect[1] + root[1]))
    return r_te, r_tm


def fresnel_coeffs(eta: complex, theta_i: float):
    """(r_TE, r_TM) for incidence angle theta_i in [0, pi/2)."""
    theta_i = np.asarray(theta_i, dtype=np.float64)
    if np.any(theta_i < 0.0) or np.any(theta_i >= np.pi / 2):
        raise ValueError("theta_i must lie in [0, pi/2)")
    eta = np.asarray(eta, dtype=np.complex128)
    r_te, r_tm = fresnel_pair(eta.real, eta.imag, np.cos(theta_i))
    return r_te[0] + 1j * r_te[1], r_tm[0] + 1j * r_tm[1]


# ---------------------------------------------------------------------------
# Scattering lobe and its energy-conservation normalization


def _horizon_arc(cos_psi, theta_i):
    """Arc length (radians) of the lobe-frame azimuth circle above the surface
    at deviation angle psi from a specular axis tilted theta_i from the normal.
    """
    sin_psi = np.sqrt(np.maximum(1.0 - cos_psi ** 2, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (cos_psi * np.cos(theta_i)) / np.maximum(sin_psi * np.sin(theta_i), 1e-300)
    return 2.0 * np.pi - 2.0 * np.arccos(np.clip(ratio, -1.0, 1.0))


def normalization_factor(alpha_r: float, theta_i: float, n_nodes: int = 256) -> float:
    """Hemispherical integral F of the unnormalized lobe ((1+cos psi)/2)^alpha.

    Dividing the lobe by F makes it integrate to exactly one over the upper
    hemisphere, which is the energy-conservation requirement. The published
    "normalization factor" that amplifies clipped lobes at grazing incidence
    is the reciprocal 1/F.

    The azimuthal part of the integral is the exact horizon arc, leaving a 1D
    integral in the lobe deviation angle. The substitution tau = u^(alpha+1),
    u = (1+cos psi)/2 keeps Gauss-Legendre accurate for any lobe exponent.
    """
    if not 0.0 <= theta_i < np.pi / 2:
        raise ValueError("theta_i must lie in [0, pi/2)")
    if alpha_r < 0:
        raise ValueError("alpha_r must be >= 0")

    def quad(n):
        ap1 = alpha_r + 1.0
        # fully-above region: psi < pi/2 - theta_i, i.e. u > (1+sin theta)/2
        u_full = (1.0 + np.sin(theta_i)) / 2.0
        u_zero = (1.0 - np.sin(theta_i)) / 2.0
        tau_full = u_full ** ap1
        tau_zero = u_zero ** ap1
        total = 2.0 * np.pi * (1.0 - tau_full)
        if tau_full > tau_zero:
            x, w = _leggauss(n)
            # cosine endpoint substitution: the horizon arc has square-root
            # behavior at both region edges
            half = 0.5 * (tau_full - tau_zero)
            mid = 0.5 * (tau_full + tau_zero)
            tau = mid + half * np.sin(0.5 * np.pi * x)
            jac = half * 0.5 * np.pi * np.cos(0.5 * np.pi * x)
            u = tau ** (1.0 / ap1)
            total += np.sum(w * jac * _horizon_arc(2.0 * u - 1.0, theta_i))
        return 2.0 / ap1 * total

    f1, f2 = quad(n_nodes), quad(2 * n_nodes)
    if abs(f1 - f2) > 1e-6 * max(abs(f2), 1e-300):
        raise RuntimeError(
            f"lobe normalization quadrature did not converge "
            f"(alpha_r={alpha_r}, theta_i={theta_i}): {f1} vs {f2}")
    return f2


class NormalizationTable:
    """F(theta_i) for one lobe exponent, cached on a cosine grid.

    Cubic-spline interpolation in x = cos(theta_i) keeps the lookup smooth
    and differentiable; nodes come from a uniform theta grid so the grazing
    transition stays resolved.
    """

    def __init__(self, alpha_r: float, n_theta: int = 721):
        self.alpha_r = float(alpha_r)
        theta = np.linspace(0.0, np.pi / 2 - 1e-6, n_theta)
        values = np.array([normalization_factor(alpha_r, t) for t in theta])
        x = np.cos(theta)[::-1]
        self._spline = CubicSpline(x, values[::-1])

    def __call__(self, cos_theta_i):
        """F at cos(theta_i); accepts ndarray or autodiff Var."""
        return ad.spline_lookup(self._spline, cos_theta_i)


_norm_tables: dict[float, NormalizationTable] = {}


def normalization_table(alpha_r: float) -> NormalizationTable:
    key = float(alpha_r)
    if key not in _norm_tables:
        _norm_tables[key] = NormalizationTable(key)
    return _norm_tables[key]


def scattering_pattern(alpha_r: float, theta_i: float, psi) -> np.ndarray:
    """Normalized directional lobe value (1/sr) at deviation angle psi."""
    psi = np.asarray(psi, dtype=np.float64)
    if np.any(psi < 0.0) or np.any(psi > np.pi):
        raise ValueError("psi must lie in [0, pi]")
    f = normalization_factor(alpha_r, theta_i)
    return ((1.0 + np.cos(psi)) / 2.0) ** alpha_r / f


def hpbw_deg(alpha_r: float, convention: str = "power") -> float:
    """Full half-power beamwidth of the lobe, in degrees.

    ``power`` treats the lobe value as a power pattern (drop to 1/2);
    ``amplitude`` treats it as a field amplitude (power drop at 1/sqrt(2)).
    """
    if alpha_r <= 0:
        raise ValueError("hpbw undefined for alpha_r <= 0")
    if convention == "power":
        level = 0.5
    elif convention == "amplitude":
        level = 2.0 ** -0.5
    else:
        raise ValueError("convention must be 'power' or 'amplitude'")
    cos_psi = 2.0 * level ** (1.0 / alpha_r) - 1.0
    return float(np.degrees(2.0 * np.arccos(np.clip(cos_psi, -1.0, 1.0))))


def sample_scatter_direction(alpha_r: float, specular_dir: np.ndarray,
                             normal: np.ndarray, rng: np.random.Generator):
    """Draw one direction from the unclipped lobe pdf around the specular axis.

    Returns (direction, pdf, above_surface). Below-horizon draws carry zero
    contribution; the pattern's clipped mass is accounted for by the
    normalization factor, so the estimator stays unbiased. The pdf is the
    exact analytic density of the unclipped lobe over the full sphere.
    """
    d, p, above = sample_scatter_directions(alpha_r, specular_dir[None, :],
                                            np.asarray(normal)[None, :], rng)
    return d[0], float(p[0]), bool(above[0])


def sample_scatter_directions(alpha_r: float, specular_dirs: np.ndarray,
                              normals: np.ndarray, rng: np.random.Generator):
    """Vectorized lobe sampling; one draw per row."""
    axes = np.atleast_2d(specular_dirs)
    n = len(axes)
    xi = rng.random(n)
    u = xi ** (1.0 / (alpha_r + 1.0))
    cos_psi = 2.0 * u - 1.0
    sin_psi = np.sqrt(np.maximum(1.0 - cos_psi ** 2, 0.0))
    phi = rng.random(n) * 2.0 * np.pi
    e1, e2 = orthonormal_frame(axes)
    dirs = (cos_psi[:, None] * axes
            + (sin_psi * np.cos(phi))[:, None] * e1
            + (sin_psi * np.sin(phi))[:, None] * e2)
    pdf = (alpha_r + 1.0) / (4.0 * np.pi) * u ** alpha_r
    above = np.einsum("ij,ij->i", dirs, np.atleast_2d(normals)) > 0.0
    return dirs, pdf, above


def orthonormal_frame(axes: np.ndarray):
    """Two unit vectors completing each row of ``axes`` to a right-handed frame."""
    axes = np.atleast_2d(axes)
    helper = np.where(np.abs(axes[:, 2:3]) < 0.9,
                      np.tile([0.0, 0.0, 1.0], (len(axes), 1)),
                      np.tile([1.0, 0.0, 0.0], (len(axes), 1)))
    e1 = np.cross(helper, axes)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(axes, e1)
    return e1, e2


# ---------------------------------------------------------------------------
# Polarization transfer


def xpd_matrix(xpd: float) -> np.ndarray:
    """Cross-polarization leakage matrix [[sqrt(1-x), sqrt(x)], [sqrt(x), sqrt(1-x)]]."""
    a = np.sqrt(1.0 - xpd)
    b = np.sqrt(xpd)
    return np.array([[a, b], [b, a]])


def spherical_basis(k: np.ndarray):
    """(theta-hat, phi-hat) transverse basis at unit direction(s) k."""
    k = np.atleast_2d(np.asarray(k, dtype=np.float64))
    rho = np.hypot(k[:, 0], k[:, 1])
    polar = rho < 1e-12
    safe_rho = np.where(polar, 1.0, rho)
    cosp = np.where(polar, 1.0, k[:, 0] / safe_rho)
    sinp = np.where(polar, 0.0, k[:, 1] / safe_rho)
    ct = k[:, 2]
    theta_hat = np.stack([ct * cosp, ct * sinp, -rho], axis=1)
    theta_hat /= np.linalg.norm(theta_hat, axis=1, keepdims=True)
    phi_hat = np.stack([-sinp, cosp, np.zeros(len(k))], axis=1)
    return theta_hat, phi_hat


def incidence_basis(d: np.ndarray, n: np.ndarray):
    """(e_perp, e_par) for propagation d against surface normal n.

    e_perp is normal to the plane of incidence, e_par completes the transverse
    frame for d. Near normal incidence any transverse direction serves.
    """
    d = np.atleast_2d(d)
    n = np.atleast_2d(n)
    c = np.cross(d, n)
    norm = np.linalg.norm(c, axis=1, keepdims=True)
    fallback, _ = orthonormal_frame(d)
    degenerate = norm[:, 0] < 1e-9
    e_perp = np.where(degenerate[:, None], fallback, c / np.where(norm < 1e-300, 1.0, norm))
    e_par = np.cross(e_perp, d)
    return e_perp, e_par


@dataclass
class TransferMatrix:
    """2x2 complex field transform in the (theta-hat, phi-hat) basis.

    ``directional`` carries the lobe branch, ``diffuse`` the Lambertian
    branch; both already include the rotations from the incoming global
    transverse basis into the local incidence frame and back out.
    """

    directional: np.ndarray
    diffuse: np.ndarray
    psi: float
    theta_i: float

    @property
    def matrix(self) -> np.ndarray:
        return self.directional


def transfer_matrix(hit: Intersection, incoming: np.ndarray, outgoing: np.ndarray,
                    mat: RadioMaterial, frequency_hz: float) -> TransferMatrix:
    """Field transform of one surface interaction.

    ``incoming`` is the propagation direction of the arriving ray (pointing
    at the surface), ``outgoing`` the departing propagation direction. A
    below-horizon outgoing direction yields zero matrices.
    """
    incoming = np.asarray(incoming, dtype=np.float64)
    outgoing = np.asarray(outgoing, dtype=np.float64)
    n = np.asarray(hit.normal, dtype=np.float64)
    cos_i = -float(incoming @ n)
    cos_s = float(outgoing @ n)
    if cos_i <= 0.0:
        raise ValueError("incoming direction must point toward the surface")
    zero = np.zeros((2, 2), dtype=np.complex128)
    if cos_s <= 0.0:
        return TransferMatrix(zero, zero.copy(), psi=np.nan, theta_i=float(np.arccos(min(cos_i, 1.0))))

    spec = incoming + 2.0 * cos_i * n
    cos_psi = float(np.clip(spec @ outgoing, -1.0, 1.0))
    psi = float(np.arccos(cos_psi))
    theta_i = float(np.arccos(np.clip(cos_i, -1.0, 1.0)))

    eta = complex_permittivity(mat.eps_r, mat.sigma, frequency_hz)
    r_te, r_tm = fresnel_coeffs(eta, min(theta_i, np.pi / 2 - 1e-9))
    f_table = normalization_table(mat.alpha_r)
    f_s = ((1.0 + cos_psi) / 2.0) ** mat.alpha_r / float(f_table(np.array([cos_i]))[0])
    f_d = cos_s / np.pi

    x_mat = xpd_matrix(mat.xpd)
    core_dir = np.sqrt(1.0 - mat.s ** 2) * np.sqrt(f_s) * np.diag([r_te, r_tm]) @ x_mat
    core_diff = mat.s * np.sqrt(f_d) * np.diag([r_te, r_tm]) @ x_mat

    e_perp_i, e_par_i = incidence_basis(incoming, n)
    e_perp_o, e_par_o = incidence_basis(outgoing, n)
    th_i, ph_i = spherical_basis(incoming)
    th_o, ph_o = spherical_basis(outgoing)
    # rows map global (theta, phi) components into (perp, par)
    r_in = np.array([[float(e_perp_i[0] @ th_i[0]), float(e_perp_i[0] @ ph_i[0])],
                     [float(e_par_i[0] @ th_i[0]), float(e_par_i[0] @ ph_i[0])]])
    r_out = np.array([[float(th_o[0] @ e_perp_o[0]), float(th_o[0] @ e_par_o[0])],
                      [float(ph_o[0] @ e_perp_o[0]), float(ph_o[0] @ e_par_o[0])]])
    return TransferMatrix(r_out @ core_dir @ r_in, r_out @ core_diff @ r_in,
                          psi=psi, theta_i=theta_i)
