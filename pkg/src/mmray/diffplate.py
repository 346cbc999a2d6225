"""Differentiable single-reflector forward model for geometry calibration.

The reflector is a square plate with a softened edge: rays intersect its
carrier plane analytically (closed form, re-derived every evaluation), and
each hit is weighted by a smooth aperture window in the plate's local
coordinates. The soft edge is what makes the received spectrum
differentiable with respect to in-plane translation and rotation about the
normal; for a hard-edged plate those motions only move the outline, whose
interior derivative is identically zero.

All six rigid parameters (three translations, three rotations) flow through
the tape: hit points, incidence/departure angles, the lobe value and its
normalization, Fresnel coefficients, polarization rotations and the
transmit-side array phase are differentiable. Ray directions, hit validity
and the transmitter visibility are detached sample choices, frozen within
an optimization step.

Only vertically polarized element patterns are supported here (the antenna
pattern itself is not a calibration target).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import linalg2 as l2
from .antenna import ArrayGeometry, Precoding, single_element
from .constants import wavelength
from .materials import RadioMaterial, fresnel_pair, normalization_table
from .spectra import AoASpectrum, grid_axes, grid_directions
from .tracer import Pose, SceneConfig, _endpoint_factors, _los_record, PathBatch, \
    per_element_power, sample_rx_directions
from .constants import VACUUM_PERMITTIVITY


def _abs_detached(x):
    return ad.where(ad.value_of(x) >= 0.0, x, -x)


def _smoothstep(x):
    """Clamped cubic 3x^2 - 2x^3; C1 ramp from 0 to 1 on [0, 1]."""
    xv = ad.value_of(x)
    t = ad.where(xv < 0.0, x * 0.0, ad.where(xv > 1.0, x * 0.0 + 1.0, x))
    return t * t * (3.0 - 2.0 * t)


def _spherical_basis_t(k):
    """Component-tuple (theta-hat, phi-hat) at unit direction tuple k."""
    kx, ky, kz = k
    rho2 = kx * kx + ky * ky
    rho_v = np.sqrt(np.maximum(ad.value_of(rho2), 0.0))
    polar = rho_v < 1e-12
    rho = ad.sqrt(ad.where(polar, rho2 * 0.0 + 1.0, rho2))
    cosp = ad.where(polar, kx * 0.0 + 1.0, kx / rho)
    sinp = ad.where(polar, ky * 0.0, ky / rho)
    rho_true = ad.where(polar, rho2 * 0.0, rho)
    th = (kz * cosp, kz * sinp, -1.0 * rho_true)
    # normalize (|th| = 1 already when |k| = 1, up to roundoff)
    th, _ = l2.v3_normalize(th)
    ph = (-1.0 * sinp, cosp, sinp * 0.0)
    return th, ph


def _incidence_basis_t(d, n):
    """(e_perp, e_par) for propagation tuple d against normal tuple n."""
    c = l2.v3_cross(d, n)
    norm2 = l2.v3_dot(c, c)
    degen = ad.value_of(norm2) < 1e-18
    safe = ad.sqrt(ad.where(degen, norm2 * 0.0 + 1.0, norm2))
    # fallback: any transverse axis; use the global-x construction
    helper = (np.zeros_like(ad.value_of(norm2)) + 1.0,
              np.zeros_like(ad.value_of(norm2)),
              np.zeros_like(ad.value_of(norm2)))
    fb = l2.v3_cross(helper, d)
    fb_n, _ = l2.v3_normalize(l2.v3_add(fb, (0.0, 1e-9, 0.0)))
    e_perp = tuple(ad.where(degen, f, ci / safe) for f, ci in zip(fb_n, c))
    e_par = l2.v3_cross(e_perp, d)
    return e_perp, e_par


@dataclass
class PlateScene:
    """Geometry-calibration scene: one square plate plus TX/RX terminals."""

    half_extent: float
    material: RadioMaterial
    tx: Pose
    rx: Pose
    frequency_hz: float = 28e9
    n_rays: int = 200_000
    seed: int = 0
    tx_power: float = 1.0
    alpha_r: float = 100.0
    edge_softness: float = 0.05
    base_center: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    tx_array: ArrayGeometry | None = None
    rx_array: ArrayGeometry | None = None
    tx_precoding: Precoding | None = None
    el_step_deg: float = 2.0
    az_step_deg: float = 2.0
    power_floor: float = 1e-15
    include_los: bool = True

    def __post_init__(self):
        lam = wavelength(self.frequency_hz)
        if self.tx_array is None:
            self.tx_array = single_element(lam)
        if self.rx_array is None:
            self.rx_array = single_element(lam)
        if self.tx_precoding is None:
            self.tx_precoding = Precoding(np.ones(self.tx_array.n_elements))
        self.base_center = np.asarray(self.base_center, dtype=np.float64)

    @property
    def wavelength(self) -> float:
        return wavelength(self.frequency_hz)

    def as_scene_config(self) -> SceneConfig:
        """Equivalent mesh-free config used for the constant LoS term."""
        return SceneConfig(mesh=None, materials=[self.material], tx=self.tx, rx=self.rx,
                           frequency_hz=self.frequency_hz, n_rays=self.n_rays,
                           seed=self.seed, tx_power=self.tx_power, alpha_r=self.alpha_r,
                           tx_array=self.tx_array, rx_array=self.rx_array,
                           tx_precoding=self.tx_precoding,
                           el_step_deg=self.el_step_deg, az_step_deg=self.az_step_deg)

    def grid(self):
        return grid_axes(self.el_step_deg, self.az_step_deg)


def _rotation_entries(rx, ry, rz):
    """Rows of Rz(rz) Ry(ry) Rx(rx) as scalar expressions."""
    cx, sx = ad.cos(rx), ad.sin(rx)
    cy, sy = ad.cos(ry), ad.sin(ry)
    cz, sz = ad.cos(rz), ad.sin(rz)
    r00 = cz * cy
    r01 = cz * sy * sx - sz * cx
    r02 = cz * sy * cx + sz * sx
    r10 = sz * cy
    r11 = sz * sy * sx + cz * cx
    r12 = sz * sy * cx - cz * sx
    r20 = -1.0 * sy
    r21 = cy * sx
    r22 = cy * cx
    return (r00, r01, r02), (r10, r11, r12), (r20, r21, r22)


def plate_element_powers(scene: PlateScene, params, dirs: np.ndarray,
                         frozen_masks: dict | None = None):
    """Per-element received power for plate pose ``params`` = (tx,ty,tz,rx,ry,rz).

    ``params`` may be a Var vector (taped) or a plain length-6 array. Returns
    (p_re, p_im, masks) where p_re/p_im have length M.
    """
    lam = scene.wavelength
    k0 = 2.0 * np.pi / lam
    t_off = (params[0], params[1], params[2])
    row0, row1, row2 = _rotation_entries(params[3], params[4], params[5])
    center = tuple(scene.base_center[i] + t_off[i] for i in range(3))
    e_u = (row0[0], row1[0], row2[0])   # R @ x-hat
    e_v = (row0[1], row1[1], row2[1])   # R @ y-hat
    n = (row0[2], row1[2], row2[2])     # R @ z-hat

    rx_p = scene.rx.position
    tx_p = scene.tx.position
    d = l2.v3(dirs)  # constant ray directions from the RX

    d_dot_n = v_dot_const_var(d, n)
    c_min_o = tuple(center[i] - rx_p[i] for i in range(3))
    num = v_dot_const_var(c_min_o, n)  # scalar; broadcasts over rays below
    denom_v = ad.value_of(d_dot_n)
    if frozen_masks is None:
        masks = {}
        masks["facing"] = np.abs(denom_v) > 1e-9
        t_star_v = np.where(masks["facing"], ad.value_of(num) / np.where(
            masks["facing"], denom_v, 1.0), -1.0)
        masks["forward"] = masks["facing"] & (t_star_v > 1e-6)
    else:
        masks = frozen_masks
    safe_denom = ad.where(masks["forward"], d_dot_n, d_dot_n * 0.0 + 1.0)
    t_star = num / safe_denom
    hit = tuple(rx_p[i] + t_star * d[i] for i in range(3))

    rel = tuple(hit[i] - center[i] for i in range(3))
    u = l2.v3_dot(rel, e_u)
    v = l2.v3_dot(rel, e_v)
    tau = scene.edge_softness
    h = scene.half_extent
    w_u = _smoothstep((h + 0.5 * tau - _abs_detached(u)) / tau)
    w_v = _smoothstep((h + 0.5 * tau - _abs_detached(v)) / tau)
    w_ap = w_u * w_v

    # TX connection
    to_tx = tuple(tx_p[i] - hit[i] for i in range(3))
    r_i2 = l2.v3_dot(to_tx, to_tx)
    r_i = ad.sqrt(r_i2)
    u_tx = tuple(to_tx[i] / r_i for i in range(3))
    cos_i = l2.v3_dot(u_tx, n)
    out_dir = tuple(-1.0 * d[i] for i in range(3))
    cos_s = l2.v3_dot(out_dir, n)
    if frozen_masks is None:
        masks["lit"] = (masks["forward"] & (ad.value_of(cos_i) > 1e-6)
                        & (ad.value_of(cos_s) > 1e-6))
    lit = masks["lit"]

    cos_i = ad.where(lit, cos_i, cos_i * 0.0 + 0.5)
    cos_s = ad.where(lit, cos_s, cos_s * 0.0 + 0.5)

    in_dir = tuple(-1.0 * u_tx[i] for i in range(3))
    spec = tuple(in_dir[i] + 2.0 * cos_i * n[i] for i in range(3))
    cos_psi = l2.v3_dot(spec, out_dir)
    lobe = ((1.0 + cos_psi) * 0.5) ** scene.alpha_r
    f_tab = normalization_table(scene.alpha_r)
    f_norm = f_tab(cos_i)
    f_s = lobe / f_norm

    mat = scene.material
    eta_im = -mat.sigma / (2.0 * np.pi * scene.frequency_hz * VACUUM_PERMITTIVITY)
    r_te, r_tm = fresnel_pair(mat.eps_r, eta_im, cos_i)

    # polarization chain on the (theta, phi) bases
    e_perp_i, e_par_i = _incidence_basis_t(in_dir, n)
    e_perp_o, e_par_o = _incidence_basis_t(out_dir, n)
    th_i, ph_i = _spherical_basis_t(in_dir)
    th_o, ph_o = _spherical_basis_t(out_dir)
    a_x = np.sqrt(1.0 - mat.xpd)
    b_x = np.sqrt(mat.xpd)
    core = l2.m2((r_te[0] * a_x, r_te[1] * a_x), (r_te[0] * b_x, r_te[1] * b_x),
                 (r_tm[0] * b_x, r_tm[1] * b_x), (r_tm[0] * a_x, r_tm[1] * a_x))
    r_in = l2.m2((l2.v3_dot(e_perp_i, th_i), zero_like(cos_i)),
                 (l2.v3_dot(e_perp_i, ph_i), zero_like(cos_i)),
                 (l2.v3_dot(e_par_i, th_i), zero_like(cos_i)),
                 (l2.v3_dot(e_par_i, ph_i), zero_like(cos_i)))
    r_out = l2.m2((l2.v3_dot(th_o, e_perp_o), zero_like(cos_i)),
                  (l2.v3_dot(th_o, e_par_o), zero_like(cos_i)),
                  (l2.v3_dot(ph_o, e_perp_o), zero_like(cos_i)),
                  (l2.v3_dot(ph_o, e_par_o), zero_like(cos_i)))
    chain = l2.m2_mul(r_out, l2.m2_mul(core, r_in))

    # TX side: V-pol element pattern, differentiable array weight
    v_tx = _tx_vector(scene, in_dir)
    # RX side: constant (ray directions are frozen)
    w_rx = _rx_row(scene, dirs)
    a_pair = l2.vec2_dot(w_rx, l2.m2_vec(chain, v_tx))
    amp2 = ad.cabs2(a_pair)

    s = mat.s
    kernel = (1.0 - s * s) * f_s * (cos_i / cos_s) + (s * s) * (cos_i / np.pi)
    mc = 4.0 * np.pi / scene.n_rays * scene.tx_power
    power = amp2 * kernel * (1.0 / r_i2) * (lam / (4.0 * np.pi)) ** 2 * mc * w_ap
    power = ad.where(lit, power, power * 0.0)

    k_prop_local = (-dirs) @ scene.rx.rotation  # arrival propagation, local frame
    phase_mat = -k0 * (scene.rx_array.element_offsets @ k_prop_local.T)  # (M, K)
    p_re = ad.matmul(np.cos(phase_mat), power)
    p_im = ad.matmul(np.sin(phase_mat), power)
    return p_re, p_im, masks


def zero_like(x):
    return np.zeros_like(ad.value_of(x))


def v_dot_const_var(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _tx_vector(scene: PlateScene, k_aod):
    """TX-side field 2-vector (component pairs) at departure direction tuple."""
    rot = scene.tx.rotation
    kx, ky, kz = k_aod
    kl = (rot[0, 0] * kx + rot[1, 0] * ky + rot[2, 0] * kz,
          rot[0, 1] * kx + rot[1, 1] * ky + rot[2, 1] * kz,
          rot[0, 2] * kx + rot[1, 2] * ky + rot[2, 2] * kz)
    th_l, _ = _spherical_basis_t(kl)
    th_l_g = (rot[0, 0] * th_l[0] + rot[0, 1] * th_l[1] + rot[0, 2] * th_l[2],
              rot[1, 0] * th_l[0] + rot[1, 1] * th_l[1] + rot[1, 2] * th_l[2],
              rot[2, 0] * th_l[0] + rot[2, 1] * th_l[1] + rot[2, 2] * th_l[2])
    th_g, ph_g = _spherical_basis_t(k_aod)
    b11 = l2.v3_dot(th_g, th_l_g)
    b21 = l2.v3_dot(ph_g, th_l_g)

    k0 = 2.0 * np.pi / scene.wavelength
    w = scene.tx_precoding.weights
    offs = scene.tx_array.element_offsets
    w_re = None
    w_im = None
    for m in range(scene.tx_array.n_elements):
        phase = k0 * (offs[m, 0] * kl[0] + offs[m, 1] * kl[1] + offs[m, 2] * kl[2])
        cre = ad.cos(phase) * w[m].real - ad.sin(phase) * w[m].imag
        cim = ad.sin(phase) * w[m].real + ad.cos(phase) * w[m].imag
        w_re = cre if w_re is None else w_re + cre
        w_im = cim if w_im is None else w_im + cim
    return ((b11 * w_re, b11 * w_im), (b21 * w_re, b21 * w_im))


def _rx_row(scene: PlateScene, dirs: np.ndarray):
    """Constant receive row vector for frozen ray directions."""
    cfg = scene.as_scene_config()
    k_aoa = -dirs
    _, w_rx = _endpoint_factors(cfg, k_aoa, k_aoa)
    return ((w_rx[:, 0].real, w_rx[:, 0].imag), (w_rx[:, 1].real, w_rx[:, 1].imag))


def _los_elements(scene: PlateScene) -> np.ndarray:
    cfg = scene.as_scene_config()
    rec = _los_record(cfg)
    if rec is None or not scene.include_los:
        return np.zeros(scene.rx_array.n_elements, dtype=np.complex128)
    batch = PathBatch(rec["k_aod"], rec["k_aoa"], rec["t_total"], [0], [1.0])
    return per_element_power(batch, cfg)


def plate_spectrum_cells(scene: PlateScene, params, dirs, grid_dirs_local,
                         frozen_masks=None):
    """Floored spectrum magnitudes on given local grid directions (Var-aware)."""
    p_re, p_im, masks = plate_element_powers(scene, params, dirs, frozen_masks)
    los = _los_elements(scene)
    p_re = p_re + los.real
    p_im = p_im + los.imag
    m = scene.rx_array.n_elements
    k0 = 2.0 * np.pi / scene.wavelength
    steer = np.exp(-1j * k0 * (grid_dirs_local @ scene.rx_array.element_offsets.T))
    e_re = (ad.matmul(steer.real, p_re) - ad.matmul(steer.imag, p_im)) * (1.0 / np.sqrt(m))
    e_im = (ad.matmul(steer.real, p_im) + ad.matmul(steer.imag, p_re)) * (1.0 / np.sqrt(m))
    e2 = e_re * e_re + e_im * e_im
    floor2 = scene.power_floor ** 2
    vals = ad.sqrt(ad.where(ad.value_of(e2) > floor2, e2, e2 * 0.0 + floor2))
    return vals, masks


def plate_spectrum(scene: PlateScene, params=np.zeros(6), seed=None) -> AoASpectrum:
    """Forward (untaped) spectrum of the soft-edged plate model."""
    cfg = scene.as_scene_config()
    if seed is not None:
        cfg.seed = seed
    dirs = sample_rx_directions(cfg)
    el, az = scene.grid()
    gdirs = grid_directions(el, az)
    vals, _ = plate_spectrum_cells(scene, np.asarray(params, dtype=np.float64),
                                   dirs, gdirs)
    values = ad.value_of(vals).reshape(len(el), len(az))
    return AoASpectrum(values, el, az, meta={"model": "soft_plate", "seed": cfg.seed})
