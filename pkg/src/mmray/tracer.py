"""Backward Monte Carlo path tracing and AoA power-spectrum synthesis.

Rays launch from the receiver over the full sphere of directions; every
surface hit attempts a deterministic connection to the transmitter, and the
walk continues by importance-sampling the scattering lobe up to a maximum
bounce depth. A direct line-of-sight connection is added once, outside the
Monte Carlo sum, so it carries no sampling noise.

Estimator bookkeeping (per emitted path, power domain):

    power = |W_TX * C_R^H . T_total . C_T|^2 * mc_weight * P_t

where ``T_total`` chains the per-bounce polarization transforms with the
aperture prefactor lambda/(4 pi) and the spreading term. Transport follows
radiance bookkeeping in the sampled solid-angle measure: receiver-side
segment lengths cancel, every bounce applies the pattern value times the
illumination/observation projection ratio cos(theta_i)/cos(theta_s), and
the only explicit spreading is the transmitter leg 1/r_tx. In the
large-reflector, narrow-lobe limit the angular compression of the lobe
across the bounce reproduces the mirror-image spreading, so the traced
path power converges to the specular reflection gain.

Per-ray phase is discarded (powers add); only the per-element arrival phase
across the receive array is kept, which is what the AoA beamformer needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import linalg2 as l2
from .antenna import (AntennaPattern, ArrayGeometry, IsotropicPattern, Precoding,
                      angles_from_direction, single_element, tx_array_weight)
from .bvh import AccelStructure, build_accel, intersect_batch, occluded_batch
from .constants import wavelength
from .field import MaterialField
from .geometry import RAY_EPSILON, TriangleMesh
from .materials import (RadioMaterial, incidence_basis, normalization_table,
                        sample_scatter_directions, spherical_basis)
from .spectra import AoASpectrum, grid_axes, grid_directions


# ---------------------------------------------------------------------------
# Poses and scene configuration


def look_at_rotation(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Rotation whose local +z axis points from position toward target."""
    z = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    z = z / np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    if abs(z @ up) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)  # columns are local axes in global coords


@dataclass
class Pose:
    position: np.ndarray
    rotation: np.ndarray = dc_field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)

    def to_local(self, k: np.ndarray) -> np.ndarray:
        return np.asarray(k) @ self.rotation

    def to_global(self, k: np.ndarray) -> np.ndarray:
        return np.asarray(k) @ self.rotation.T


@dataclass
class SceneConfig:
    """Everything one simulation run needs; immutable by convention."""

    mesh: TriangleMesh | None
    materials: list[RadioMaterial] | MaterialField
    tx: Pose
    rx: Pose
    frequency_hz: float = 28e9
    n_rays: int = 100_000
    max_depth: int = 1
    seed: int = 0
    tx_power: float = 1.0
    alpha_r: float = 100.0
    tx_pattern: AntennaPattern = dc_field(default_factory=IsotropicPattern)
    rx_pattern: AntennaPattern = dc_field(default_factory=IsotropicPattern)
    tx_array: ArrayGeometry | None = None
    rx_array: ArrayGeometry | None = None
    tx_precoding: Precoding | None = None
    sampler: str = "fibonacci"
    n_workers: int = 1
    el_step_deg: float = 1.0
    az_step_deg: float = 1.0
    power_floor: float = 1e-15
    accel: AccelStructure | None = None

    def __post_init__(self):
        if self.n_rays < 1:
            raise ValueError("n_rays must be >= 1")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.frequency_hz <= 0:
            raise ValueError("frequency must be positive")
        if self.sampler not in ("fibonacci", "uniform"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        lam = self.wavelength
        if self.tx_array is None:
            self.tx_array = single_element(lam)
        if self.rx_array is None:
            self.rx_array = single_element(lam)
        if self.tx_precoding is None:
            self.tx_precoding = Precoding(np.ones(self.tx_array.n_elements))
        if self.mesh is not None and self.accel is None:
            self.accel = build_accel(self.mesh)

    @property
    def wavelength(self) -> float:
        return wavelength(self.frequency_hz)

    def grid(self):
        return grid_axes(self.el_step_deg, self.az_step_deg)


# ---------------------------------------------------------------------------
# Direction sampling


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    golden = np.pi * (3.0 - np.sqrt(5.0))
    phi = golden * i
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly random rotation matrix (Shoemake quaternion method)."""
    u1, u2, u3 = rng.random(3)
    q = np.array([np.sqrt(1 - u1) * np.sin(2 * np.pi * u2),
                  np.sqrt(1 - u1) * np.cos(2 * np.pi * u2),
                  np.sqrt(u1) * np.sin(2 * np.pi * u3),
                  np.sqrt(u1) * np.cos(2 * np.pi * u3)])
    w, x, y, z = q[3], q[0], q[1], q[2]
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])


def sample_rx_directions(cfg: SceneConfig) -> np.ndarray:
    """The L unit directions launched from the receiver, seeded by cfg.seed."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD1E5]))
    if cfg.sampler == "fibonacci":
        return fibonacci_sphere(cfg.n_rays) @ random_rotation(rng).T
    v = rng.normal(size=(cfg.n_rays, 3))
    n = np.linalg.norm(v, axis=1, keepdims=True)
    n[n < 1e-12] = 1.0
    return v / n


# ---------------------------------------------------------------------------
# Path batches


@dataclass(frozen=True)
class PathSample:
    """One traced interaction chain, as seen from the receiver."""

    k_aod: np.ndarray      # departure propagation direction at TX (global)
    k_aoa: np.ndarray      # arrival propagation direction at RX (global)
    t_total: np.ndarray    # 2x2 complex; includes lambda/4pi and spreading
    depth: int
    mc_weight: float


class PathBatch:
    """Struct-of-arrays sequence of PathSamples."""

    def __init__(self, k_aod, k_aoa, t_total, depth, mc_weight):
        self.k_aod = np.asarray(k_aod, dtype=np.float64).reshape(-1, 3)
        self.k_aoa = np.asarray(k_aoa, dtype=np.float64).reshape(-1, 3)
        self.t_total = np.asarray(t_total, dtype=np.complex128).reshape(-1, 2, 2)
        self.depth = np.asarray(depth, dtype=np.int64).reshape(-1)
        self.mc_weight = np.asarray(mc_weight, dtype=np.float64).reshape(-1)

    def __len__(self):
        return len(self.depth)

    def __getitem__(self, i) -> PathSample:
        return PathSample(self.k_aod[i], self.k_aoa[i], self.t_total[i],
                          int(self.depth[i]), float(self.mc_weight[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def concatenate(cls, batches):
        batches = [b for b in batches if len(b)]
        if not batches:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2, 2)),
                       np.zeros(0), np.zeros(0))
        return cls(np.concatenate([b.k_aod for b in batches]),
                   np.concatenate([b.k_aoa for b in batches]),
                   np.concatenate([b.t_total for b in batches]),
                   np.concatenate([b.depth for b in batches]),
                   np.concatenate([b.mc_weight for b in batches]))


# ---------------------------------------------------------------------------
# Tracing (geometry only; shading applies materials afterwards)


def _trace_chunk_features(cfg: SceneConfig, dirs: np.ndarray, rng: np.random.Generator):
    """Walk one batch of RX rays; collect per-depth interaction features.

    Returns {depth: feature dict}. All quantities are detached geometry.
    """
    accel = cfg.accel
    out: dict[int, dict] = {}
    if accel is None or len(dirs) == 0:
        return out
    rx = cfg.rx.position
    tx = cfg.tx.position

    origins = np.broadcast_to(rx, (len(dirs), 3)).copy()
    current = dirs.copy()
    seg_sum = np.zeros(len(dirs))
    first_dir = dirs.copy()
    hops: list[dict] = []

    for depth in range(1, cfg.max_depth + 1):
        res = intersect_batch(accel, origins, current, t_min=0.0)
        keep = res["hit"]
        if not np.any(keep):
            break
        idx = np.where(keep)[0]
        origins = origins[idx]
        current = current[idx]
        seg_sum = seg_sum[idx] + res["t"][idx]
        first_dir = first_dir[idx]
        hops = [{k: v[idx] for k, v in h.items()} for h in hops]

        point = res["point"][idx]
        normal = res["normal"][idx]
        material = res["material"][idx]
        hop = {"point": point, "normal": normal, "material": material,
               "out_dir": -current, "in_dir": np.zeros_like(point),
               "cos_theta_s": np.einsum("ij,ij->i", -current, normal)}
        hops.append(hop)

        # deterministic connection to the TX
        to_tx = tx - point
        r_tx = np.linalg.norm(to_tx, axis=1)
        ok = r_tx > 1e-9
        u_tx = np.where(ok[:, None], to_tx / np.where(ok, r_tx, 1.0)[:, None], 0.0)
        cos_i = np.einsum("ij,ij->i", u_tx, normal)
        vis = ok & (cos_i > 1e-9)
        if np.any(vis):
            blocked = occluded_batch(accel, point[vis] + RAY_EPSILON * normal[vis],
                                     np.broadcast_to(tx, (int(vis.sum()), 3)))
            vis_idx = np.where(vis)[0][~blocked]
        else:
            vis_idx = np.array([], dtype=np.int64)
        if len(vis_idx):
            feat = _assemble_features(cfg, hops, vis_idx, first_dir, seg_sum,
                                      u_tx, r_tx, cos_i)
            out[depth] = feat

        if depth == cfg.max_depth:
            break
        # continue the walk: sample the physical incident direction through
        # the lobe mirrored around the arriving ray
        axis = current - 2.0 * np.einsum("ij,ij->i", current, normal)[:, None] * normal
        cont, _, above = sample_scatter_directions(cfg.alpha_r, axis, normal, rng)
        alive = above
        if not np.any(alive):
            break
        hops[-1]["in_dir"] = -cont  # physical arrival at this hop
        hops[-1]["cos_theta_i_sampled"] = np.einsum("ij,ij->i", cont, normal)
        keep_idx = np.where(alive)[0]
        origins = (point + RAY_EPSILON * normal)[keep_idx]
        current = cont[keep_idx]
        seg_sum = seg_sum[keep_idx]
        first_dir = first_dir[keep_idx]
        hops = [{k: v[keep_idx] for k, v in h.items()} for h in hops]
    return out


def _assemble_features(cfg, hops, idx, first_dir, seg_sum, u_tx, r_tx, cos_i_tx):
    """Pack per-hop geometry for the paths selected by idx (NEE at last hop)."""
    d = len(hops)
    selected = [{k: v[idx] for k, v in h.items()} for h in hops]
    last = selected[-1]
    last = dict(last)
    last["in_dir"] = -u_tx[idx]
    last["cos_theta_i"] = cos_i_tx[idx]
    selected[-1] = last
    for j in range(d - 1):
        selected[j] = dict(selected[j])
        selected[j]["cos_theta_i"] = selected[j].pop("cos_theta_i_sampled")
    feat = {
        "n": len(idx),
        "depth": d,
        "k_aoa": -first_dir[idx],
        "k_aod": last["in_dir"],
        "seg_sum": seg_sum[idx],
        "r_tx": r_tx[idx],
        "hops": selected,
    }
    return feat


# ---------------------------------------------------------------------------
# Shading: turn features + materials into powers / transfer matrices


def _endpoint_factors(cfg: SceneConfig, k_aod: np.ndarray, k_aoa: np.ndarray):
    """TX- and RX-side constants per path.

    Returns (v_tx, w_rx): v_tx is the departing field 2-vector on the global
    transverse basis at k_aod (pattern times beamforming weight); w_rx is the
    receive row vector, conj(C_R) composed with the basis change from the
    global frame at the arrival propagation direction to the local frame of
    the look direction.
    """
    k_aod = np.atleast_2d(k_aod)
    k_aoa = np.atleast_2d(k_aoa)
    lam = cfg.wavelength

    # TX side
    k_local = cfg.tx.to_local(k_aod)
    th, ph = angles_from_direction(k_local)
    c_th, c_ph = cfg.tx_pattern(th, ph)
    w_arr = tx_array_weight(cfg.tx_array, cfg.tx_precoding, k_local)
    th_l, ph_l = spherical_basis(k_local)
    th_g, ph_g = spherical_basis(k_aod)
    r = cfg.tx.rotation
    b11 = np.einsum("ij,ij->i", th_g, th_l @ r.T)
    b12 = np.einsum("ij,ij->i", th_g, ph_l @ r.T)
    b21 = np.einsum("ij,ij->i", ph_g, th_l @ r.T)
    b22 = np.einsum("ij,ij->i", ph_g, ph_l @ r.T)
    v_tx = np.stack([b11 * c_th + b12 * c_ph, b21 * c_th + b22 * c_ph], axis=1)
    v_tx *= np.atleast_1d(w_arr)[:, None]

    # RX side: look direction is the reversed propagation direction
    u = -k_aoa
    u_local = cfg.rx.to_local(u)
    th_r, ph_r = angles_from_direction(u_local)
    c_th_r, c_ph_r = cfg.rx_pattern(th_r, ph_r)
    th_lr, ph_lr = spherical_basis(u_local)
    th_ga, ph_ga = spherical_basis(k_aoa)
    rr = cfg.rx.rotation
    g11 = np.einsum("ij,ij->i", th_lr @ rr.T, th_ga)
    g12 = np.einsum("ij,ij->i", th_lr @ rr.T, ph_ga)
    g21 = np.einsum("ij,ij->i", ph_lr @ rr.T, th_ga)
    g22 = np.einsum("ij,ij->i", ph_lr @ rr.T, ph_ga)
    w_rx = np.stack([np.conj(c_th_r) * g11 + np.conj(c_ph_r) * g21,
                     np.conj(c_th_r) * g12 + np.conj(c_ph_r) * g22], axis=1)
    return v_tx, w_rx


def _hop_rotations(hop):
    """Constant 2x2 rotations taking global transverse components into the
    local (perp, par) frame at arrival and back out at departure."""
    in_dir = hop["in_dir"]
    out_dir = hop["out_dir"]
    n = hop["normal"]
    e_perp_i, e_par_i = incidence_basis(in_dir, n)
    e_perp_o, e_par_o = incidence_basis(out_dir, n)
    th_i, ph_i = spherical_basis(in_dir)
    th_o, ph_o = spherical_basis(out_dir)
    dot = lambda a, b: np.einsum("ij,ij->i", a, b)
    r_in = np.stack([np.stack([dot(e_perp_i, th_i), dot(e_perp_i, ph_i)], axis=1),
                     np.stack([dot(e_par_i, th_i), dot(e_par_i, ph_i)], axis=1)], axis=1)
    r_out = np.stack([np.stack([dot(th_o, e_perp_o), dot(th_o, e_par_o)], axis=1),
                      np.stack([dot(ph_o, e_perp_o), dot(ph_o, e_par_o)], axis=1)], axis=1)
    return r_in, r_out


def _materials_at_hops(cfg: SceneConfig, feat, params=None):
    """Material parameters per hop: list of dicts (arrays or Vars)."""
    src = cfg.materials
    hops = feat["hops"]
    if isinstance(src, MaterialField):
        pts = np.concatenate([h["point"] for h in hops], axis=0)
        vals = src.evaluate(pts, params=params)
        n = feat["n"]
        out = []
        for j in range(feat["depth"]):
            sl = slice(j * n, (j + 1) * n)
            out.append({k: (vals[k][sl] if k != "alpha_r" else vals[k]) for k in vals})
        return out
    table = {k: np.array([getattr(m, k) for m in src])
             for k in ("eps_r", "sigma", "s", "xpd")}
    out = []
    for h in hops:
        ids = np.clip(h["material"], 0, len(src) - 1)
        out.append({k: v[ids] for k, v in table.items()})
    return out


def _fresnel_xpd_core(mat, cos_theta_i, frequency_hz):
    """Per-hop polarization core diag(r_TE, r_TM) @ X(xpd), as pair-matrix."""
    from .constants import VACUUM_PERMITTIVITY
    from .materials import fresnel_pair

    eta_re = mat["eps_r"]
    eta_im = -1.0 * mat["sigma"] / (2.0 * np.pi * frequency_hz * VACUUM_PERMITTIVITY)
    r_te, r_tm = fresnel_pair(eta_re, eta_im, cos_theta_i)
    a = ad.sqrt(1.0 - mat["xpd"] + 1e-300)
    b = ad.sqrt(mat["xpd"] + 1e-300)
    return l2.m2((r_te[0] * a, r_te[1] * a), (r_te[0] * b, r_te[1] * b),
                 (r_tm[0] * b, r_tm[1] * b), (r_tm[0] * a, r_tm[1] * a))


def shade_depth_class(cfg: SceneConfig, feat: dict, params=None):
    """Powers (and branch scalars) for the paths of one depth class.

    Returns dict with keys ``power`` (total, per path), ``amp2``,
    ``pre_dir``, ``pre_diff``, ``w_dir``, ``w_diff`` where the ``w_*`` are the
    material branch weights so that
    power = amp2 * (pre_dir * w_dir + pre_diff * w_diff) * mc * P_t.
    """
    d = feat["depth"]
    hops = feat["hops"]
    lam = cfg.wavelength
    f_table = normalization_table(cfg.alpha_r)
    mats = _materials_at_hops(cfg, feat, params=params)

    v_tx, w_rx = _endpoint_factors(cfg, feat["k_aod"], feat["k_aoa"])
    v_pair = ((v_tx[:, 0].real, v_tx[:, 0].imag), (v_tx[:, 1].real, v_tx[:, 1].imag))
    w_pair = ((w_rx[:, 0].real, w_rx[:, 0].imag), (w_rx[:, 1].real, w_rx[:, 1].imag))

    chain = None
    pre_dir = (lam / (4.0 * np.pi)) ** 2 * np.ones(feat["n"])
    pre_diff = pre_dir.copy()
    w_dir = 1.0
    w_diff = 1.0
    for j in range(d):
        hop = hops[j]
        cos_i = hop["cos_theta_i"]
        cos_s = hop["cos_theta_s"]
        cos_ratio = cos_i / cos_s
        core = _fresnel_xpd_core(mats[j], cos_i, cfg.frequency_hz)
        r_in, r_out = _hop_rotations(hop)
        t_j = l2.m2_mul(l2.m2_from_real(r_out), l2.m2_mul(core, l2.m2_from_real(r_in)))
        chain = t_j if chain is None else l2.m2_mul(chain, t_j)

        last = j == d - 1
        f_norm = np.asarray(f_table(np.clip(cos_i, 0.0, 1.0)))
        one_minus_s2 = 1.0 - mats[j]["s"] * mats[j]["s"]
        if last:
            spec = hop["in_dir"] + 2.0 * cos_i[:, None] * hop["normal"]
            cos_psi = np.clip(np.einsum("ij,ij->i", spec, hop["out_dir"]), -1.0, 1.0)
            f_s = ((1.0 + cos_psi) / 2.0) ** cfg.alpha_r / f_norm
            pre_dir = pre_dir * cos_ratio * f_s
            pre_diff = pre_diff * (cos_i / np.pi)
            w_dir = w_dir * one_minus_s2
            w_diff = w_diff * mats[j]["s"] * mats[j]["s"]
        else:
            # sampled hop: lobe value cancels against its own pdf
            fold = 4.0 * np.pi / ((cfg.alpha_r + 1.0) * f_norm)
            pre_dir = pre_dir * cos_ratio * fold
            pre_diff = pre_diff * cos_ratio * fold
            w_dir = w_dir * one_minus_s2
            w_diff = w_diff * one_minus_s2

    r_tx2 = feat["r_tx"] * feat["r_tx"]
    pre_dir = pre_dir / r_tx2
    pre_diff = pre_diff / r_tx2

    a_pair = l2.vec2_dot(w_pair, l2.m2_vec(chain, v_pair))
    amp2 = ad.cabs2(a_pair)
    mc = 4.0 * np.pi / cfg.n_rays * cfg.tx_power
    power = (amp2 * (pre_dir * w_dir) + amp2 * (pre_diff * w_diff)) * mc
    return {"power": power, "amp2": amp2, "chain": chain,
            "pre_dir": pre_dir, "pre_diff": pre_diff,
            "w_dir": w_dir, "w_diff": w_diff, "mc": mc}


def _los_record(cfg: SceneConfig):
    """Deterministic line-of-sight contribution, or None when blocked."""
    delta = cfg.rx.position - cfg.tx.position
    dist = float(np.linalg.norm(delta))
    if dist < 1e-9:
        return None
    if cfg.accel is not None and occluded_batch(cfg.accel, cfg.tx.position[None, :],
                                                cfg.rx.position[None, :])[0]:
        return None
    k = delta / dist
    t_total = (cfg.wavelength / (4.0 * np.pi)) / dist * np.eye(2, dtype=np.complex128)
    return {"k_aod": k[None, :], "k_aoa": k[None, :], "t_total": t_total[None, :, :],
            "dist": dist}


def _chunk_ranges(n: int, n_workers: int):
    sizes = [n // n_workers + (1 if i < n % n_workers else 0) for i in range(n_workers)]
    start = 0
    for w, s in enumerate(sizes):
        if s:
            yield w, start, start + s
        start += s


def trace_paths(cfg: SceneConfig) -> PathBatch:
    """Trace and shade all paths into a PathBatch (one sample per branch)."""
    dirs = sample_rx_directions(cfg)
    batches = []
    los = _los_record(cfg)
    if los is not None:
        batches.append(PathBatch(los["k_aod"], los["k_aoa"], los["t_total"], [0], [1.0]))
    for w, lo, hi in _chunk_ranges(cfg.n_rays, cfg.n_workers):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1 + w]))
        feats = _trace_chunk_features(cfg, dirs[lo:hi], rng)
        for depth in sorted(feats):
            feat = feats[depth]
            shade = shade_depth_class(cfg, feat)
            batches.append(_branch_batch(cfg, feat, shade))
    return PathBatch.concatenate(batches)


def _branch_batch(cfg, feat, shade) -> PathBatch:
    """Expand one shaded depth class into per-branch PathSamples."""
    chain = l2.m2_to_complex(shade["chain"])  # (P, 2, 2)
    lamf = cfg.wavelength / (4.0 * np.pi)

    def scaled(pre, w_branch):
        scale = np.sqrt(np.maximum(ad.value_of(pre * w_branch), 0.0) / lamf ** 2) * lamf
        return chain * scale[:, None, None]

    mats, aods, aoas, depths = [], [], [], []
    t_dir = scaled(shade["pre_dir"], shade["w_dir"])
    mats.append(t_dir)
    aods.append(feat["k_aod"])
    aoas.append(feat["k_aoa"])
    depths.append(np.full(feat["n"], feat["depth"]))
    w_diff_val = np.max(np.abs(ad.value_of(shade["w_diff"] * np.ones(feat["n"]))))
    if w_diff_val > 0.0:
        mats.append(scaled(shade["pre_diff"], shade["w_diff"]))
        aods.append(feat["k_aod"])
        aoas.append(feat["k_aoa"])
        depths.append(np.full(feat["n"], feat["depth"]))
    mc = np.full(sum(len(a) for a in aods), 4.0 * np.pi / cfg.n_rays)
    return PathBatch(np.concatenate(aods), np.concatenate(aoas),
                     np.concatenate(mats), np.concatenate(depths), mc)


# ---------------------------------------------------------------------------
# Power integration and spectrum synthesis


def per_element_power(paths: PathBatch, cfg: SceneConfig) -> np.ndarray:
    """Received power per RX element: complex vector of length M.

    Per-ray phase is discarded; each path contributes its real power times
    the element's arrival phase, scaled by the transmit power.
    """
    m = cfg.rx_array.n_elements
    if len(paths) == 0:
        return np.zeros(m, dtype=np.complex128)
    v_tx, w_rx = _endpoint_factors(cfg, paths.k_aod, paths.k_aoa)
    a = np.einsum("pi,pij,pj->p", w_rx, paths.t_total, v_tx)
    power = np.abs(a) ** 2 * paths.mc_weight * cfg.tx_power
    k_local = cfg.rx.to_local(paths.k_aoa)
    phases = np.exp(-2j * np.pi / cfg.wavelength * (cfg.rx_array.element_offsets @ k_local.T))
    return phases @ power


def aoa_spectrum(p_elements: np.ndarray, cfg: SceneConfig,
                 grid=None) -> AoASpectrum:
    """Beamform per-element powers over the local upper hemisphere.

    Grid value is the magnitude of (1/sqrt(M)) sum_m P_m e^(-j 2pi/lambda d_m.k),
    taken so the spectrum is real and nonnegative.
    """
    el, az = grid if grid is not None else cfg.grid()
    p = np.asarray(p_elements, dtype=np.complex128)
    m = cfg.rx_array.n_elements
    if len(p) != m:
        raise ValueError("per-element power length mismatch")
    dirs = grid_directions(el, az)
    steer = np.exp(-2j * np.pi / cfg.wavelength * (dirs @ cfg.rx_array.element_offsets.T))
    e = steer @ p / np.sqrt(m)
    values = np.abs(e).reshape(len(el), len(az))
    meta = {"frequency_hz": cfg.frequency_hz, "n_rays": cfg.n_rays,
            "max_depth": cfg.max_depth, "seed": cfg.seed, "alpha_r": cfg.alpha_r,
            "rx_elements": m, "sampler": cfg.sampler, "n_workers": cfg.n_workers}
    return AoASpectrum(values, el, az, meta=meta)


def synthesize_spectrum(cfg: SceneConfig, grid=None):
    """Trace, integrate and beamform in worker chunks; returns (spectrum, P_m)."""
    dirs = sample_rx_directions(cfg)
    m = cfg.rx_array.n_elements
    p_m = np.zeros(m, dtype=np.complex128)
    los = _los_record(cfg)
    if los is not None:
        batch = PathBatch(los["k_aod"], los["k_aoa"], los["t_total"], [0], [1.0])
        p_m += per_element_power(batch, cfg)
    for w, lo, hi in _chunk_ranges(cfg.n_rays, cfg.n_workers):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1 + w]))
        feats = _trace_chunk_features(cfg, dirs[lo:hi], rng)
        for depth in sorted(feats):
            feat = feats[depth]
            shade = shade_depth_class(cfg, feat)
            power = ad.value_of(shade["power"])
            k_local = cfg.rx.to_local(feat["k_aoa"])
            phases = np.exp(-2j * np.pi / cfg.wavelength *
                            (cfg.rx_array.element_offsets @ k_local.T))
            p_m += phases @ power
    return aoa_spectrum(p_m, cfg, grid=grid), p_m


def integrate_path_gain(cfg: SceneConfig, min_depth: int = 1) -> float:
    """Total traced path gain (received/transmitted power) at depth >= min_depth."""
    dirs = sample_rx_directions(cfg)
    total = 0.0
    if min_depth <= 0:
        los = _los_record(cfg)
        if los is not None:
            batch = PathBatch(los["k_aod"], los["k_aoa"], los["t_total"], [0], [1.0])
            v_tx, w_rx = _endpoint_factors(cfg, batch.k_aod, batch.k_aoa)
            a = np.einsum("pi,pij,pj->p", w_rx, batch.t_total, v_tx)
            total += float(np.sum(np.abs(a) ** 2))
    for w, lo, hi in _chunk_ranges(cfg.n_rays, cfg.n_workers):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1 + w]))
        feats = _trace_chunk_features(cfg, dirs[lo:hi], rng)
        for depth in sorted(feats):
            if depth < min_depth:
                continue
            shade = shade_depth_class(cfg, feats[depth])
            total += float(np.sum(ad.value_of(shade["power"]))) / cfg.tx_power
    return total


# ---------------------------------------------------------------------------
# Closed-form references


def friis_gain(lam: float, distance: float) -> float:
    """Free-space power gain (lambda / 4 pi d)^2 between isotropic antennas."""
    if distance <= 0:
        raise ValueError("distance must be positive")
    return (lam / (4.0 * np.pi * distance)) ** 2


def specular_reference_gain(gamma: float, r_spec: float, lam: float) -> float:
    """Mirror-reflection path gain (lambda gamma / (4 pi r_spec))^2."""
    if r_spec <= 0:
        raise ValueError("r_spec must be positive")
    return (lam * gamma / (4.0 * np.pi * r_spec)) ** 2
