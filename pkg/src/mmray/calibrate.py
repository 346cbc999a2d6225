"""Loss computation, Adam optimization, and the calibration loops.

Material calibration fits the neural material field to measured AoA power
spectra by tracing on the configured geometry, synthesizing the spectrum
differentiably, and descending the log mean absolute error. One measurement
(receiver pose) is processed per step; Monte Carlo directions are frozen
within a step and resampled from a fresh stream each step, which keeps the
per-step gradient exact for the sampled estimate while the stochastic
sequence stays unbiased.

Geometry calibration optimizes rigid offsets of a single reflector through
the analytic soft-edged plate model in :mod:`mmray.diffplate`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .diffplate import PlateScene, plate_spectrum_cells
from .field import MaterialField
from .spectra import AoASpectrum, direction_of, grid_directions
from .tracer import (Pose, SceneConfig, _endpoint_factors, _los_record,
                     _trace_chunk_features, PathBatch, per_element_power,
                     sample_rx_directions, shade_depth_class, look_at_rotation)

POWER_FLOOR = 1e-15


class CalibrationDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Loss


def log_mae(pred, meas, floor: float = POWER_FLOOR):
    """Mean absolute difference of natural-log powers.

    Accepts AoASpectrum pairs (same grid), or arrays/Vars over the same
    support. Entries are floored before the log so empty cells stay finite.
    """
    if isinstance(pred, AoASpectrum) and isinstance(meas, AoASpectrum):
        if pred.shape != meas.shape or not np.allclose(pred.el_deg, meas.el_deg) \
                or not np.allclose(pred.az_deg, meas.az_deg):
            raise ValueError("spectra must share the same grid")
        pred, meas = pred.values.ravel(), meas.values.ravel()
    meas = np.maximum(np.asarray(ad.value_of(meas), dtype=np.float64).ravel(), floor)
    if meas.size == 0:
        raise ValueError("empty comparison support")
    pv = ad.value_of(pred).ravel()
    if isinstance(pred, ad.Var):
        pred = pred if pv.ndim == 1 else _flatten(pred)
        pred = ad.where(pv.ravel() > floor, pred, pred * 0.0 + floor)
    else:
        pred = np.maximum(pv, floor)
    diff = ad.log(pred) - np.log(meas)
    return ad.mean(ad.where(ad.value_of(diff) >= 0.0, diff, -1.0 * diff))


def _flatten(v: ad.Var) -> ad.Var:
    shape = v.value.shape
    return v.tape._record(v.value.ravel(), (v.id,), lambda adj: (adj.reshape(shape),))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment state for the bias-corrected Adam update."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n_params: int, lr: float = 5e-4, **kw) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), lr=lr, **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState):
    """One bias-corrected Adam update; returns (new_params, state)."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter/gradient/state dimension mismatch")
    if not np.all(np.isfinite(grads)):
        raise CalibrationDiverged("non-finite gradients; aborting step")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), state


# ---------------------------------------------------------------------------
# Measurements


@dataclass
class Measurement:
    """One calibration observation at a receiver pose."""

    rx: Pose
    spectrum: AoASpectrum | None = None
    sparse: list | None = None          # [[az_deg, power_dbm], ...] at el = 0
    tx: Pose | None = None

    def __post_init__(self):
        if self.spectrum is None and not self.sparse:
            raise ValueError("measurement needs a spectrum or sparse samples")
        if self.sparse:
            for _, p in self.sparse:
                if 10.0 ** ((p - 30.0) / 10.0) <= 0.0:
                    raise ValueError("sparse powers must be positive")


def load_measurements(dataset_dir: str | Path) -> list[Measurement]:
    """Directory of per-pose JSON files, sorted by name.

    Each file: {"rx_pose": {"position": [...], "look_at": [...]},
    "spectrum_csv_path": "...", or "sparse": [[az_deg, power_dbm], ...],
    optional "tx_pose"}.
    """
    dataset_dir = Path(dataset_dir)
    files = sorted(dataset_dir.glob("*.json"))
    files = [f for f in files if not f.name.endswith(".meta.json")]
    out = []
    for f in files:
        rec = json.loads(f.read_text())
        pose = _pose_from_record(rec["rx_pose"])
        tx = _pose_from_record(rec["tx_pose"]) if "tx_pose" in rec else None
        if "spectrum_csv_path" in rec:
            p = Path(rec["spectrum_csv_path"])
            if not p.is_absolute():
                p = f.parent / p
            out.append(Measurement(rx=pose, spectrum=AoASpectrum.load_csv(p), tx=tx))
        else:
            out.append(Measurement(rx=pose, sparse=rec["sparse"], tx=tx))
    if not out:
        raise ValueError(f"no measurement files in {dataset_dir}")
    return out


def save_measurement(meas: Measurement, path: str | Path) -> None:
    path = Path(path)
    rec = {"rx_pose": {"position": meas.rx.position.tolist(),
                       "rotation": meas.rx.rotation.tolist()}}
    if meas.tx is not None:
        rec["tx_pose"] = {"position": meas.tx.position.tolist(),
                          "rotation": meas.tx.rotation.tolist()}
    if meas.spectrum is not None:
        csv = path.with_suffix(".spectrum.csv")
        meas.spectrum.save_csv(csv)
        rec["spectrum_csv_path"] = csv.name
    else:
        rec["sparse"] = meas.sparse
    path.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


def _pose_from_record(rec: dict) -> Pose:
    pos = np.asarray(rec["position"], dtype=np.float64)
    if "look_at" in rec:
        return Pose(pos, look_at_rotation(pos, rec["look_at"]))
    if "rotation" in rec:
        return Pose(pos, np.asarray(rec["rotation"], dtype=np.float64))
    return Pose(pos)


# ---------------------------------------------------------------------------
# Differentiable spectrum synthesis (material mode)


def predicted_cells(cfg: SceneConfig, params, dirs_local_grid: np.ndarray,
                    seed: int | None = None):
    """Floored spectrum magnitudes over grid cells, taped through ``params``.

    ``params`` is the flat MaterialField weight vector (Var or ndarray);
    geometry, sampling and visibility are detached constants.
    """
    run_cfg = cfg if seed is None else replace(cfg, seed=seed)
    dirs = sample_rx_directions(run_cfg)
    m = cfg.rx_array.n_elements
    k0 = 2.0 * np.pi / cfg.wavelength
    los = _los_record(run_cfg)
    p_re = np.zeros(m)
    p_im = np.zeros(m)
    if los is not None:
        batch = PathBatch(los["k_aod"], los["k_aoa"], los["t_total"], [0], [1.0])
        p_los = per_element_power(batch, run_cfg)
        p_re = p_re + p_los.real
        p_im = p_im + p_los.imag
    rng = np.random.default_rng(np.random.SeedSequence([run_cfg.seed, 1]))
    feats = _trace_chunk_features(run_cfg, dirs, rng)
    for depth in sorted(feats):
        feat = feats[depth]
        shade = shade_depth_class(run_cfg, feat, params=params)
        power = shade["power"]
        k_local = run_cfg.rx.to_local(feat["k_aoa"])
        phase = -k0 * (cfg.rx_array.element_offsets @ k_local.T)
        p_re = ad.matmul(np.cos(phase), power) + p_re
        p_im = ad.matmul(np.sin(phase), power) + p_im
    steer = np.exp(-1j * k0 * (dirs_local_grid @ cfg.rx_array.element_offsets.T))
    inv = 1.0 / np.sqrt(m)
    e_re = (ad.matmul(steer.real, p_re) - ad.matmul(steer.imag, p_im)) * inv
    e_im = (ad.matmul(steer.real, p_im) + ad.matmul(steer.imag, p_re)) * inv
    e2 = e_re * e_re + e_im * e_im
    floor2 = POWER_FLOOR ** 2
    return ad.sqrt(ad.where(ad.value_of(e2) > floor2, e2, e2 * 0.0 + floor2))


def _measurement_support(cfg: SceneConfig, meas: Measurement):
    """(local grid directions, reference powers) for one measurement."""
    if meas.spectrum is not None:
        dirs = grid_directions(meas.spectrum.el_deg, meas.spectrum.az_deg)
        return dirs, meas.spectrum.values.ravel()
    az = np.array([a for a, _ in meas.sparse], dtype=np.float64)
    p_w = np.array([10.0 ** ((p - 30.0) / 10.0) for _, p in meas.sparse])
    return direction_of(np.zeros_like(az), az), p_w


def calibrate_materials(cfg: SceneConfig, measurements: list[Measurement],
                        epochs: int = 100, lr: float = 5e-4,
                        checkpoint_dir: str | Path | None = None,
                        checkpoint_every: int = 0):
    """Train the neural material field against measured spectra.

    Returns (field, history) where history is the per-step loss list. The
    field inside ``cfg.materials`` is updated in place.
    """
    if not isinstance(cfg.materials, MaterialField):
        raise TypeError("material calibration needs cfg.materials = MaterialField")
    if not measurements:
        raise ValueError("need at least one measurement")
    mat_field = cfg.materials
    params = mat_field.flatten()
    state = AdamState.init(len(params), lr=lr)
    history: list[float] = []
    step = 0
    for epoch in range(epochs):
        for i, meas in enumerate(measurements):
            run_cfg = replace(cfg, rx=meas.rx,
                              tx=meas.tx if meas.tx is not None else cfg.tx)
            dirs_grid, ref = _measurement_support(cfg, meas)
            tape = ad.Tape()
            pvar = tape.var(params)
            cells = predicted_cells(run_cfg, pvar, dirs_grid,
                                    seed=_step_seed(cfg.seed, step))
            loss = log_mae(cells, ref)
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                raise CalibrationDiverged(
                    f"loss diverged at epoch {epoch} measurement {i}: {loss_val}")
            grads = ad.grad(loss, [pvar])[0]
            params, state = adam_step(params, grads, state)
            mat_field.set_flat(params)
            history.append(loss_val)
            step += 1
        if checkpoint_dir and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            out = Path(checkpoint_dir)
            out.mkdir(parents=True, exist_ok=True)
            mat_field.save(out / f"field_epoch{epoch + 1:04d}.ckpt")
    return mat_field, history


def _step_seed(base_seed: int, step: int) -> int:
    return int(np.random.SeedSequence([base_seed, 7777, step]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Geometry calibration

FREE_PARAM_NAMES = ("tx", "ty", "tz", "rx", "ry", "rz")


def plate_loss_fn(scene: PlateScene, reference: AoASpectrum, free: list[str],
                  base_params: np.ndarray, seed: int, freeze_masks: bool = False):
    """Closure (free-param vector -> loss) with frozen sampling for one step."""
    cfg = replace_scene_seed(scene, seed)
    dirs = sample_rx_directions(cfg.as_scene_config())
    gdirs = grid_directions(reference.el_deg, reference.az_deg)
    ref = reference.values.ravel()
    idx = [FREE_PARAM_NAMES.index(n) for n in free]
    masks_holder = {}

    def full_params(x):
        if isinstance(x, ad.Var):
            scatter = np.zeros((len(idx), 6))
            for row, j in enumerate(idx):
                scatter[row, j] = 1.0
            base = base_params.copy()
            base[idx] = 0.0
            return ad.matmul(x, scatter) + base
        out = base_params.copy()
        out[idx] = x
        return out

    def loss_fn(x):
        p = full_params(x)
        frozen = masks_holder.get("m") if freeze_masks else None
        cells, masks = plate_spectrum_cells(cfg, _as_list(p), dirs, gdirs,
                                            frozen_masks=frozen)
        if freeze_masks and "m" not in masks_holder:
            masks_holder["m"] = masks
        return log_mae(cells, ref, floor=scene.power_floor)

    return loss_fn


def _as_list(p):
    """Index a params vector (Var or ndarray) into six scalars."""
    return [p[i] for i in range(6)]


def replace_scene_seed(scene: PlateScene, seed: int) -> PlateScene:
    return replace(scene, seed=seed)


def calibrate_geometry(scene: PlateScene, reference: AoASpectrum,
                       free_params: list[str], initial: dict[str, float],
                       iters: int = 200, lr: float = 0.02):
    """Recover rigid plate offsets by Adam descent on the spectrum log-MAE.

    Returns (recovered dict, trajectory array (iters+1, n_free), history).
    """
    for name in free_params:
        if name not in FREE_PARAM_NAMES:
            raise ValueError(f"unknown parameter {name!r}")
    base = np.zeros(6)
    x = np.array([initial.get(n, 0.0) for n in free_params], dtype=np.float64)
    state = AdamState.init(len(x), lr=lr)
    traj = [x.copy()]
    history: list[float] = []
    for it in range(iters):
        loss_fn = plate_loss_fn(scene, reference, free_params, base,
                                seed=_step_seed(scene.seed, it))
        tape = ad.Tape()
        xv = tape.var(x)
        loss = loss_fn(xv)
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise CalibrationDiverged(f"geometry loss diverged at iter {it}")
        grads = ad.grad(loss, [xv])[0]
        x, state = adam_step(x, grads, state)
        traj.append(x.copy())
        history.append(loss_val)
    recovered = {n: float(v) for n, v in zip(free_params, x)}
    return recovered, np.asarray(traj), history
