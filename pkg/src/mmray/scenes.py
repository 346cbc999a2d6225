"""Programmatic scene construction and JSON scene-config files."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .antenna import (Precoding, hanning_taper_2d, make_pattern, matched_precoding,
                      single_element, uniform_rectangular_array)
from .constants import wavelength
from .field import MaterialField
from .geometry import TriangleMesh, load_mesh, save_obj
from .materials import RadioMaterial, load_material_table
from .tracer import Pose, SceneConfig, look_at_rotation

CONCRETE = dict(eps_r=5.24, sigma=0.123)


def reflector_mesh(scale: float, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Square two-triangle plate of side ``scale`` meters in the z=0 plane."""
    if scale <= 0:
        raise ValueError("reflector scale must be positive")
    h = scale / 2.0
    c = np.asarray(center, dtype=np.float64)
    v = np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]]) + c
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def box_room_mesh(size_x: float, size_y: float, size_z: float) -> TriangleMesh:
    """Closed rectangular room (12 faces) with inward-facing winding."""
    if min(size_x, size_y, size_z) <= 0:
        raise ValueError("room dimensions must be positive")
    x, y, z = size_x / 2.0, size_y / 2.0, size_z
    v = np.array([[-x, -y, 0], [x, -y, 0], [x, y, 0], [-x, y, 0],
                  [-x, -y, z], [x, -y, z], [x, y, z], [-x, y, z]], dtype=np.float64)
    quads = [(0, 1, 2, 3),   # floor (normal +z inward)
             (7, 6, 5, 4),   # ceiling
             (4, 5, 1, 0),   # y = -y wall
             (6, 7, 3, 2),   # y = +y wall
             (7, 4, 0, 3),   # x = -x wall
             (5, 6, 2, 1)]   # x = +x wall
    faces = []
    for a, b, c_, d in quads:
        faces.append([a, b, c_])
        faces.append([a, c_, d])
    return TriangleMesh(v, np.array(faces))


def symmetric_tx_rx(dist: float, incidence_deg: float, target=(0.0, 0.0, 0.0)):
    """TX/RX mirrored about the z axis, both ``dist`` from the target point."""
    th = np.radians(incidence_deg)
    t = np.asarray(target, dtype=np.float64)
    tx = t + np.array([-dist * np.sin(th), 0.0, dist * np.cos(th)])
    rx = t + np.array([dist * np.sin(th), 0.0, dist * np.cos(th)])
    return tx, rx


def build_scene(kind: str, **kw) -> SceneConfig:
    """Canonical experiment scenes.

    single_reflector: square plate at the origin with TX/RX mirrored at a
    common incidence angle and distance (defaults: 45 degrees, 25 m).
    box_room: closed room with TX and RX inside.
    """
    if kind == "single_reflector":
        scale = kw.pop("scale", 1.0)
        dist = kw.pop("dist", 25.0)
        incidence_deg = kw.pop("incidence_deg", 45.0)
        tx_dist = kw.pop("tx_dist", dist)
        mat = kw.pop("material", None) or RadioMaterial(
            alpha_r=kw.get("alpha_r", 100.0), s=0.0, xpd=0.0, **CONCRETE)
        mesh = reflector_mesh(scale)
        tx, rx = symmetric_tx_rx(dist, incidence_deg)
        if tx_dist != dist:
            th = np.radians(incidence_deg)
            tx = np.array([-tx_dist * np.sin(th), 0.0, tx_dist * np.cos(th)])
        return SceneConfig(mesh=mesh, materials=[mat], tx=Pose(tx), rx=Pose(rx), **kw)
    if kind == "box_room":
        size = kw.pop("size", (4.0, 5.0, 3.0))
        mat = kw.pop("material", None) or RadioMaterial(
            alpha_r=kw.get("alpha_r", 100.0), s=0.0, xpd=0.0, **CONCRETE)
        mesh = box_room_mesh(*size)
        tx = kw.pop("tx_position", (-1.0, -1.5, 1.5))
        rx = kw.pop("rx_position", (1.0, 1.5, 1.5))
        return SceneConfig(mesh=mesh, materials=[mat], tx=Pose(np.asarray(tx, float)),
                           rx=Pose(np.asarray(rx, float)), **kw)
    raise ValueError(f"unknown scene kind {kind!r}")


# ---------------------------------------------------------------------------
# JSON scene configuration files


def _pose_from_json(obj: dict) -> Pose:
    pos = np.asarray(obj["position"], dtype=np.float64)
    if "look_at" in obj:
        rot = look_at_rotation(pos, obj["look_at"], up=obj.get("up", (0, 0, 1)))
    elif "rotation" in obj:
        rot = np.asarray(obj["rotation"], dtype=np.float64)
    else:
        rot = np.eye(3)
    return Pose(pos, rot)


def _array_from_json(obj: dict | None, lam: float):
    if not obj:
        return single_element(lam)
    nx, ny = int(obj.get("nx", 1)), int(obj.get("ny", 1))
    spacing = obj.get("spacing_wavelengths", 0.5) * lam
    return uniform_rectangular_array(nx, ny, lam, spacing=spacing)


def _precoding_from_json(obj: dict | None, array, pose: Pose) -> Precoding | None:
    if not obj:
        return None
    kind = obj.get("type", "uniform")
    taper = None
    if obj.get("hanning"):
        nx, ny = obj.get("nx"), obj.get("ny")
        if nx is None:
            n = int(round(np.sqrt(array.n_elements)))
            nx = ny = n
        taper = hanning_taper_2d(int(nx), int(ny))
    if kind == "uniform":
        w = np.ones(array.n_elements) if taper is None else taper
        return Precoding(w)
    if kind == "matched":
        if "direction" in obj:
            k_local = np.asarray(obj["direction"], dtype=np.float64)
            k_local = k_local / np.linalg.norm(k_local)
        else:
            target = np.asarray(obj["target"], dtype=np.float64)
            k_global = target - pose.position
            k_global /= np.linalg.norm(k_global)
            k_local = pose.to_local(k_global)
        return matched_precoding(array, k_local, taper=taper)
    if kind == "weights":
        return Precoding(np.asarray(obj["re"], float) + 1j * np.asarray(obj["im"], float))
    raise ValueError(f"unknown precoding type {kind!r}")


def load_scene_config(path: str | Path) -> SceneConfig:
    """Build a SceneConfig from a JSON file.

    Keys: mesh (path or {kind, ...}), materials (path or inline list),
    material_field (checkpoint path), tx/rx pose blocks, frequency_hz,
    n_rays, max_depth, seed, tx_power, alpha_r, sampler, n_workers,
    el_step_deg, az_step_deg.
    """
    path = Path(path)
    cfg = json.loads(path.read_text())
    lam = wavelength(cfg.get("frequency_hz", 28e9))
    alpha_r = cfg.get("alpha_r", 100.0)

    mesh = None
    mesh_spec = cfg.get("mesh")
    if isinstance(mesh_spec, str):
        mesh_path = Path(mesh_spec)
        if not mesh_path.is_absolute():
            mesh_path = path.parent / mesh_path
        material_map = cfg.get("material_map")
        if material_map and not Path(material_map).is_absolute():
            material_map = path.parent / material_map
        mesh = load_mesh(mesh_path, material_map=material_map)
    elif isinstance(mesh_spec, dict):
        kind = mesh_spec["kind"]
        if kind == "single_reflector":
            mesh = reflector_mesh(mesh_spec.get("scale", 1.0))
        elif kind == "box_room":
            mesh = box_room_mesh(*mesh_spec.get("size", (4.0, 5.0, 3.0)))
        else:
            raise ValueError(f"unknown mesh kind {kind!r}")

    if "material_field" in cfg:
        fp = Path(cfg["material_field"])
        if not fp.is_absolute():
            fp = path.parent / fp
        materials = MaterialField.load(fp)
    elif isinstance(cfg.get("materials"), str):
        mp = Path(cfg["materials"])
        if not mp.is_absolute():
            mp = path.parent / mp
        materials = load_material_table(mp, alpha_r=alpha_r)
    elif isinstance(cfg.get("materials"), list):
        materials = [RadioMaterial(alpha_r=rec.get("alpha_r", alpha_r),
                                   **{k: rec[k] for k in ("eps_r", "sigma", "s", "xpd")
                                      if k in rec})
                     for rec in cfg["materials"]]
    else:
        materials = [RadioMaterial(alpha_r=alpha_r, **CONCRETE)]

    tx = _pose_from_json(cfg["tx"])
    rx = _pose_from_json(cfg["rx"])
    tx_array = _array_from_json(cfg["tx"].get("array"), lam)
    rx_array = _array_from_json(cfg["rx"].get("array"), lam)
    tx_precoding = _precoding_from_json(cfg["tx"].get("precoding"), tx_array, tx)

    return SceneConfig(
        mesh=mesh, materials=materials, tx=tx, rx=rx,
        frequency_hz=cfg.get("frequency_hz", 28e9),
        n_rays=int(cfg.get("n_rays", 100_000)),
        max_depth=int(cfg.get("max_depth", 1)),
        seed=int(cfg.get("seed", 0)),
        tx_power=cfg.get("tx_power", 1.0),
        alpha_r=alpha_r,
        tx_pattern=make_pattern(cfg["tx"].get("pattern", "isotropic")),
        rx_pattern=make_pattern(cfg["rx"].get("pattern", "isotropic")),
        tx_array=tx_array, rx_array=rx_array, tx_precoding=tx_precoding,
        sampler=cfg.get("sampler", "fibonacci"),
        n_workers=int(cfg.get("n_workers", 1)),
        el_step_deg=cfg.get("el_step_deg", 1.0),
        az_step_deg=cfg.get("az_step_deg", 1.0),
    )


def write_scene_files(cfg_dict: dict, mesh: TriangleMesh, out_dir: str | Path,
                      name: str = "scene") -> Path:
    """Emit mesh OBJ + config JSON; returns the config path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh_path = out / f"{name}.obj"
    save_obj(mesh, mesh_path)
    cfg = dict(cfg_dict)
    cfg["mesh"] = mesh_path.name
    cfg_path = out / f"{name}.json"
    cfg_path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return cfg_path
