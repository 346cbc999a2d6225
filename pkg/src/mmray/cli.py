"""Command-line harness: simulation, convergence studies and calibration.

Every command honors --seed and writes outputs alongside a JSON metadata
sidecar sufficient to re-run it; re-running with the same seed and worker
count reproduces output files byte for byte. Values are written in watts;
pass --db where a command supports it to emit decibels at output time.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .calibrate import (calibrate_geometry, calibrate_materials, load_measurements,
                        log_mae, Measurement)
from .diffplate import PlateScene, plate_spectrum
from .field import MaterialField
from .materials import RadioMaterial, complex_permittivity, fresnel_coeffs
from .metrics import evaluate_spectra
from .scenes import (CONCRETE, box_room_mesh, build_scene, load_scene_config,
                     reflector_mesh, symmetric_tx_rx, write_scene_files)
from .spectra import AoASpectrum
from .tracer import (Pose, SceneConfig, integrate_path_gain, look_at_rotation,
                     specular_reference_gain, synthesize_spectrum)


class CliError(RuntimeError):
    pass


def _write_sidecar(path: Path, payload: dict) -> None:
    path.with_suffix(path.suffix + ".meta.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _apply_overrides(cfg: SceneConfig, args) -> SceneConfig:
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.rays is not None:
        over["n_rays"] = args.rays
    if args.max_depth is not None:
        over["max_depth"] = args.max_depth
    if args.alpha_r is not None:
        over["alpha_r"] = args.alpha_r
    return replace(cfg, **over) if over else cfg


def cmd_simulate(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise CliError(f"scene config not found: {cfg_path}")
    try:
        cfg = load_scene_config(cfg_path)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc
    cfg = _apply_overrides(cfg, args)
    spec, p_m = synthesize_spectrum(cfg)
    out = Path(args.out or "spectrum.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.db:
        db = AoASpectrum(np.maximum(spec.to_db() + 400.0, 0.0), spec.el_deg,
                         spec.az_deg, meta=spec.meta)
        db.save_csv(out, meta={"units": "dB+400", "config": str(cfg_path)})
    else:
        spec.save_csv(out, meta={"units": "W", "config": str(cfg_path),
                                 "tx_position": cfg.tx.position.tolist(),
                                 "rx_position": cfg.rx.position.tolist()})
    print(f"wrote {out} (peak {spec.values.max():.6e} W at "
          f"el/az {spec.peak_direction()})")
    return 0


def _converge_scene(scale: float, alpha_r: float, args, dist: float = 25.0,
                    incidence_deg: float = 45.0, tx_dist: float | None = None) -> SceneConfig:
    mat = RadioMaterial(alpha_r=alpha_r, s=0.0, xpd=0.0, **CONCRETE)
    cfg = build_scene("single_reflector", scale=scale, dist=dist,
                      incidence_deg=incidence_deg, material=mat, alpha_r=alpha_r,
                      tx_dist=tx_dist if tx_dist is not None else dist,
                      n_rays=args.rays or 1_000_000, max_depth=1,
                      seed=args.seed if args.seed is not None else 0)
    return cfg


def _reference_gain(cfg: SceneConfig, incidence_deg: float, r_spec: float) -> float:
    eta = complex_permittivity(CONCRETE["eps_r"], CONCRETE["sigma"], cfg.frequency_hz)
    _, r_tm = fresnel_coeffs(eta, np.radians(incidence_deg))
    return specular_reference_gain(abs(r_tm), r_spec, cfg.wavelength)


def cmd_converge(args) -> int:
    scales = [float(s) for s in args.scales.split(",")]
    alphas = [float(a) for a in args.alphas.split(",")]
    if not scales or not alphas:
        raise CliError("need non-empty scale and alpha sweeps")
    rows = ["scale_m,alpha_r,gain_db,reference_db,deviation_db"]
    for alpha in alphas:
        for scale in scales:
            cfg = _converge_scene(scale, alpha, args)
            gain = integrate_path_gain(cfg, min_depth=1)
            ref = _reference_gain(cfg, 45.0, 50.0)
            dev = 10.0 * np.log10(gain / ref)
            rows.append(f"{scale:.17g},{alpha:.17g},{10 * np.log10(gain):.10f},"
                        f"{10 * np.log10(ref):.10f},{dev:.10f}")
            print(f"scale {scale:8.2f} m  alpha {alpha:7.1f}: deviation {dev:+.3f} dB")
    out = Path(args.out or "converge.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(rows) + "\n")
    _write_sidecar(out, {"command": "converge", "scales": scales, "alphas": alphas,
                         "rays": args.rays or 1_000_000, "seed": args.seed or 0})
    print(f"wrote {out}")
    return 0


def cmd_deviation_sweep(args) -> int:
    axis = args.axis
    rows = []
    seed = args.seed if args.seed is not None else 0
    if axis == "directivity":
        alphas = [float(a) for a in (args.alphas or "10,20,40,60,80,100,120").split(",")]
        scales = [float(s) for s in (args.scales or "5,25,200").split(",")]
        rows.append("scale_m,alpha_r,deviation_db")
        for scale in scales:
            for alpha in alphas:
                cfg = _converge_scene(scale, alpha, args)
                dev = 10 * np.log10(integrate_path_gain(cfg, 1)
                                    / _reference_gain(cfg, 45.0, 50.0))
                rows.append(f"{scale:.17g},{alpha:.17g},{dev:.10f}")
                print(f"scale {scale:6.1f} alpha {alpha:7.1f}: {dev:+.3f} dB")
    elif axis == "distance":
        dists = [float(d) for d in (args.distances or "1,2,5,10,15,25,35,50").split(",")]
        rows.append("tx_dist_m,deviation_db")
        for d1 in dists:
            cfg = _converge_scene(5.0, 120.0, args, dist=25.0, tx_dist=d1)
            ref = _reference_gain(cfg, 45.0, d1 + 25.0)
            dev = 10 * np.log10(integrate_path_gain(cfg, 1) / ref)
            rows.append(f"{d1:.17g},{dev:.10f}")
            print(f"tx dist {d1:6.1f} m: {dev:+.3f} dB")
    elif axis == "incident_angle":
        angles = [float(a) for a in (args.angles or "0,10,20,30,40,50,60,70,75,80,85").split(",")]
        alphas = [float(a) for a in (args.alphas or "10,50,120").split(",")]
        rows.append("incidence_deg,alpha_r,deviation_db")
        for alpha in alphas:
            for ang in angles:
                cfg = _converge_scene(200.0, alpha, args, incidence_deg=ang)
                dev = 10 * np.log10(integrate_path_gain(cfg, 1)
                                    / _reference_gain(cfg, ang, 50.0))
                rows.append(f"{ang:.17g},{alpha:.17g},{dev:.10f}")
                print(f"angle {ang:5.1f} alpha {alpha:7.1f}: {dev:+.3f} dB")
    else:
        raise CliError(f"unknown sweep axis: {axis}")
    out = Path(args.out or f"deviation_{axis}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(rows) + "\n")
    _write_sidecar(out, {"command": "deviation-sweep", "axis": axis, "seed": seed,
                         "rays": args.rays or 1_000_000})
    print(f"wrote {out}")
    return 0


def cmd_calibrate(args) -> int:
    out = Path(args.out or "calibration")
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    if args.mode == "materials":
        dataset = Path(args.dataset)
        if not dataset.is_dir():
            raise CliError(f"dataset directory not found: {dataset}")
        try:
            measurements = load_measurements(dataset)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise CliError(f"scene config not found: {cfg_path}")
        cfg = _apply_overrides(load_scene_config(cfg_path), args)
        field = MaterialField.init_random(seed=seed, alpha_r=cfg.alpha_r)
        cfg = replace(cfg, materials=field, seed=seed)
        n_train = max(1, int(round(len(measurements) * 0.8)))
        train, held = measurements[:n_train], measurements[n_train:]
        field, history = calibrate_materials(
            cfg, train, epochs=args.epochs, lr=args.lr,
            checkpoint_dir=out, checkpoint_every=args.checkpoint_every)
        field.save(out / "field_final.ckpt")
        _write_history(out / "loss_history.csv", history)
        report = {"train_steps": len(history), "final_loss": history[-1] if history else None}
        if held:
            held_losses = []
            for m in held:
                run = replace(cfg, rx=m.rx)
                pred, _ = synthesize_spectrum(run, grid=(m.spectrum.el_deg,
                                                         m.spectrum.az_deg))
                held_losses.append(float(np.asarray(log_mae(pred, m.spectrum))))
                rep = evaluate_spectra(pred, m.spectrum, k=1)
                report.setdefault("held_out", []).append(
                    {"log_mae": held_losses[-1], **rep.to_dict()})
            report["held_out_log_mae_mean"] = float(np.mean(held_losses))
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        print(f"calibrated field saved under {out}")
        return 0
    if args.mode == "geometry":
        scene = PlateScene(half_extent=0.5,
                           material=RadioMaterial(alpha_r=args.alpha_r or 100.0,
                                                  s=0.0, xpd=0.0, **CONCRETE),
                           tx=Pose(*_plate_terminals()[0]),
                           rx=Pose(*_plate_terminals()[1]),
                           n_rays=args.rays or 200_000, seed=seed,
                           alpha_r=args.alpha_r or 100.0)
        reference = plate_spectrum(scene)
        initial = {p: args.offset for p in args.free.split(",")}
        recovered, traj, history = calibrate_geometry(
            scene, reference, list(initial.keys()), initial,
            iters=args.iters, lr=args.lr)
        _write_history(out / "loss_history.csv", history)
        np.savetxt(out / "trajectory.csv", traj, delimiter=",", fmt="%.17e",
                   header=",".join(initial.keys()), comments="")
        (out / "recovered.json").write_text(json.dumps(recovered, indent=2,
                                                       sort_keys=True) + "\n")
        print(f"recovered offsets: {recovered}")
        return 0
    raise CliError(f"unknown calibrate mode: {args.mode}")


def _plate_terminals(dist: float = 2.5, incidence_deg: float = 45.0):
    tx_pos, rx_pos = symmetric_tx_rx(dist, incidence_deg)
    return ((tx_pos, look_at_rotation(tx_pos, (0, 0, 0))),
            (rx_pos, look_at_rotation(rx_pos, (0, 0, 0))))


def _write_history(path: Path, history: list[float]) -> None:
    path.write_text("step,loss\n" + "\n".join(
        f"{i},{v:.17e}" for i, v in enumerate(history)) + "\n")


def cmd_metrics(args) -> int:
    for p in (args.pred, args.gt):
        if not Path(p).exists():
            raise CliError(f"spectrum file not found: {p}")
    pred = AoASpectrum.load_csv(args.pred)
    gt = AoASpectrum.load_csv(args.gt)
    rep = evaluate_spectra(pred, gt, k=args.top_k, window=args.window,
                           floor_db=args.floor_db, radius_deg=args.radius_deg,
                           assignment="optimal" if args.optimal else "greedy")
    out = Path(args.out or "metrics.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    pairs_csv = out.with_suffix(".pairs.csv")
    rows = ["pred_el,pred_az,pred_w,gt_el,gt_az,gt_w,distance_deg"]
    for p, g, dist in rep.pairs:
        rows.append(f"{p.el_deg},{p.az_deg},{p.power:.17e},"
                    f"{g.el_deg},{g.az_deg},{g.power:.17e},{dist:.10f}")
    pairs_csv.write_text("\n".join(rows) + "\n")
    print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_build_scene(args) -> int:
    out = Path(args.out or "scene_out")
    seed = args.seed if args.seed is not None else 0
    if args.kind == "single_reflector":
        if args.scale <= 0:
            raise CliError("reflector scale must be positive")
        mesh = reflector_mesh(args.scale)
        tx, rx = symmetric_tx_rx(args.dist, args.incidence_deg)
        cfg = {
            "frequency_hz": 28e9, "alpha_r": args.alpha_r or 100.0,
            "n_rays": args.rays or 1_000_000, "max_depth": 1, "seed": seed,
            "materials": [dict(CONCRETE, s=0.0, xpd=0.0)],
            "tx": {"position": tx.tolist(), "look_at": [0.0, 0.0, 0.0],
                   "pattern": "isotropic"},
            "rx": {"position": rx.tolist(), "look_at": [0.0, 0.0, 0.0],
                   "pattern": "isotropic"},
        }
    elif args.kind == "box_room":
        size = [float(s) for s in args.size.split(",")]
        if len(size) != 3 or min(size) <= 0:
            raise CliError("box_room size must be three positive numbers")
        mesh = box_room_mesh(*size)
        cfg = {
            "frequency_hz": 28e9, "alpha_r": args.alpha_r or 100.0,
            "n_rays": args.rays or 1_000_000, "max_depth": args.max_depth or 1,
            "seed": seed,
            "materials": [dict(CONCRETE, s=0.0, xpd=0.0)],
            "tx": {"position": [-size[0] / 4, -size[1] / 4, size[2] / 2],
                   "pattern": "isotropic"},
            "rx": {"position": [size[0] / 4, size[1] / 4, size[2] / 2],
                   "pattern": "isotropic"},
        }
    else:
        raise CliError(f"unknown scene kind: {args.kind}")
    cfg_path = write_scene_files(cfg, mesh, out, name=args.kind)
    print(f"wrote {cfg_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmray",
        description="Differentiable mmWave ray tracing: simulation, "
                    "convergence studies, calibration and metrics.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--rays", type=int, default=None)
    common.add_argument("--max-depth", dest="max_depth", type=int, default=None)
    common.add_argument("--alpha-r", dest="alpha_r", type=float, default=None)
    common.add_argument("--out", type=str, default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common],
                       help="trace a scene config and write the AoA spectrum")
    p.add_argument("config")
    p.add_argument("--db", action="store_true", help="write dB values (offset +400)")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("converge", parents=[common],
                       help="single-reflector gain vs the mirror-reflection reference")
    p.add_argument("--scales", default="5,25,50,100,200")
    p.add_argument("--alphas", default="120")
    p.set_defaults(fn=cmd_converge)

    p = sub.add_parser("deviation-sweep", parents=[common],
                       help="deviation curves vs directivity, distance or incidence")
    p.add_argument("axis", choices=["directivity", "distance", "incident_angle"])
    p.add_argument("--scales", default=None)
    p.add_argument("--alphas", default=None)
    p.add_argument("--distances", default=None)
    p.add_argument("--angles", default=None)
    p.set_defaults(fn=cmd_deviation_sweep)

    p = sub.add_parser("calibrate", parents=[common],
                       help="fit materials from a dataset, or recover plate offsets")
    p.add_argument("mode", choices=["materials", "geometry"])
    p.add_argument("--dataset", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--free", default="tx", help="geometry: comma list of tx,ty,tz,rx,ry,rz")
    p.add_argument("--offset", type=float, default=0.2)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("metrics", parents=[common],
                       help="peak-detection F1 / angle / power errors between spectra")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--floor-db", type=float, default=30.0)
    p.add_argument("--radius-deg", type=float, default=20.0)
    p.add_argument("--optimal", action="store_true")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("build-scene", parents=[common],
                       help="emit a canonical scene mesh + config")
    p.add_argument("kind", choices=["single_reflector", "box_room"])
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--dist", type=float, default=25.0)
    p.add_argument("--incidence-deg", type=float, default=45.0)
    p.add_argument("--size", default="4,5,3")
    p.set_defaults(fn=cmd_build_scene)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "lr", None) is None and getattr(args, "command", "") == "calibrate":
        args.lr = 5e-4 if args.mode == "materials" else 0.02
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
