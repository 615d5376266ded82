"""Command-line interface.

Subcommands cover the full batch workflow: ``init-traj`` (sample and
order an initial trajectory), ``optimize`` (penalty-constrained
trajectory optimization), ``simulate`` (blurred noisy measurements for
an image), ``reconstruct`` (regridding, CG-SENSE and post-processing
images), ``evaluate`` (metrics tables) and ``dataset`` (phantom
export).  Figures are rendered next to every report unless disabled.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical failure.  ``SSTRAJ_THREADS`` limits BLAS thread count.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    apply_overrides,
    config_hash,
    k_max,
    load_config,
    make_limits,
    make_loss_weights,
    make_optim,
    make_recon,
    make_scan,
)
from .core import CoilMaps, ComplexImage, KSpaceSamples, ValidationError, validate
from .dcf import DensityError, pipe_menon
from .encoding import add_noise, apply_blur, blur_vector, forward
from .fileio import DataError, read_array, read_trajectory, write_array, write_trajectory
from .metrics import constraint_loss, psnr, ssim
from .optim import DivergenceError, optimize_trajectory
from .phantom import make_dataset
from .recon import CgBreakdownError, UnknownPluginError, cg_sense, make_plugin, post_reconstruct, regrid, resolve_lambda
from .sampling import SamplingError, build_initial_trajectory, generate_vd_points, path_length


def _fresh(paths: list[Path], force: bool) -> None:
    for p in paths:
        if p.exists() and not force:
            raise DataError(f"output exists (use --force to overwrite): {p}")


def _load_cfg(args) -> tuple[dict, str]:
    cfg = load_config(args.config)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    return cfg, config_hash(cfg)


def _read_image(path: str) -> ComplexImage:
    return ComplexImage(np.asarray(read_array(path), dtype=np.complex128))


def _read_csm(path: str) -> CoilMaps:
    return CoilMaps(np.asarray(read_array(path), dtype=np.complex128))


def _csm_for(cfg: dict, n: int, path: str | None) -> CoilMaps:
    if path:
        return _read_csm(path)
    from .phantom import synthetic_csm

    return synthetic_csm(n, cfg["dataset"]["nc"], seed=cfg["dataset"]["seed"])


def _figdir(out_dir: Path) -> Path:
    d = out_dir / "figures"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _build_dataset(cfg: dict, directory: str | None):
    """(train, val) pairs from a dataset directory or phantom generation."""
    ds = cfg["dataset"]
    total = ds["train_count"] + ds["val_count"]
    if directory:
        root = Path(directory)
        pairs = []
        for i in range(total):
            img = root / f"img_{i:03d}.lsst"
            csm = root / f"csm_{i:03d}.lsst"
            if not img.exists():
                raise DataError(f"dataset element missing: {img}")
            image, maps = _read_image(str(img)), _read_csm(str(csm))
            validate(image, maps)
            pairs.append((image, maps))
    else:
        pairs = make_dataset(
            total, cfg["grid"]["n"], ds["nc"], seed=ds["seed"],
            with_phase=ds["with_phase"], edge_smooth=ds["edge_smooth"],
        )
    return pairs[: ds["train_count"]], pairs[ds["train_count"] : total]


def cmd_init_traj(args) -> int:
    cfg, chash = _load_cfg(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points_f = out / "points.lsst"
    traj_f = out / "trajectory.lsst"
    _fresh([points_f, traj_f], args.force)

    g, s = cfg["grid"], cfg["sampling"]
    pset = generate_vd_points(g["n"], g["fov"], cfg["scan"]["accel"], s["decay"], s["seed"])
    traj = build_initial_trajectory(pset, dwell=cfg["scan"]["dwell"], fov=g["fov"], max_passes=s["two_opt_passes"])
    write_array(points_f, pset.points)
    write_trajectory(traj_f, traj, seed=s["seed"], command="init-traj", config_hash=chash)

    tour = path_length(traj.points, np.arange(traj.m))
    closs = constraint_loss(traj, make_limits(cfg), make_loss_weights(cfg))
    print(f"samples: {traj.m}")
    print(f"tour length: {tour:.6g} cycles/m")
    print(f"initial constraint loss: {closs:.6g}")
    print(f"config hash: {chash}")
    if cfg["output"]["figures"]:
        figs = _figdir(out)
        from .figures import save_point_set, save_trajectory

        box = k_max(cfg)
        save_point_set(figs / "points.png", pset.points, box)
        save_trajectory(figs / "trajectory_init.png", traj.points, box, title="initial trajectory")
    return 0


def cmd_optimize(args) -> int:
    cfg, chash = _load_cfg(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj_f = out / "trajectory_opt.lsst"
    log_f = out / "log.jsonl"
    summary_f = out / "summary.json"
    _fresh([traj_f, log_f, summary_f], args.force)

    k0, _ = read_trajectory(args.traj_in)
    train, val = _build_dataset(cfg, args.dataset)
    scan, limits, recon_cfg = make_scan(cfg), make_limits(cfg), make_recon(cfg)
    optim_cfg = make_optim(cfg)
    base = make_loss_weights(cfg)
    log_fn = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None

    report = optimize_trajectory(
        train, k0, scan, recon_cfg, limits, optim_cfg,
        base_weights=base, val_set=val or None, log_fn=log_fn,
    )

    write_trajectory(
        traj_f, report.trajectory, seed=optim_cfg.seed, command="optimize",
        config_hash=chash, extra={"best_step": report.best_step},
    )
    with open(log_f, "w", encoding="utf-8") as f:
        for r in report.records:
            f.write(json.dumps({
                "step": r.step, "total": r.total, "task": r.task,
                "constraint": r.constraint, "max_v_violation": r.max_v_violation,
                "max_a_violation": r.max_a_violation,
            }, sort_keys=True) + "\n")

    best_val = next(v for v in report.val_records if v.step == report.best_step)
    summary = {
        "config_hash": chash,
        "beta": report.beta,
        "lam": report.lam,
        "best_step": report.best_step,
        "final_max_v_violation": report.final_max_v_violation,
        "final_max_a_violation": report.final_max_a_violation,
        "validation": {
            "total": best_val.total,
            "psnr_mean": best_val.psnr_mean,
            "ssim_mean": best_val.ssim_mean,
        },
        "val_history": [
            {"step": v.step, "total": v.total, "psnr_mean": v.psnr_mean, "ssim_mean": v.ssim_mean}
            for v in report.val_records
        ],
    }
    with open(summary_f, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")

    print(f"best step: {report.best_step}")
    print(f"final max velocity violation: {report.final_max_v_violation:.6g} (cycles/m)/s")
    print(f"final max acceleration violation: {report.final_max_a_violation:.6g} (cycles/m)/s^2")
    print(f"validation PSNR: {best_val.psnr_mean:.3f} dB  SSIM: {best_val.ssim_mean:.5f}")
    print(f"config hash: {chash}")
    if cfg["output"]["figures"]:
        figs = _figdir(out)
        from .figures import save_loss_curves, save_trajectory

        save_loss_curves(figs / "loss.png", report.records, report.val_records)
        save_trajectory(figs / "trajectory_opt.png", report.trajectory.points, k_max(cfg), title="optimized trajectory")
    return 0


def cmd_simulate(args) -> int:
    cfg, chash = _load_cfg(args)
    traj, _ = read_trajectory(args.traj)
    image = _read_image(args.image)
    csm = _csm_for(cfg, image.data.shape[0], args.csm)
    validate(image, csm)
    out = Path(args.out)
    _fresh([out], args.force)

    scan = make_scan(cfg)
    y = forward(image, csm, traj)
    y_b = apply_blur(y, blur_vector(traj, scan))
    if scan.noise_sigma > 0:
        y_b = add_noise(y_b, scan.noise_sigma, args.noise_seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_array(out, y_b.data)
    with open(str(out) + ".meta.json", "w", encoding="utf-8") as f:
        json.dump({"config_hash": chash, "noise_seed": args.noise_seed, "command": "simulate"}, f, sort_keys=True)
        f.write("\n")
    print(f"wrote {out} ({y_b.nc} coils x {y_b.m} samples)")
    return 0


def cmd_reconstruct(args) -> int:
    cfg, chash = _load_cfg(args)
    traj, _ = read_trajectory(args.traj)
    samples = KSpaceSamples(read_array(args.samples))
    csm = _csm_for(cfg, cfg["grid"]["n"], args.csm)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {name: out / f"{name}.lsst" for name in ("regrid", "sense", "final")}
    _fresh(list(files.values()), args.force)

    scan, recon_cfg = make_scan(cfg), make_recon(cfg)
    w = pipe_menon(traj, recon_cfg.grid_n, kernel_sigma=recon_cfg.dcf_sigma, iters=recon_cfg.dcf_iters)
    x_ls = regrid(samples, csm, traj, w)
    lam = resolve_lambda(recon_cfg, csm, traj)
    x0 = cg_sense(samples, csm, traj, lam, recon_cfg.cg_iters, rhs=recon_cfg.rhs, weights=w)
    plugin = make_plugin(recon_cfg.plugin, k=traj, scan=scan, grid_n=recon_cfg.grid_n, weights=w, alpha=recon_cfg.plugin_alpha)
    xhat = post_reconstruct(x0, plugin)

    write_array(files["regrid"], x_ls.data)
    write_array(files["sense"], x0.data)
    write_array(files["final"], xhat.data)
    meta = {"config_hash": chash, "lam": lam, "command": "reconstruct"}
    if args.ref:
        ref = _read_image(args.ref)
        err = np.linalg.norm(np.abs(xhat.data) - np.abs(ref.data)) / np.linalg.norm(np.abs(ref.data))
        meta["nrmse_final"] = float(err)
        print(f"nrmse final vs ref: {err:.6g}")
    with open(out / "recon_meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {files['regrid']}, {files['sense']}, {files['final']}")
    if cfg["output"]["figures"]:
        from .figures import save_recon_panel

        crop = args.crop if args.crop is not None else cfg["output"]["crop"]
        save_recon_panel(
            _figdir(out) / "reconstructions.png",
            [("regridding", x_ls.data), ("CG-SENSE", x0.data), ("final", xhat.data)],
            crop=crop,
        )
    return 0


def cmd_evaluate(args) -> int:
    cfg, chash = _load_cfg(args)
    recon_paths = args.recon
    ref_paths = args.ref
    if len(ref_paths) == 1:
        ref_paths = ref_paths * len(recon_paths)
    if len(ref_paths) != len(recon_paths):
        raise DataError("need one --ref per --recon (or a single shared --ref)")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table_f, json_f = out / "metrics.txt", out / "metrics.json"
    _fresh([table_f, json_f], args.force)

    rows = []
    for rp, fp in zip(recon_paths, ref_paths):
        test, ref = _read_image(rp), _read_image(fp)
        rows.append({
            "case": Path(rp).name,
            "psnr_db": psnr(test, ref),
            "ssim": ssim(test, ref),
        })
    p = np.array([r["psnr_db"] for r in rows])
    s = np.array([r["ssim"] for r in rows])
    summary = {
        "cases": rows,
        "psnr_mean": float(p.mean()), "psnr_std": float(p.std(ddof=1)) if len(p) > 1 else 0.0,
        "ssim_mean": float(s.mean()), "ssim_std": float(s.std(ddof=1)) if len(s) > 1 else 0.0,
        "config_hash": chash,
    }

    width = max(len(r["case"]) for r in rows)
    lines = [f"{'case':<{width}}  {'PSNR (dB)':>10}  {'SSIM':>8}"]
    for r in rows:
        lines.append(f"{r['case']:<{width}}  {r['psnr_db']:>10.3f}  {r['ssim']:>8.5f}")
    lines.append(
        f"{'mean +/- std':<{width}}  "
        f"{summary['psnr_mean']:>6.3f} +/- {summary['psnr_std']:.3f}  "
        f"{summary['ssim_mean']:.5f} +/- {summary['ssim_std']:.5f}"
    )
    table = "\n".join(lines) + "\n"
    table_f.write_text(table, encoding="utf-8")
    with open(json_f, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(table, end="")
    if cfg["output"]["figures"]:
        from .figures import save_grayscale

        crop = args.crop if args.crop is not None else cfg["output"]["crop"]
        figs = _figdir(out)
        for i, (rp, row) in enumerate(zip(recon_paths, rows)):
            img = read_array(rp)
            save_grayscale(figs / f"case_{i:03d}.png", img, crop=crop, title=row["case"])
    return 0


def cmd_dataset(args) -> int:
    cfg, chash = _load_cfg(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, val = _build_dataset(cfg, None)
    ds = cfg["dataset"]
    if args.split == "train":
        items = list(enumerate(train))
    elif args.split == "val":
        items = list(enumerate(val, start=ds["train_count"]))
    else:
        items = list(enumerate(train + val))
    paths = []
    for i, _pair in items:
        paths += [out / f"img_{i:03d}.lsst", out / f"csm_{i:03d}.lsst"]
    _fresh(paths, args.force)
    for i, (img, csm) in items:
        write_array(out / f"img_{i:03d}.lsst", img.data)
        write_array(out / f"csm_{i:03d}.lsst", csm.maps)
    manifest = {"config_hash": chash, "split": args.split, "indices": [i for i, _ in items]}
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(items)} dataset elements to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sstraj", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"sstraj {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_dir=True):
        sp.add_argument("--config", help="YAML config file (defaults when omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set optim.steps=100")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if out_dir:
            sp.add_argument("--out-dir", required=True)

    sp = sub.add_parser("init-traj", help="sample points and build the initial trajectory")
    common(sp)
    sp.set_defaults(func=cmd_init_traj)

    sp = sub.add_parser("optimize", help="optimize a trajectory on a phantom dataset")
    common(sp)
    sp.add_argument("--traj-in", required=True, help="initial trajectory file")
    sp.add_argument("--dataset", help="directory with img_NNN.lsst/csm_NNN.lsst pairs")
    sp.add_argument("--verbose", action="store_true", help="stream progress to stderr")
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("simulate", help="simulate blurred noisy measurements")
    common(sp, out_dir=False)
    sp.add_argument("--traj", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--csm", help="coil maps file (synthesized from config when omitted)")
    sp.add_argument("--noise-seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("reconstruct", help="regrid + CG-SENSE + post-reconstruct")
    common(sp)
    sp.add_argument("--traj", required=True)
    sp.add_argument("--samples", required=True)
    sp.add_argument("--csm", help="coil maps file (synthesized from config when omitted)")
    sp.add_argument("--ref", help="reference image; reports NRMSE of the final image")
    sp.add_argument("--crop", type=int, help="center-crop size for figures")
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("evaluate", help="PSNR/SSIM table for reconstructions")
    common(sp)
    sp.add_argument("--recon", action="append", required=True, help="reconstruction file (repeatable)")
    sp.add_argument("--ref", action="append", required=True, help="reference file (one per recon, or one shared)")
    sp.add_argument("--crop", type=int, help="center-crop size for figure dumps")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("dataset", help="export the phantom dataset")
    common(sp)
    sp.add_argument("--split", choices=("train", "val", "all"), default="all")
    sp.set_defaults(func=cmd_dataset)
    return p


@contextlib.contextmanager
def _thread_limit():
    n = os.environ.get("SSTRAJ_THREADS")
    if not n:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=int(n)):
        yield


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, SamplingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, ValidationError, UnknownPluginError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (CgBreakdownError, DivergenceError, DensityError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
