"""Command-line front end tying the pipeline together.

Each subcommand validates its inputs, writes outputs atomically, and exits
nonzero with a machine-readable error JSON on stderr when anything fails.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import coils as coilmod
from . import formats, gating, nufft, phantom, recon, volumetry, xsdnet
from .evalstats import bland_altman, dice, nrmse, psnr
from .trajectory import (GstfModel, RotationSchedule, build_schedule,
                         density_compensation, density_weights_for_grid,
                         design_spiral, frame_positions, gstf_correct)


def _write_json(path, obj):
    blob = (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")
    formats._atomic_write(path, blob)


def _load_config(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if path.endswith(".toml"):
        import tomllib
        return tomllib.loads(blob.decode("utf-8"))
    return json.loads(blob.decode("utf-8"))


def _schedule_from_header(header):
    sched = header.get("schedule")
    if sched is None:
        raise ValueError("raw file carries no rotation schedule metadata")
    return RotationSchedule(
        n_orientations=int(sched["n_orientations"]),
        frames_per_orientation=int(sched["frames_per_orientation"]),
        orientation_offsets=np.asarray(sched["orientation_offsets"],
                                       dtype=float),
        n_arms=int(header["n_arms"]))


def _load_raw(path):
    """RawAcquisition rebuilt from a RAWK file and its TRAJ reference."""
    samples, header = formats.read_rawk(path)
    traj_path = header["trajectory"]
    if not os.path.isabs(traj_path):
        traj_path = os.path.join(os.path.dirname(os.path.abspath(path)),
                                 traj_path)
    il = formats.read_traj(traj_path).interleaves()
    schedule = _schedule_from_header(header)
    return phantom.RawAcquisition(
        samples=samples, interleaves=il, schedule=schedule,
        grid_size=int(header["dims"]), frame_dt_ms=float(header["frame_dt"]),
        noise_sigma=float(header.get("noise_sigma", 0.0)),
        seed=int(header.get("seed", 0)))


def _estimate_maps(raw):
    coil_images, union_plan = coilmod.temporal_average(raw)
    return coilmod.walsh_maps(coil_images)


# ---------------------------------------------------------------------------
# subcommands

def cmd_phantom_gen(args):
    cfg_kwargs = _load_config(args.config) if args.config else {}
    ef = cfg_kwargs.pop("ef_percent", None)
    if ef is not None:
        cfg = phantom.PhantomConfig.for_ejection_fraction(ef, **cfg_kwargs)
    else:
        cfg = phantom.PhantomConfig(**cfg_kwargs)
    ph = phantom.generate_phantom(cfg)
    os.makedirs(args.out, exist_ok=True)
    formats.write_imgs(os.path.join(args.out, "images.imgs"),
                       ph.images[:, :, None].astype(np.float32),
                       cfg.pixel_size_mm, cfg.slice_thickness_mm,
                       extra_header={"frame_dt": cfg.frame_dt_ms})
    formats.write_mask(os.path.join(args.out, "masks.mask"), ph.masks,
                       cfg.pixel_size_mm, cfg.slice_thickness_mm)
    truth = {"config": {k: (v.item() if hasattr(v, "item") else v)
                        for k, v in vars(cfg).items()},
             "true_volume_curve_ml": [float(v)
                                      for v in ph.true_volume_curve],
             "cycle_boundaries": [int(b) for b in ph.cycle_boundaries],
             "cycle_lengths_ms": [float(x) for x in ph.cycle_lengths_ms]}
    _write_json(os.path.join(args.out, "truth.json"), truth)
    print(args.out)


def cmd_traj_design(args):
    il = design_spiral(fov_mm=args.fov, resolution_mm=args.resolution,
                       n_arms=args.arms, max_gradient_mt_m=args.max_gradient,
                       max_slew_t_m_s=args.max_slew,
                       dwell_time_us=args.dwell,
                       undersampling=args.undersampling)
    formats.write_traj(args.out, il)
    print(args.out)


def cmd_traj_schedule(args):
    tf = formats.read_traj(args.traj)
    il = tf.interleaves()
    sched = build_schedule(il, args.orientations,
                           args.frames_per_orientation)
    extra = {"schedule": {
        "n_orientations": sched.n_orientations,
        "frames_per_orientation": sched.frames_per_orientation,
        "orientation_offsets": [float(a)
                                for a in sched.orientation_offsets]}}
    extra.update({k: tf.header[k] for k in tf.header
                  if k not in ("n_arms", "samples", "units",
                               "dwell_time_us", "fov_mm", "schedule")})
    formats.write_traj(args.out, arms=tf.arms,
                       dwell_time_us=tf.header["dwell_time_us"],
                       fov_mm=tf.header["fov_mm"], extra_header=extra)
    print(args.out)


def cmd_traj_gstf(args):
    tf = formats.read_traj(args.traj)
    il = tf.interleaves()
    if args.model == "identity":
        model = GstfModel.identity()
    elif args.model == "delay":
        model = GstfModel.pure_delay(args.delay)
    else:
        model = GstfModel.low_pass(args.cutoff, delay_us=args.delay)
    corrected = gstf_correct(il.base_arm, model)
    base = type(il)(base_arm=corrected, n_arms=il.n_arms, angles=il.angles)
    formats.write_traj(args.out, base,
                       extra_header={"gstf_model": args.model,
                                     "gstf_delay_us": args.delay})
    print(args.out)


def cmd_acquire(args):
    images, ihdr = formats.read_imgs(
        os.path.join(args.phantom, "images.imgs"))
    with open(os.path.join(args.phantom, "truth.json")) as fh:
        truth = json.load(fh)
    cfg = phantom.PhantomConfig(**truth["config"])
    ph = phantom.DynamicPhantom(
        images=images[:, :, 0].astype(float), masks=None,
        true_volume_curve=None, cycle_boundaries=None,
        cycle_lengths_ms=None, config=cfg)

    tf = formats.read_traj(args.traj)
    il = tf.interleaves()
    sched_hdr = tf.header.get("schedule")
    if sched_hdr is None:
        schedule = build_schedule(il, args.orientations, 1)
    else:
        schedule = RotationSchedule(
            n_orientations=int(sched_hdr["n_orientations"]),
            frames_per_orientation=int(sched_hdr["frames_per_orientation"]),
            orientation_offsets=np.asarray(
                sched_hdr["orientation_offsets"], dtype=float),
            n_arms=il.n_arms)

    coil_set = phantom.generate_coils(args.coils, cfg.grid_size,
                                      seed=args.seed)
    n_frames = args.frames or cfg.n_frames
    raw = phantom.simulate_kspace(ph, coil_set, il, schedule,
                                  noise_sigma=args.noise, seed=args.seed,
                                  slice_index=args.slice, n_frames=n_frames)
    extra = {"schedule": {
        "n_orientations": schedule.n_orientations,
        "frames_per_orientation": schedule.frames_per_orientation,
        "orientation_offsets": [float(a)
                                for a in schedule.orientation_offsets]},
        "noise_sigma": args.noise, "seed": args.seed,
        "slice_index": args.slice}
    formats.write_rawk(args.out, raw.samples.astype(np.complex64),
                       os.path.relpath(os.path.abspath(args.traj),
                                       os.path.dirname(
                                           os.path.abspath(args.out))),
                       cfg.grid_size, frame_dt_ms=cfg.frame_dt_ms,
                       dwell_time_us=float(tf.header["dwell_time_us"]),
                       extra_header=extra)
    print(args.out)


def _frame_plan_and_weights(raw, f):
    G = raw.grid_size
    pos = frame_positions(raw.interleaves, raw.frame_offset(f),
                          G).reshape(-1, 2)
    plan = nufft.plan(nufft.wrap_positions(pos), G)
    w = density_weights_for_grid(
        density_compensation(raw.interleaves), G).ravel()
    return plan, nufft.refine_density_weights(plan, w)


def cmd_recon(args):
    raw = _load_raw(args.raw)
    frames = range(raw.n_frames) if args.frame is None else [args.frame]
    if args.frame is not None and not 0 <= args.frame < raw.n_frames:
        raise ValueError(f"frame {args.frame} out of range "
                         f"(0..{raw.n_frames - 1})")
    G = raw.grid_size
    maps = None
    if args.method != "gridding":
        maps = _estimate_maps(raw)

    histories = {}
    if args.method == "lrs":
        ops, data = [], []
        for f in frames:
            plan, _w = _frame_plan_and_weights(raw, f)
            ops.append(recon.EncodingOperator(maps=maps.maps, plan=plan))
            data.append(raw.samples[f].reshape(raw.n_coils, -1))
        res = recon.lrs(np.stack(data), ops, lambda_l=args.lambda_l,
                        lambda_s=args.lambda_s, iters=args.iters)
        images = np.abs(res.image)
        histories["series"] = res.residual_history
    else:
        images = np.empty((len(list(frames)), G, G))
        frames = range(raw.n_frames) if args.frame is None else [args.frame]
        for i, f in enumerate(frames):
            plan, w = _frame_plan_and_weights(raw, f)
            data = raw.samples[f].reshape(raw.n_coils, -1)
            if args.method == "gridding":
                images[i] = recon.gridding_recon(data, plan, w)
            elif args.method == "cgsense":
                op = recon.EncodingOperator(maps=maps.maps, plan=plan)
                res = recon.cg_sense(data, op, iters=args.iters)
                images[i] = np.abs(res.image)
                histories[str(f)] = res.residual_history
            elif args.method == "cs":
                op = recon.EncodingOperator(maps=maps.maps, plan=plan)
                res = recon.fista_l1wavelet(data, op, lam=args.lam,
                                            iters=args.iters)
                images[i] = np.abs(res.image)
                histories[str(f)] = res.residual_history

    os.makedirs(args.out, exist_ok=True)
    formats.write_imgs(os.path.join(args.out, f"recon_{args.method}.imgs"),
                       images[None, :, None].astype(np.float32),
                       args.pixel_size, args.thickness,
                       extra_header={"method": args.method})
    if histories:
        _write_json(os.path.join(args.out,
                                 f"residuals_{args.method}.json"),
                    histories)
    print(args.out)


def cmd_gate(args):
    raw = _load_raw(args.raw)
    signal = gating.extract_gating(raw)
    cycles = gating.detect_cycles(signal)
    _write_json(args.out, gating.gating_report(signal, cycles))
    print(args.out)


def cmd_bin(args):
    raw = _load_raw(args.raw)
    signal = gating.extract_gating(raw)
    cycles = gating.detect_cycles(signal)
    seg = gating.bin_segmented(raw, cycles, args.phases)
    formats.write_imgs(args.out, seg.images[None, :, None]
                       .astype(np.float32),
                       args.pixel_size, args.thickness,
                       extra_header={"phases": args.phases,
                                     "completeness":
                                         [float(c)
                                          for c in seg.completeness]})
    print(args.out)


def cmd_infer(args):
    store = xsdnet.load_weights(args.weights)
    images, hdr = formats.read_imgs(args.interim)
    s, f, c, h, w = images.shape
    recon_out = np.empty((s, f, h, w), dtype=np.float32)
    mask_out = np.empty((s, f, h, w), dtype=np.uint8)
    for si in range(s):
        for fi in range(f):
            out = xsdnet.infer(np.abs(images[si, fi, 0]), store)
            recon_out[si, fi] = out.reconstruction
            mask_out[si, fi] = out.mask
    os.makedirs(args.out, exist_ok=True)
    formats.write_imgs(os.path.join(args.out, "xsdnet_recon.imgs"),
                       recon_out[:, :, None],
                       hdr["pixel_size_mm"], hdr["slice_thickness_mm"])
    formats.write_mask(os.path.join(args.out, "xsdnet_mask.mask"),
                       mask_out, hdr["pixel_size_mm"],
                       hdr["slice_thickness_mm"])
    print(args.out)


def cmd_volumetry(args):
    masks, hdr = formats.read_mask(args.masks)
    pixel = args.pixel_size or hdr["pixel_size_mm"]
    thick = args.thickness or hdr["slice_thickness_mm"]
    curve = volumetry.mask_to_volume(masks, pixel, thick,
                                     frame_dt_ms=args.frame_dt,
                                     label=args.label)
    edv_list, esv_list, ed_idx, es_idx = volumetry.detect_extrema(curve)
    ef, edv, esv = volumetry.ejection_fraction(edv_list, esv_list)
    report = {"label": args.label,
              "volumes_ml": [float(v) for v in curve.volumes_ml],
              "ed_frames": [int(i) for i in ed_idx],
              "es_frames": [int(i) for i in es_idx],
              "edv_ml": float(edv), "esv_ml": float(esv),
              "ef_percent": float(ef)}
    _write_json(args.out, report)
    print(args.out)


def _load_metric_input(path):
    if path.endswith(".mask"):
        return formats.read_mask(path)[0]
    if path.endswith(".imgs"):
        return formats.read_imgs(path)[0]
    with open(path) as fh:
        return np.asarray(json.load(fh), dtype=float)


def cmd_eval(args):
    a = _load_metric_input(args.a)
    b = _load_metric_input(args.b)
    if args.metric == "ba":
        bias, lo, hi = bland_altman(np.ravel(a), np.ravel(b))
        out = {"bias": bias, "loa_low": lo, "loa_high": hi}
    elif args.metric == "nrmse":
        out = {"nrmse": float(nrmse(a, b)),
               "psnr_db": float(psnr(a, b))}
    else:
        out = {"dice": {str(lbl): float(dice(a, b, lbl))
                        for lbl in sorted(set(np.unique(a))
                                          | set(np.unique(b)))}}
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        formats._atomic_write(args.out, (text + "\n").encode("utf-8"))
    print(text)


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="spiralcine",
                                description="Spiral real-time cardiac cine "
                                            "simulation and reconstruction")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="phantom generation")
    phs = ph.add_subparsers(dest="subcommand", required=True)
    g = phs.add_parser("gen")
    g.add_argument("--config", default=None,
                   help="JSON/TOML file of PhantomConfig fields "
                        "(plus optional ef_percent)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_phantom_gen)

    tr = sub.add_parser("traj", help="trajectory design")
    trs = tr.add_subparsers(dest="subcommand", required=True)
    d = trs.add_parser("design")
    d.add_argument("--fov", type=float, default=320.0)
    d.add_argument("--resolution", type=float, default=1.29)
    d.add_argument("--arms", type=int, default=13)
    d.add_argument("--max-gradient", type=float, default=40.0)
    d.add_argument("--max-slew", type=float, default=180.0)
    d.add_argument("--dwell", type=float, default=2.0)
    d.add_argument("--undersampling", type=float, default=5.0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_traj_design)
    s = trs.add_parser("schedule")
    s.add_argument("--traj", required=True)
    s.add_argument("--orientations", type=int, default=8)
    s.add_argument("--frames-per-orientation", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_traj_schedule)
    gs = trs.add_parser("gstf")
    gs.add_argument("--traj", required=True)
    gs.add_argument("--model", choices=["identity", "delay", "lowpass"],
                    default="lowpass")
    gs.add_argument("--cutoff", type=float, default=20e3)
    gs.add_argument("--delay", type=float, default=0.0)
    gs.add_argument("--out", required=True)
    gs.set_defaults(func=cmd_traj_gstf)

    a = sub.add_parser("acquire", help="simulate k-space acquisition")
    a.add_argument("--phantom", required=True)
    a.add_argument("--traj", required=True)
    a.add_argument("--coils", type=int, default=8)
    a.add_argument("--noise", type=float, default=0.0)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--slice", type=int, default=0)
    a.add_argument("--frames", type=int, default=None)
    a.add_argument("--orientations", type=int, default=8)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_acquire)

    r = sub.add_parser("recon", help="image reconstruction")
    r.add_argument("--raw", required=True)
    r.add_argument("--method", required=True,
                   choices=["gridding", "cgsense", "cs", "lrs"])
    r.add_argument("--iters", type=int, default=10)
    r.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    r.add_argument("--lambda-l", type=float, default=0.02)
    r.add_argument("--lambda-s", type=float, default=0.05)
    r.add_argument("--frame", type=int, default=None)
    r.add_argument("--pixel-size", type=float, default=1.29)
    r.add_argument("--thickness", type=float, default=8.0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_recon)

    ga = sub.add_parser("gate", help="self-gating report")
    ga.add_argument("--raw", required=True)
    ga.add_argument("--out", required=True)
    ga.set_defaults(func=cmd_gate)

    b = sub.add_parser("bin", help="segmented binning")
    b.add_argument("--raw", required=True)
    b.add_argument("--phases", type=int, required=True)
    b.add_argument("--pixel-size", type=float, default=1.29)
    b.add_argument("--thickness", type=float, default=8.0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bin)

    i = sub.add_parser("infer", help="network inference")
    i.add_argument("--weights", required=True)
    i.add_argument("--interim", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("volumetry", help="volume curve and EF")
    v.add_argument("--masks", required=True)
    v.add_argument("--pixel-size", type=float, default=None)
    v.add_argument("--thickness", type=float, default=None)
    v.add_argument("--frame-dt", type=float, default=48.0)
    v.add_argument("--label", type=int, default=volumetry.LABEL_LV)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_volumetry)

    e = sub.add_parser("eval", help="agreement / error metrics")
    e.add_argument("metric", choices=["ba", "nrmse", "dice"])
    e.add_argument("--a", required=True)
    e.add_argument("--b", required=True)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI error funnel
        err = {"error": type(exc).__name__, "message": str(exc),
               "command": args.command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
