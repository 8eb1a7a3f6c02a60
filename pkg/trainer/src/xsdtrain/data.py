"""Dataset construction and augmentation.

Samples come out of the spiralcine command-line pipeline: a phantom is
generated, undersampled spiral k-space is simulated per slice, CG-SENSE
produces the interim input image, and the phantom's own image and mask
provide the labels. Only the CLI and its file formats are touched; the
reconstruction code itself is never imported.
"""

import json
import os
import subprocess
import sys
from dataclasses import dataclass

import numpy as np

from .fileio import read_imgs, read_mask


@dataclass
class TrainingSample:
    interim: np.ndarray       # (H, W) float32 CG-SENSE image
    label_image: np.ndarray   # (H, W) float32 fully sampled image
    label_mask: np.ndarray    # (H, W) uint8, classes 0..3
    source: str               # "set1" | "set2"

    def __post_init__(self):
        if not (self.interim.shape == self.label_image.shape
                == self.label_mask.shape):
            raise ValueError("sample arrays must share H x W")
        if self.label_mask.max(initial=0) > 3:
            raise ValueError("mask classes must be in 0..3")


def _run_cli(args):
    cmd = [sys.executable, "-m", "spiralcine"] + [str(a) for a in args]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(f"spiralcine {' '.join(args[:2])} failed: "
                           f"{proc.stderr.strip()}")


def build_dataset(workdir, n_slices=10, n_frames=40, grid_size=64,
                  pixel_size_mm=2.58, ef_percent=60.0, coils=8,
                  noise=0.01, cg_iters=10, seed=0, source="set2",
                  log=print):
    """Simulate, reconstruct, and pair one phantom into training samples.

    Returns n_slices * n_frames samples. Frames whose interim image came
    back non-finite are dropped with a log entry.
    """
    os.makedirs(workdir, exist_ok=True)
    cfg_path = os.path.join(workdir, "config.json")
    with open(cfg_path, "w") as fh:
        json.dump({"ef_percent": ef_percent, "grid_size": grid_size,
                   "pixel_size_mm": pixel_size_mm, "n_slices": n_slices,
                   "n_frames": n_frames, "seed": seed}, fh)
    ph_dir = os.path.join(workdir, "phantom")
    _run_cli(["phantom", "gen", "--config", cfg_path, "--out", ph_dir])
    traj = os.path.join(workdir, "base.traj")
    sched = os.path.join(workdir, "sched.traj")
    _run_cli(["traj", "design", "--fov", grid_size * pixel_size_mm,
              "--resolution", pixel_size_mm, "--out", traj])
    _run_cli(["traj", "schedule", "--traj", traj, "--out", sched])

    images, _ = read_imgs(os.path.join(ph_dir, "images.imgs"))
    masks, _ = read_mask(os.path.join(ph_dir, "masks.mask"))

    samples = []
    for s in range(n_slices):
        raw = os.path.join(workdir, f"raw_s{s}.rawk")
        _run_cli(["acquire", "--phantom", ph_dir, "--traj", sched,
                  "--coils", coils, "--noise", noise, "--seed", seed + s,
                  "--slice", s, "--out", raw])
        rec_dir = os.path.join(workdir, f"recon_s{s}")
        _run_cli(["recon", "--raw", raw, "--method", "cgsense",
                  "--iters", cg_iters, "--pixel-size", pixel_size_mm,
                  "--out", rec_dir])
        interim, _ = read_imgs(os.path.join(rec_dir,
                                            "recon_cgsense.imgs"))
        for f in range(n_frames):
            itm = np.abs(interim[0, f, 0]).astype(np.float32)
            if not np.isfinite(itm).all():
                log(f"dropping slice {s} frame {f}: non-finite interim")
                continue
            samples.append(TrainingSample(
                interim=itm,
                label_image=images[s, f, 0].astype(np.float32),
                label_mask=masks[s, f].astype(np.uint8),
                source=source))
    return samples


def augment(sample, rng):
    """Random flips plus a rotation by a multiple of 90 degrees, applied
    identically to interim, label image, and mask."""
    ops = []
    if rng.random() < 0.5:
        ops.append(lambda a: a[:, ::-1])
    if rng.random() < 0.5:
        ops.append(lambda a: a[::-1, :])
    k = int(rng.integers(0, 4))
    if k:
        ops.append(lambda a: np.rot90(a, k))

    def apply(a):
        for op in ops:
            a = op(a)
        return np.ascontiguousarray(a)

    return TrainingSample(interim=apply(sample.interim),
                          label_image=apply(sample.label_image),
                          label_mask=apply(sample.label_mask),
                          source=sample.source)
