"""Training loop and loss family.

Losses follow the SDNet recipe: segmentation Dice, VAE KL divergence,
modality-vector reconstruction (re-encoding the FiLM output must recover
z), FiLM-output reconstruction against the fully sampled label image, plus
a perceptual loss on the final reconstruction computed in the feature
space of a fixed, seeded random convolutional stack.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .fileio import write_xsdw
from .model import XsdNet, default_manifest, export_tensors


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    set1_per_epoch: int = 282
    seed: int = 0
    augment: bool = True
    deterministic: bool = True
    weights: dict = field(default_factory=lambda: {
        "dice": 1.0, "kl": 0.01, "z_rec": 1.0, "film_rec": 1.0,
        "perceptual": 1.0})
    checkpoint_path: str = "checkpoint.xsdw"


class PerceptualNet(nn.Module):
    """Fixed seeded 4-layer random conv stack; features for the
    reconstruction loss."""

    def __init__(self, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chans = [1, 8, 16, 16, 16]
        self.layers = nn.ModuleList()
        for cin, cout in zip(chans, chans[1:]):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, math.sqrt(2.0 / (cin * 9)),
                                    generator=gen)
                conv.bias.zero_()
            self.layers.append(conv)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        for conv in self.layers:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


def dice_loss(probs, mask, classes):
    onehot = F.one_hot(mask.long(), classes).permute(0, 3, 1, 2).float()
    inter = (probs * onehot).sum(dim=(0, 2, 3))
    denom = probs.sum(dim=(0, 2, 3)) + onehot.sum(dim=(0, 2, 3))
    return 1.0 - ((2.0 * inter + 1.0) / (denom + 1.0)).mean()


def kl_loss(mu, logvar):
    return -0.5 * torch.mean(1.0 + logvar - mu ** 2 - logvar.exp())


def compute_losses(model, out, interim, label, mask, perceptual, weights,
                   classes):
    losses = {
        "dice": dice_loss(out["seg_probs"], mask, classes),
        "kl": kl_loss(out["mu"], out["logvar"]),
        "film_rec": F.l1_loss(out["film"][:, 0], label),
    }
    # z reconstruction: encode the FiLM output with the same factors and
    # require the posterior mean to land back on z
    mu2, _ = model.modality(torch.cat([out["film"], out["factors"]],
                                      dim=1))
    losses["z_rec"] = F.l1_loss(mu2, out["z"].detach())
    feats_r = perceptual(out["recon"])
    feats_l = perceptual(label[:, None])
    losses["perceptual"] = sum(F.mse_loss(a, b)
                               for a, b in zip(feats_r, feats_l)) \
        / len(feats_r)
    total = sum(weights[k] * v for k, v in losses.items())
    return total, {k: float(v.detach()) for k, v in losses.items()}


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train(dataset, manifest=None, config=None, log=print):
    """Train on a TrainingSample list; returns (model, history).

    history is a list of per-epoch mean total losses. Set1/set2 pooling:
    every epoch uses all set2 samples plus up to `set1_per_epoch` randomly
    chosen set1 samples.
    """
    if not dataset:
        raise ValueError("train: dataset is empty")
    cfg = config or TrainConfig()
    manifest = manifest or default_manifest()
    if cfg.deterministic:
        torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    model = XsdNet(manifest)
    perceptual = PerceptualNet(seed=cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    set1 = [s for s in dataset if s.source == "set1"]
    set2 = [s for s in dataset if s.source == "set2"]

    history = []
    for epoch in range(cfg.epochs):
        pool = list(set2)
        if set1:
            idx = rng.choice(len(set1), min(cfg.set1_per_epoch, len(set1)),
                             replace=False)
            pool += [set1[i] for i in idx]
        model.train()
        epoch_losses = []
        for batch_idx in _batches(len(pool), cfg.batch_size, rng):
            samples = [pool[i] for i in batch_idx]
            if cfg.augment:
                from .data import augment
                samples = [augment(s, rng) for s in samples]
            interim = torch.as_tensor(
                np.stack([s.interim for s in samples]))[:, None]
            label = torch.as_tensor(
                np.stack([s.label_image for s in samples]))
            mask = torch.as_tensor(
                np.stack([s.label_mask for s in samples]))
            out = model(interim, sample_z=True)
            total, _parts = compute_losses(model, out, interim, label,
                                           mask, perceptual, cfg.weights,
                                           manifest["classes"])
            if not torch.isfinite(total):
                export_xsdw(model, cfg.checkpoint_path)
                raise FloatingPointError(
                    f"non-finite loss in epoch {epoch}; checkpoint saved "
                    f"to {cfg.checkpoint_path}")
            opt.zero_grad()
            total.backward()
            opt.step()
            epoch_losses.append(float(total.detach()))
        history.append(float(np.mean(epoch_losses)))
        log(f"epoch {epoch + 1}/{cfg.epochs}: loss {history[-1]:.4f}")
    return model, history


def export_xsdw(model, path):
    """Write the model's weights and manifest as an XSDW file."""
    model.eval()
    write_xsdw(path, export_tensors(model), model.manifest)
    return path
