"""Torch implementation of the xSDNet graph.

The module tree mirrors the tensor naming scheme of the XSDW weight files
(anatomy/final U-Nets, segmentor, modality VAE encoder, FiLM decoder), so
an exported file is a faithful snapshot of this network and loads directly
in the numpy inference engine.
"""

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

BN_EPS = 1e-5
LEAKY_SLOPE = 0.01


def default_manifest():
    return {
        "arch": "xsdnet",
        "input_channels": 1,
        "anatomy_factors": 8,
        "classes": 4,
        "modality_dim": 8,
        "anatomy_unet": {"depth": 4, "base_channels": 16},
        "final_unet": {"depth": 4, "base_channels": 16},
        "segmentor_channels": [16, 16],
        "modality_encoder_channels": [16, 32, 32],
        "film_decoder": {"blocks": 3, "channels": 16},
    }


class ConvBNAct(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.bn = nn.BatchNorm2d(cout, eps=BN_EPS)

    def forward(self, x):
        return F.leaky_relu(self.bn(self.conv(x)), LEAKY_SLOPE)


class UNet(nn.Module):
    def __init__(self, cin, cout, depth, base):
        super().__init__()
        self.depth = depth
        self.enc = nn.ModuleList()
        ch = cin
        enc_ch = []
        for i in range(depth):
            c = base * (2 ** i)
            self.enc.append(nn.ModuleList([ConvBNAct(ch, c),
                                           ConvBNAct(c, c)]))
            enc_ch.append(c)
            ch = c
        bott = base * (2 ** depth)
        self.bottleneck = nn.ModuleList([ConvBNAct(ch, bott),
                                         ConvBNAct(bott, bott)])
        ch = bott
        self.dec = nn.ModuleList()
        for i in reversed(range(depth)):
            c = enc_ch[i]
            self.dec.append(nn.ModuleList([ConvBNAct(ch + c, c),
                                           ConvBNAct(c, c)]))
            ch = c
        self.out = nn.Conv2d(ch, cout, 1)

    def forward(self, x):
        skips = []
        for blk in self.enc:
            x = blk[1](blk[0](x))
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck[1](self.bottleneck[0](x))
        for j, blk in enumerate(self.dec):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = torch.cat([x, skips[self.depth - 1 - j]], dim=1)
            x = blk[1](blk[0](x))
        return self.out(x)


class Segmentor(nn.Module):
    def __init__(self, n_factors, hidden, classes):
        super().__init__()
        self.hidden = nn.ModuleList()
        ch = n_factors
        for c in hidden:
            self.hidden.append(ConvBNAct(ch, c))
            ch = c
        self.out = nn.Conv2d(ch, classes, 3, padding=1)

    def forward(self, x):
        for blk in self.hidden:
            x = blk(x)
        return self.out(x)


class ModalityEncoder(nn.Module):
    def __init__(self, cin, channels, zdim):
        super().__init__()
        self.convs = nn.ModuleList()
        ch = cin
        for c in channels:
            self.convs.append(ConvBNAct(ch, c, stride=2))
            ch = c
        self.fc_mu = nn.Linear(ch, zdim)
        self.fc_logvar = nn.Linear(ch, zdim)

    def forward(self, x):
        for blk in self.convs:
            x = blk(x)
        pooled = x.mean(dim=(2, 3))
        return self.fc_mu(pooled), self.fc_logvar(pooled)


class FilmBlock(nn.Module):
    def __init__(self, channels, zdim):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.gamma = nn.Linear(zdim, channels)
        self.beta = nn.Linear(zdim, channels)

    def forward(self, x, z):
        x = self.conv(x)
        g = self.gamma(z)[:, :, None, None]
        b = self.beta(z)[:, :, None, None]
        return F.leaky_relu(g * x + b, LEAKY_SLOPE)


class FilmDecoder(nn.Module):
    def __init__(self, n_factors, channels, blocks, zdim):
        super().__init__()
        self.conv_in = nn.Conv2d(n_factors, channels, 3, padding=1)
        self.blocks = nn.ModuleList([FilmBlock(channels, zdim)
                                     for _ in range(blocks)])
        self.out = nn.Conv2d(channels, 1, 1)

    def forward(self, x, z):
        x = F.leaky_relu(self.conv_in(x), LEAKY_SLOPE)
        for blk in self.blocks:
            x = blk(x, z)
        return self.out(x)


def _pad_to_multiple(x, mult):
    h, w = x.shape[-2:]
    ph, pw = -h % mult, -w % mult
    if ph == 0 and pw == 0:
        return x, (h, w)
    return F.pad(x, (0, pw, 0, ph), mode="replicate"), (h, w)


class XsdNet(nn.Module):
    """Full graph: anatomy U-Net -> binary factors -> segmentor; modality
    VAE; FiLM decoder; final fusion U-Net on (FiLM output, interim)."""

    def __init__(self, manifest=None):
        super().__init__()
        m = manifest or default_manifest()
        self.manifest = m
        nf = m["anatomy_factors"]
        zdim = m["modality_dim"]
        self.anatomy = UNet(m["input_channels"], nf,
                            m["anatomy_unet"]["depth"],
                            m["anatomy_unet"]["base_channels"])
        self.final = UNet(m["input_channels"] + 1, 1,
                          m["final_unet"]["depth"],
                          m["final_unet"]["base_channels"])
        self.segmentor = Segmentor(nf, m["segmentor_channels"],
                                   m["classes"])
        self.modality = ModalityEncoder(m["input_channels"] + nf,
                                        m["modality_encoder_channels"],
                                        zdim)
        self.film = FilmDecoder(nf, m["film_decoder"]["channels"],
                                m["film_decoder"]["blocks"], zdim)

    def encode_factors(self, x):
        """Anatomy softmax, thresholded at 0.5; straight-through gradient
        during training, hard values always."""
        depth = self.manifest["anatomy_unet"]["depth"]
        xp, (h, w) = _pad_to_multiple(x, 1 << depth)
        probs = torch.softmax(self.anatomy(xp), dim=1)[:, :, :h, :w]
        hard = (probs > 0.5).float()
        if self.training:
            return hard + probs - probs.detach()
        return hard

    def forward(self, x, sample_z=False):
        factors = self.encode_factors(x)
        seg_logits = self.segmentor(factors)
        mu, logvar = self.modality(torch.cat([x, factors], dim=1))
        if sample_z:
            z = mu + torch.randn_like(mu) * torch.exp(0.5 * logvar)
        else:
            z = mu
        film = self.film(factors, z)
        depth = self.manifest["final_unet"]["depth"]
        stack, (h, w) = _pad_to_multiple(torch.cat([film, x], dim=1),
                                         1 << depth)
        recon = self.final(stack)[:, :, :h, :w]
        return {"factors": factors, "seg_logits": seg_logits,
                "seg_probs": torch.softmax(seg_logits, dim=1),
                "mu": mu, "logvar": logvar, "z": z,
                "film": film, "recon": recon}

    @torch.no_grad()
    def infer(self, image):
        """Numpy-in/numpy-out single-image forward in inference mode."""
        was_training = self.training
        self.eval()
        x = torch.as_tensor(np.asarray(image, dtype=np.float32))[None, None]
        out = self.forward(x)
        if was_training:
            self.train()
        return {"factors": out["factors"][0].numpy(),
                "probabilities": out["seg_probs"][0].numpy(),
                "mask": out["seg_probs"][0].argmax(dim=0).numpy()
                .astype(np.uint8),
                "modality": out["mu"][0].numpy(),
                "film_output": out["film"][0, 0].numpy(),
                "reconstruction": out["recon"][0, 0].numpy()}


# ---------------------------------------------------------------------------
# weight export

def _export_conv(tensors, name, conv):
    tensors[f"{name}.weight"] = conv.weight.detach().numpy()
    tensors[f"{name}.bias"] = conv.bias.detach().numpy()


def _export_block(tensors, name, blk):
    _export_conv(tensors, name, blk.conv)
    tensors[f"{name}.bn.gamma"] = blk.bn.weight.detach().numpy()
    tensors[f"{name}.bn.beta"] = blk.bn.bias.detach().numpy()
    tensors[f"{name}.bn.mean"] = blk.bn.running_mean.detach().numpy()
    tensors[f"{name}.bn.var"] = blk.bn.running_var.detach().numpy()


def _export_unet(tensors, prefix, unet):
    for i, blk in enumerate(unet.enc):
        _export_block(tensors, f"{prefix}.enc{i}.conv0", blk[0])
        _export_block(tensors, f"{prefix}.enc{i}.conv1", blk[1])
    _export_block(tensors, f"{prefix}.bottleneck.conv0", unet.bottleneck[0])
    _export_block(tensors, f"{prefix}.bottleneck.conv1", unet.bottleneck[1])
    for j, blk in enumerate(unet.dec):
        i = unet.depth - 1 - j
        _export_block(tensors, f"{prefix}.dec{i}.conv0", blk[0])
        _export_block(tensors, f"{prefix}.dec{i}.conv1", blk[1])
    _export_conv(tensors, f"{prefix}.out", unet.out)


def export_tensors(model):
    """Flat name -> float32 array dict in the XSDW naming scheme."""
    t = {}
    _export_unet(t, "anatomy", model.anatomy)
    _export_unet(t, "final", model.final)
    for i, blk in enumerate(model.segmentor.hidden):
        _export_block(t, f"segmentor.conv{i}", blk)
    i = len(model.segmentor.hidden)
    _export_conv(t, f"segmentor.conv{i}", model.segmentor.out)
    for i, blk in enumerate(model.modality.convs):
        _export_block(t, f"modality.conv{i}", blk)
    for fc, name in ((model.modality.fc_mu, "fc_mu"),
                     (model.modality.fc_logvar, "fc_logvar")):
        t[f"modality.{name}.weight"] = fc.weight.detach().numpy()
        t[f"modality.{name}.bias"] = fc.bias.detach().numpy()
    _export_conv(t, "film.conv_in", model.film.conv_in)
    for i, blk in enumerate(model.film.blocks):
        _export_conv(t, f"film.block{i}.conv", blk.conv)
        for head, nm in ((blk.gamma, "gamma"), (blk.beta, "beta")):
            t[f"film.block{i}.{nm}.weight"] = head.weight.detach().numpy()
            t[f"film.block{i}.{nm}.bias"] = head.bias.detach().numpy()
    _export_conv(t, "film.out", model.film.out)
    return t
