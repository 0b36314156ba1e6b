"""Generator, PatchGAN discriminator and baseline U-Net.

All networks take images shaped (N, 1, H, W) in [0, 1] and are built
deterministically from an integer seed. The generator and the U-Net share
one encoder/decoder implementation; the generator concatenates a tiled
latent vector onto the innermost feature map, the U-Net does not.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import child_seed, make_rng
from .exceptions import InvalidConfigError, InvalidInputError, UnsupportedFormatError

INIT_STD = 0.02


@dataclass(frozen=True)
class GeneratorConfig:
    depth: int = 8
    base_width: int = 32
    latent_dim: int = 16
    input_size: int = 256

    def __post_init__(self):
        if self.depth < 1:
            raise InvalidConfigError("depth must be >= 1")
        if self.base_width < 1:
            raise InvalidConfigError("base_width must be >= 1")
        if self.latent_dim < 0:
            raise InvalidConfigError("latent_dim must be >= 0")
        if self.input_size < 2 ** self.depth or self.input_size % (2 ** self.depth):
            raise InvalidConfigError(
                f"input_size {self.input_size} must be a multiple of 2**depth = {2 ** self.depth}")

    def widths(self):
        return [min(self.base_width * 2 ** i, 8 * self.base_width) for i in range(self.depth)]

    @property
    def bottleneck_size(self):
        return self.input_size // 2 ** self.depth


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_width: int = 64
    strides: tuple = (2, 2, 2, 1, 1)
    kernel_size: int = 4
    in_channels: int = 2
    relu_slope: float = 0.2

    def widths(self):
        scale = self.base_width / 64
        return [max(1, int(round(w * scale))) for w in (64, 128, 256, 512, 512)][:len(self.strides)]

    def receptive_field(self):
        """Receptive field of one logit, by the standard (rf, jump) recurrence."""
        rf, jump = 1, 1
        for s in self.strides:
            rf += (self.kernel_size - 1) * jump
            jump *= s
        return rf  # the 1x1 head adds nothing

    def output_size(self, input_size):
        size = input_size
        for s in self.strides:
            size = (size + 2 - self.kernel_size) // s + 1
        return size


class SeededDropout(nn.Module):
    """Inverted dropout whose mask comes from an explicit torch.Generator.

    ``active`` and ``generator`` are set by the owning network per forward
    call; with ``active`` False this is the identity.
    """

    def __init__(self, p):
        super().__init__()
        self.p = float(p)
        self.active = False
        self.generator = None

    def forward(self, x):
        if not self.active or self.p == 0.0:
            return x
        keep = torch.rand(x.shape, generator=self.generator, dtype=x.dtype) >= self.p
        return x * keep / (1.0 - self.p)

    def extra_repr(self):
        return f"p={self.p}"


class _EncoderDecoder(nn.Module):
    def __init__(self, cfg, latent_dim, dropout_p=0.0):
        super().__init__()
        self.cfg = cfg
        self.latent_dim = latent_dim
        widths = cfg.widths()
        depth = cfg.depth

        self.down = nn.ModuleList()
        self.down_norm = nn.ModuleList()
        in_ch = 1
        for i, ch in enumerate(widths):
            self.down.append(nn.Conv2d(in_ch, ch, 4, stride=2, padding=1))
            # no norm on the first layer or the (possibly 1x1) innermost one
            use_norm = 0 < i < depth - 1
            self.down_norm.append(nn.InstanceNorm2d(ch) if use_norm else nn.Identity())
            in_ch = ch

        self.up = nn.ModuleList()
        self.up_norm = nn.ModuleList()
        self.up_drop = nn.ModuleList()
        for k in reversed(range(depth)):
            if k == depth - 1:
                in_ch = widths[k] + latent_dim
            else:
                in_ch = 2 * widths[k]
            out_ch = widths[k - 1] if k > 0 else 1
            self.up.append(nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1))
            self.up_norm.append(nn.InstanceNorm2d(out_ch) if k > 0 else nn.Identity())
            n_up = len(self.up)
            self.up_drop.append(SeededDropout(dropout_p) if dropout_p > 0 and n_up <= 3 and k > 0
                                else nn.Identity())

    def encode(self, x):
        skips = []
        h = x
        for i, (conv, norm) in enumerate(zip(self.down, self.down_norm)):
            if i > 0:
                h = F.leaky_relu(h, 0.2)
            h = norm(conv(h))
            skips.append(h)
        return skips

    def decode(self, skips, bottleneck):
        h = bottleneck
        depth = self.cfg.depth
        for j, (conv, norm, drop) in enumerate(zip(self.up, self.up_norm, self.up_drop)):
            k = depth - 1 - j
            if j > 0:
                h = F.relu(torch.cat([h, skips[k]], dim=1))
            else:
                # latent channels bypass the ReLU; rectifying them would discard negative draws
                n_feat = skips[-1].shape[1]
                h = torch.cat([F.relu(h[:, :n_feat]), h[:, n_feat:]], dim=1)
            h = norm(conv(h))
            h = drop(h)
        return torch.sigmoid(h)

    def _check_input(self, x):
        size = self.cfg.input_size
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != size or x.shape[3] != size:
            raise InvalidInputError(
                f"expected input shaped (N, 1, {size}, {size}), got {tuple(x.shape)}")


class Generator(_EncoderDecoder):
    """U-Net generator with the latent code tiled and concatenated at the bottleneck."""

    kind = "generator"

    def __init__(self, cfg):
        super().__init__(cfg, latent_dim=cfg.latent_dim)

    def bottleneck(self, x, z):
        skips = self.encode(x)
        inner = skips[-1]
        if z.dim() == 1:
            z = z.unsqueeze(0).expand(x.shape[0], -1)
        if z.shape != (x.shape[0], self.latent_dim):
            raise InvalidInputError(
                f"latent must have shape ({x.shape[0]}, {self.latent_dim}), got {tuple(z.shape)}")
        tiled = z[:, :, None, None].expand(-1, -1, inner.shape[2], inner.shape[3])
        return skips, torch.cat([inner, tiled.to(inner.dtype)], dim=1)

    def forward(self, x, z):
        self._check_input(x)
        skips, h = self.bottleneck(x, z)
        return self.decode(skips, h)


class UNet(_EncoderDecoder):
    """Generator topology without noise injection; optional seeded decoder dropout."""

    kind = "unet"

    def __init__(self, cfg, dropout_p=0.0):
        if not 0.0 <= dropout_p < 1.0:
            raise InvalidConfigError("dropout_p must lie in [0, 1)")
        super().__init__(cfg, latent_dim=0, dropout_p=dropout_p)
        self.dropout_p = float(dropout_p)

    def set_dropout(self, active, generator=None):
        for m in self.up_drop:
            if isinstance(m, SeededDropout):
                m.active = active
                m.generator = generator

    def forward(self, x):
        self._check_input(x)
        skips = self.encode(x)
        return self.decode(skips, skips[-1])


class Discriminator(nn.Module):
    """Conditional PatchGAN: layout and image are concatenated channel-wise."""

    kind = "discriminator"

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        layers = []
        in_ch = cfg.in_channels
        for ch, s in zip(cfg.widths(), cfg.strides):
            layers += [nn.Conv2d(in_ch, ch, cfg.kernel_size, stride=s, padding=1),
                       nn.LeakyReLU(cfg.relu_slope)]
            in_ch = ch
        layers.append(nn.Conv2d(in_ch, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, layout, image):
        if layout.shape != image.shape:
            raise InvalidInputError(
                f"layout {tuple(layout.shape)} and image {tuple(image.shape)} differ in shape")
        return self.net(torch.cat([layout, image], dim=1))


class UNetEnsembleModule(nn.Module):
    """K independently trained U-Nets stored together in one checkpoint."""

    kind = "ensemble"

    def __init__(self, members):
        super().__init__()
        members = list(members)
        if not members:
            raise InvalidInputError("ensemble needs at least one member")
        self.members = nn.ModuleList(members)
        self.cfg = members[0].cfg


def init_weights(module, seed):
    """N(0, 0.02^2) weights and zero biases, drawn from a seeded generator."""
    gen = torch.Generator().manual_seed(child_seed(seed, "init", 0) & 0x7FFF_FFFF_FFFF_FFFF)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                p.normal_(0.0, INIT_STD, generator=gen)
    return module


def build_generator(cfg, seed):
    return init_weights(Generator(cfg), seed).eval()


def build_discriminator(cfg, seed):
    return init_weights(Discriminator(cfg), seed).eval()


def build_unet(cfg, dropout_p=0.0, seed=0):
    return init_weights(UNet(cfg, dropout_p), seed).eval()


def parameter_count(module):
    return sum(p.numel() for p in module.parameters())


def weights_checksum(module):
    """Hex SHA-256 over the float32 little-endian bytes of every parameter."""
    h = hashlib.sha256()
    for name, p in module.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# inference helpers
# --------------------------------------------------------------------------

def _as_batch(layout):
    arr = np.asarray(layout, dtype=np.float32)
    if arr.ndim != 2:
        raise InvalidInputError(f"layout must be 2-D, got shape {arr.shape}")
    return torch.from_numpy(arr)[None, None]


def latent_from_seed(seed, latent_dim, m=0):
    """Standard-normal latent vector from child seed ``(seed, "z", m)``."""
    return make_rng(seed, "z", m).standard_normal(latent_dim).astype(np.float32)


def generator_forward(gen, layout, z):
    z = np.asarray(z, dtype=np.float32)
    if z.shape != (gen.latent_dim,):
        raise InvalidInputError(f"z must have length {gen.latent_dim}, got shape {z.shape}")
    x = _as_batch(layout)
    gen.eval()
    with torch.no_grad():
        out = gen(x, torch.from_numpy(z))
    return out[0, 0].double().numpy()


def discriminator_forward(disc, layout, image):
    layout = np.asarray(layout, dtype=np.float32)
    image = np.asarray(image, dtype=np.float32)
    if layout.shape != image.shape:
        raise InvalidInputError(f"layout {layout.shape} and image {image.shape} differ in shape")
    with torch.no_grad():
        out = disc(_as_batch(layout), _as_batch(image))
    return out[0, 0].double().numpy()


def unet_forward(unet, layout, dropout_active=False, seed=0):
    x = _as_batch(layout)
    gen = None
    if dropout_active:
        gen = torch.Generator().manual_seed(child_seed(seed, "dropout", 0) & 0x7FFF_FFFF_FFFF_FFFF)
    unet.set_dropout(dropout_active, gen)
    try:
        with torch.no_grad():
            out = unet(x)
    finally:
        unet.set_dropout(False)
    return out[0, 0].double().numpy()


def sample_outputs(gen, layout, M, seed):
    """``M`` generator outputs, sample ``m`` using latent from ``(seed, "z", m)``."""
    if M < 1:
        raise InvalidInputError("M must be >= 1")
    x = _as_batch(layout)
    zs = np.stack([latent_from_seed(seed, gen.latent_dim, m) for m in range(M)])
    gen.eval()
    with torch.no_grad():
        out = gen(x.expand(M, -1, -1, -1), torch.from_numpy(zs))
    return [o[0].double().numpy() for o in out]


def mc_dropout_samples(unet, layout, M, seed):
    """``M`` forward passes with dropout active, pass ``m`` seeded by ``(seed, "mc", m)``."""
    if M < 1:
        raise InvalidInputError("M must be >= 1")
    return [unet_forward(unet, layout, True, child_seed(seed, "mc", m)) for m in range(M)]


def ensemble_samples(models, layout):
    """One deterministic forward per model, in model order."""
    models = list(models)
    if not models:
        raise InvalidInputError("ensemble needs at least one model")
    shape = np.shape(layout)
    out = []
    for model in models:
        size = model.cfg.input_size
        if shape != (size, size):
            raise InvalidInputError(
                f"layout {shape} does not match checkpoint input size {size}x{size}")
        out.append(unet_forward(model, layout, dropout_active=False))
    return out


def draw_samples(model, layout, M, seed):
    """``M`` outputs from any checkpointed predictor.

    Generators sample the latent, dropout U-Nets sample masks, a plain U-Net
    repeats its single prediction, and an ensemble cycles through its members.
    """
    if M < 1:
        raise InvalidInputError("M must be >= 1")
    if isinstance(model, Generator):
        return sample_outputs(model, layout, M, seed)
    if isinstance(model, UNet):
        if model.dropout_p > 0:
            return mc_dropout_samples(model, layout, M, seed)
        return [unet_forward(model, layout)] * M
    if isinstance(model, UNetEnsembleModule):
        outs = ensemble_samples(model.members, layout)
        return [outs[m % len(outs)] for m in range(M)]
    raise InvalidInputError(f"cannot sample from {type(model).__name__}")


# --------------------------------------------------------------------------
# GFCK checkpoint format
# --------------------------------------------------------------------------
#
#   magic       4 bytes   b"GFCK"
#   version     u32 LE
#   header_len  u32 LE
#   header      UTF-8 JSON: {"architecture": {...}, "tensors": [{name, shape, offset}], ...}
#   payload     little-endian float32, offsets relative to payload start

CHECKPOINT_MAGIC = b"GFCK"
CHECKPOINT_VERSION = 1


def _architecture(model):
    if isinstance(model, Generator):
        return {"kind": "generator", "config": asdict(model.cfg)}
    if isinstance(model, UNet):
        return {"kind": "unet", "config": asdict(model.cfg), "dropout_p": model.dropout_p}
    if isinstance(model, Discriminator):
        cfg = asdict(model.cfg)
        cfg["strides"] = list(cfg["strides"])
        return {"kind": "discriminator", "config": cfg}
    if isinstance(model, UNetEnsembleModule):
        return {"kind": "ensemble", "members": [_architecture(m) for m in model.members]}
    raise InvalidInputError(f"cannot checkpoint {type(model).__name__}")


def _model_from_architecture(arch):
    kind = arch.get("kind")
    cfg = arch.get("config", {})
    if kind == "generator":
        return Generator(GeneratorConfig(**cfg))
    if kind == "unet":
        return UNet(GeneratorConfig(**cfg), arch.get("dropout_p", 0.0))
    if kind == "discriminator":
        cfg = dict(cfg)
        cfg["strides"] = tuple(cfg["strides"])
        return Discriminator(DiscriminatorConfig(**cfg))
    if kind == "ensemble":
        return UNetEnsembleModule(_model_from_architecture(a) for a in arch.get("members", []))
    raise UnsupportedFormatError(f"unknown architecture kind {kind!r}")


def checkpoint_bytes(model, metadata=None):
    tensors, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        data = t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {"architecture": _architecture(model), "tensors": tensors,
              "metadata": metadata or {}}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return b"".join([CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)),
                     header_bytes, *chunks])


def model_from_bytes(data):
    """Rebuild a model from GFCK bytes; returns ``(model, metadata)``."""
    if data[:4] != CHECKPOINT_MAGIC:
        raise UnsupportedFormatError("not a GFCK checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise UnsupportedFormatError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + header_len].decode("utf-8"))
    payload = memoryview(data)[12 + header_len:]
    model = _model_from_architecture(header["architecture"])
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        arr = np.frombuffer(payload[start:start + 4 * count], dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state, strict=True)
    return model.eval(), header.get("metadata", {})


def save_checkpoint(model, path, metadata=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, metadata))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
