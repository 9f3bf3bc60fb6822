"""Probabilistic encoder/decoder pair with a diagonal-Gaussian latent space.

Two variants: a strided convolutional stack (5x5 kernels, stride 2 down;
nearest-neighbor resize-by-2 plus 3x3 stride-1 convolutions up) for image
grids, and a fully-connected stack for flat inputs. Decoders emit Bernoulli
means through a sigmoid, so reconstruction is scored with per-pixel binary
cross-entropy.

Models run in float64 throughout: training at desk scale is cheap and exact
enough for finite-difference gradient verification.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgumentError, NumericDomainError

DTYPE = torch.float64
LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
PIXEL_EPS = 1e-8

CONV_VARIANT = "conv_dvc1"
MLP_VARIANT = "mlp_dvc2"
DEFAULT_MLP_HIDDEN = (500, 500, 1000)


class EncoderOutput(NamedTuple):
    """Latent diagonal-Gaussian parameters for a batch."""

    mu: torch.Tensor
    logvar: torch.Tensor


@dataclass(frozen=True)
class ArchitectureSpec:
    """Resolved network layout for one model variant.

    ``mlp_dims`` lists every encoder width including input and latent
    (d_x, h1, ..., d_z); the decoder mirrors it. ``conv_channels`` lists the
    encoder stage channels; each stage halves the spatial size, so height and
    width must be divisible by 2**len(conv_channels).
    """

    variant: str
    input_shape: tuple[int, int, int]
    latent_dim: int = 10
    conv_channels: tuple[int, ...] = ()
    mlp_dims: tuple[int, ...] = ()

    def __post_init__(self):
        if self.variant not in (CONV_VARIANT, MLP_VARIANT):
            raise InvalidArgumentError(f"unknown variant {self.variant!r}")
        shape = tuple(int(d) for d in self.input_shape)
        if len(shape) != 3 or any(d < 1 for d in shape):
            raise InvalidArgumentError(f"bad input_shape {self.input_shape}")
        object.__setattr__(self, "input_shape", shape)
        if self.latent_dim < 1:
            raise InvalidArgumentError("latent_dim must be positive")
        d_x = int(np.prod(shape))
        if self.variant == MLP_VARIANT:
            dims = tuple(int(d) for d in self.mlp_dims) or (
                (d_x,) + DEFAULT_MLP_HIDDEN + (self.latent_dim,))
            if len(dims) < 2 or dims[0] != d_x or dims[-1] != self.latent_dim:
                raise InvalidArgumentError(
                    f"mlp_dims must run {d_x} -> ... -> {self.latent_dim}, got {dims}")
            object.__setattr__(self, "mlp_dims", dims)
            object.__setattr__(self, "conv_channels", ())
        else:
            _, h, w = shape
            channels = tuple(int(c) for c in self.conv_channels) or (
                (32, 64) if min(h, w) < 64 else (32, 64, 128))
            factor = 2 ** len(channels)
            if h % factor or w % factor:
                raise InvalidArgumentError(
                    f"input {h}x{w} not divisible by 2^{len(channels)} stages")
            object.__setattr__(self, "conv_channels", channels)
            object.__setattr__(self, "mlp_dims", ())

    @property
    def d_x(self) -> int:
        return int(np.prod(self.input_shape))

    def to_manifest(self) -> dict:
        return {
            "variant": self.variant,
            "input_shape": list(self.input_shape),
            "latent_dim": self.latent_dim,
            "conv_channels": list(self.conv_channels),
            "mlp_dims": list(self.mlp_dims),
        }

    @classmethod
    def from_manifest(cls, d: dict) -> "ArchitectureSpec":
        return cls(variant=d["variant"], input_shape=tuple(d["input_shape"]),
                   latent_dim=int(d["latent_dim"]),
                   conv_channels=tuple(d.get("conv_channels") or ()),
                   mlp_dims=tuple(d.get("mlp_dims") or ()))


class Vae(nn.Module):
    """Encoder/decoder pair; ``encode`` returns (mu, logvar), ``decode`` Bernoulli means."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        c, h, w = spec.input_shape
        if spec.variant == MLP_VARIANT:
            dims = spec.mlp_dims
            self.enc_hidden = nn.ModuleList(
                nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 2))
            self.mu_head = nn.Linear(dims[-2], dims[-1])
            self.logvar_head = nn.Linear(dims[-2], dims[-1])
            rev = dims[::-1]
            self.dec_hidden = nn.ModuleList(
                nn.Linear(rev[i], rev[i + 1]) for i in range(len(rev) - 2))
            self.dec_out = nn.Linear(rev[-2], rev[-1])
        else:
            channels = spec.conv_channels
            self.enc_convs = nn.ModuleList()
            prev = c
            for ch in channels:
                self.enc_convs.append(nn.Conv2d(prev, ch, kernel_size=5, stride=2, padding=2))
                prev = ch
            self.bottleneck_hw = (h // 2 ** len(channels), w // 2 ** len(channels))
            flat = channels[-1] * self.bottleneck_hw[0] * self.bottleneck_hw[1]
            self.mu_head = nn.Linear(flat, spec.latent_dim)
            self.logvar_head = nn.Linear(flat, spec.latent_dim)
            self.dec_in = nn.Linear(spec.latent_dim, flat)
            self.dec_convs = nn.ModuleList()
            rev_channels = channels[::-1]
            for i, ch in enumerate(rev_channels):
                out_ch = rev_channels[i + 1] if i + 1 < len(rev_channels) else c
                self.dec_convs.append(nn.Conv2d(ch, out_ch, kernel_size=3, stride=1, padding=1))
        self.to(DTYPE)

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 2 and x.shape[1] == self.spec.d_x:
            x = x.reshape(x.shape[0], *self.spec.input_shape)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise InvalidArgumentError(
                f"input shape {tuple(x.shape)} does not match {self.spec.input_shape}")
        return x

    def encode(self, x) -> EncoderOutput:
        x = self._check_input(torch.as_tensor(x, dtype=DTYPE))
        if self.spec.variant == MLP_VARIANT:
            h = x.reshape(x.shape[0], -1)
            for layer in self.enc_hidden:
                h = torch.relu(layer(h))
        else:
            h = x
            for conv in self.enc_convs:
                h = torch.relu(conv(h))
            h = h.reshape(h.shape[0], -1)
        mu = self.mu_head(h)
        logvar = torch.clamp(self.logvar_head(h), LOGVAR_MIN, LOGVAR_MAX)
        return EncoderOutput(mu=mu, logvar=logvar)

    def decode(self, z) -> torch.Tensor:
        z = torch.as_tensor(z, dtype=DTYPE)
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise InvalidArgumentError(
                f"latent batch must be N x {self.spec.latent_dim}, got {tuple(z.shape)}")
        if not torch.isfinite(z).all():
            raise NumericDomainError("non-finite latent input to decode")
        if self.spec.variant == MLP_VARIANT:
            h = z
            for layer in self.dec_hidden:
                h = torch.relu(layer(h))
            out = torch.sigmoid(self.dec_out(h))
            return out.reshape(z.shape[0], *self.spec.input_shape)
        h = torch.relu(self.dec_in(z))
        ch = self.spec.conv_channels[-1]
        h = h.reshape(z.shape[0], ch, *self.bottleneck_hw)
        for i, conv in enumerate(self.dec_convs):
            h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = conv(h)
            if i + 1 < len(self.dec_convs):
                h = torch.relu(h)
        return torch.sigmoid(h)

    def forward(self, x, noise) -> torch.Tensor:
        out = self.encode(x)
        return self.decode(reparameterize(out, noise))


def build_model(spec: ArchitectureSpec, seed: int) -> Vae:
    """Construct a model with deterministic, seed-keyed initialization.

    Weights and biases are uniform in +-1/sqrt(fan_in), drawn from a dedicated
    generator so two builds with the same (spec, seed) are bit-identical.
    """
    model = Vae(spec)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Linear):
                fan_in = module.weight.shape[1]
            elif isinstance(module, nn.Conv2d):
                fan_in = module.weight.shape[1] * module.kernel_size[0] * module.kernel_size[1]
            else:
                continue
            bound = 1.0 / math.sqrt(fan_in)
            module.weight.uniform_(-bound, bound, generator=gen)
            if module.bias is not None:
                module.bias.uniform_(-bound, bound, generator=gen)
    return model


def reparameterize(out: EncoderOutput, noise) -> torch.Tensor:
    """z = mu + exp(0.5 * logvar) * noise, with caller-supplied standard normal noise."""
    noise = torch.as_tensor(noise, dtype=DTYPE)
    if noise.shape != out.mu.shape:
        raise InvalidArgumentError(
            f"noise shape {tuple(noise.shape)} must match mu {tuple(out.mu.shape)}")
    return out.mu + torch.exp(0.5 * out.logvar) * noise


def reconstruction_loss(x, x_hat) -> torch.Tensor:
    """Mean over samples of the per-pixel binary cross-entropy (summed per sample)."""
    x = torch.as_tensor(x, dtype=DTYPE)
    x_hat = torch.as_tensor(x_hat, dtype=DTYPE)
    if x.shape != x_hat.shape:
        raise InvalidArgumentError(
            f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    x_hat = torch.clamp(x_hat, PIXEL_EPS, 1.0 - PIXEL_EPS)
    bce = -(x * torch.log(x_hat) + (1.0 - x) * torch.log(1.0 - x_hat))
    return bce.reshape(x.shape[0], -1).sum(dim=1).mean()


def gaussian_prior_kl(out: EncoderOutput) -> torch.Tensor:
    """Mean over samples of KL(N(mu, diag exp(logvar)) || N(0, I)) in closed form."""
    per_dim = 0.5 * (out.mu ** 2 + torch.exp(out.logvar) - 1.0 - out.logvar)
    return per_dim.sum(dim=1).mean()


def network_loss(model: Vae, x, noise) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, reconstruction, prior KL) for one batch; total = recon + kl."""
    x = model._check_input(torch.as_tensor(x, dtype=DTYPE))
    out = model.encode(x)
    z = reparameterize(out, noise)
    x_hat = model.decode(z)
    recon = reconstruction_loss(x, x_hat)
    kl = gaussian_prior_kl(out)
    return recon + kl, recon, kl


def sample_images(model: Vae, n: int, seed: int) -> torch.Tensor:
    """Decode n latent draws from the standard normal prior, deterministic per seed."""
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(n, model.spec.latent_dim, generator=gen, dtype=DTYPE)
    with torch.no_grad():
        return model.decode(z)


def parameter_count(model: Vae) -> int:
    return sum(p.numel() for p in model.parameters())


def state_arrays(model: Vae) -> dict[str, np.ndarray]:
    """State dict as plain numpy arrays (bit-exact float64 round trip)."""
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def load_state_arrays(model: Vae, arrays: dict[str, np.ndarray]) -> Vae:
    tensors = {k: torch.from_numpy(np.asarray(v)).to(DTYPE) for k, v in arrays.items()}
    model.load_state_dict(tensors)
    return model
