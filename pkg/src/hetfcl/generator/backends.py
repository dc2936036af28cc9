"""Frozen generative backends conditioned on prototype vectors.

Both backends expose a noise predictor ``eps(x_t, t, cond)`` so the same
prototype objective drives either one:

* ``ToyDDPMBackend`` wraps a small U-Net trained once as a class-conditional
  DDPM. The conditioning vector joins the timestep embedding, which modulates
  every residual block (scale and shift), and is also decoded to an extra
  input plane. Sampling applies classifier-free guidance against the zero
  condition.
* ``MockBackend`` is a linear-Gaussian stand-in built from PCA statistics of a
  training split. Its noise predictor is the exact denoiser of a point mass at
  ``decode(cond)``, which makes the prototype loss quadratic in ``cond``.

Images cross the backend boundary in unit scale [0, 1], shaped (N, C, H, W);
internally the diffusion works on [-1, 1].
"""
from __future__ import annotations

import math
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..checkpoint import read_payload, write_payload
from ..utils import module_hash
from .schedule import NoiseSchedule, forward_diffuse

BACKEND_KINDS = ("toy_ddpm", "mock")
DEFAULT_GUIDANCE = 3.0


def to_model_scale(x: torch.Tensor) -> torch.Tensor:
    return x * 2.0 - 1.0


def to_unit_scale(x: torch.Tensor) -> torch.Tensor:
    return (x + 1.0) / 2.0


def stratified_timesteps(n: int, timesteps: int, generator: torch.Generator) -> torch.Tensor:
    """n timesteps in 1..T, one per equal-width slice of [0, 1), in random order.

    Each entry is still uniform on 1..T, so losses stay unbiased; the batch
    just covers the noise levels evenly.
    """
    u = torch.rand(n, generator=generator, dtype=torch.float64)
    slot = torch.randperm(n, generator=generator).double()
    return ((slot + u) * timesteps / n).long().clamp(max=timesteps - 1) + 1


class GeneratorBackend(nn.Module):
    kind = "abstract"
    # scale of a fresh prototype draw
    init_std = 0.02

    def __init__(self, schedule: NoiseSchedule, cond_dim: int, image_shape: tuple[int, int, int]):
        super().__init__()
        self.schedule = schedule
        self.cond_dim = cond_dim
        self.image_shape = tuple(image_shape)  # (C, H, W)

    def eps(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def sample(self, cond: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        raise NotImplementedError

    def freeze(self) -> "GeneratorBackend":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def content_hash(self) -> str:
        return module_hash(self)

    def prototype_loss(self, x0: torch.Tensor, proto: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        """One Monte-Carlo estimate of E ||eps - eps_theta(x_t, t, p)||^2 over a batch.

        ``x0`` is a unit-scale batch of one class; t and eps are drawn fresh.
        """
        x0 = to_model_scale(x0)
        n = x0.shape[0]
        t = stratified_timesteps(n, self.schedule.timesteps, generator)
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
        x_t = forward_diffuse(x0, t, noise, self.schedule)
        pred = self.eps(x_t, t, proto.expand(n, -1))
        return F.mse_loss(pred, noise)


# ---------------------------------------------------------------------------
# mock


class MockBackend(GeneratorBackend):
    kind = "mock"

    def __init__(self, basis: torch.Tensor, offset: torch.Tensor, comp_means: torch.Tensor,
                 comp_stds: torch.Tensor, image_shape: tuple[int, int, int], schedule: NoiseSchedule):
        super().__init__(schedule, basis.shape[1], image_shape)
        self.register_buffer("basis", basis)          # (D, d) orthonormal columns
        self.register_buffer("offset", offset)        # (D,) mean image, model scale
        self.register_buffer("comp_means", comp_means)  # (C, d) mixture component means
        self.register_buffer("comp_stds", comp_stds)    # (C, d) diagonal std devs

    @classmethod
    def fit(cls, images: np.ndarray, labels: np.ndarray, dim: int = 32,
            schedule: NoiseSchedule | None = None) -> "MockBackend":
        """Fit PCA basis and per-class diagonal Gaussians to unit-scale (N, H, W, C) images."""
        n, h, w, c = images.shape
        flat = images.reshape(n, -1).astype(np.float64) * 2.0 - 1.0
        mean = flat.mean(0)
        _, _, vt = np.linalg.svd(flat - mean, full_matrices=False)
        basis = vt[:dim].T
        coeffs = (flat - mean) @ basis
        classes = np.unique(labels)
        mus = np.stack([coeffs[labels == k].mean(0) for k in classes])
        sds = np.stack([coeffs[labels == k].std(0) for k in classes])
        return cls(torch.tensor(basis, dtype=torch.float32), torch.tensor(mean, dtype=torch.float32),
                   torch.tensor(mus, dtype=torch.float32), torch.tensor(sds, dtype=torch.float32),
                   (c, h, w), schedule or NoiseSchedule.linear()).freeze()

    def decode(self, cond: torch.Tensor) -> torch.Tensor:
        """Model-scale image mean for each conditioning row, shaped (N, C, H, W)."""
        flat = self.offset.to(cond.dtype) + cond @ self.basis.to(cond.dtype).T
        return flat.reshape((cond.shape[0],) + self.image_shape)

    def eps(self, x_t, t, cond):
        abar = self.schedule.bar(t).to(x_t.dtype).reshape(-1, 1, 1, 1)
        return (x_t - torch.sqrt(abar) * self.decode(cond.to(x_t.dtype))) / torch.sqrt(1.0 - abar)

    def nearest_component(self, cond: torch.Tensor) -> torch.Tensor:
        return torch.cdist(cond.float(), self.comp_means).argmin(1)

    @torch.no_grad()
    def sample(self, cond, generator):
        """Draw coefficients around ``cond`` with the nearest component's spread."""
        std = self.comp_stds[self.nearest_component(cond)]
        z = torch.randn(cond.shape, generator=generator)
        return to_unit_scale(self.decode(cond.float() + std * z))


# ---------------------------------------------------------------------------
# toy conditional DDPM


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, 2 * cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, e):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb(F.silu(e))[:, :, None, None].chunk(2, dim=1)
        h = self.conv2(F.silu(self.norm2(h) * (1 + scale) + shift))
        return h + self.skip(x)


class TinyUNet(nn.Module):
    """Two-level U-Net for 28x28 inputs.

    The condition enters twice: added to the time embedding that drives every
    block's FiLM, and decoded to a spatial map stacked onto the input.
    """

    def __init__(self, channels: int = 1, base: int = 32, emb_dim: int = 64, size: int = 28):
        super().__init__()
        self.emb_dim = emb_dim
        self.size = size
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        # bias-free so a zero condition means unconditional
        self.cond_proj = nn.Linear(emb_dim, emb_dim, bias=False)
        self.cond_map = nn.Linear(emb_dim, size * size, bias=False)
        self.inc = nn.Conv2d(channels + 1, base, 3, padding=1)
        self.enc1 = ResBlock(base, base, emb_dim)
        self.down1 = nn.Conv2d(base, 2 * base, 4, 2, 1)
        self.enc2 = ResBlock(2 * base, 2 * base, emb_dim)
        self.down2 = nn.Conv2d(2 * base, 2 * base, 4, 2, 1)
        self.mid = ResBlock(2 * base, 2 * base, emb_dim)
        self.up2 = nn.ConvTranspose2d(2 * base, 2 * base, 4, 2, 1)
        self.dec2 = ResBlock(4 * base, 2 * base, emb_dim)
        self.up1 = nn.ConvTranspose2d(2 * base, base, 4, 2, 1)
        self.dec1 = ResBlock(2 * base, base, emb_dim)
        self.out = nn.Sequential(nn.GroupNorm(8, base), nn.SiLU(), nn.Conv2d(base, channels, 3, padding=1))

    def forward(self, x, t, cond):
        e = self.time_mlp(timestep_embedding(t, self.emb_dim)) + self.cond_proj(cond)
        cmap = self.cond_map(cond).view(-1, 1, self.size, self.size)
        h0 = self.inc(torch.cat([x, cmap], 1))
        h1 = self.enc1(h0, e)
        h2 = self.enc2(self.down1(h1), e)
        m = self.mid(self.down2(h2), e)
        u2 = self.dec2(torch.cat([self.up2(m), h2], 1), e)
        u1 = self.dec1(torch.cat([self.up1(u2), h1], 1), e)
        return self.out(u1)


class ToyDDPMBackend(GeneratorBackend):
    kind = "toy_ddpm"
    # fresh prototypes come from the same prior as the training class embeddings
    init_std = 1.0

    def __init__(self, unet: TinyUNet, schedule: NoiseSchedule, image_shape=(1, 28, 28),
                 guidance: float = DEFAULT_GUIDANCE):
        super().__init__(schedule, unet.emb_dim, image_shape)
        if guidance < 0:
            raise ValueError("guidance must be >= 0")
        self.unet = unet
        self.guidance = guidance

    def eps(self, x_t, t, cond):
        return self.unet(x_t.float(), t, cond.float())

    @torch.no_grad()
    def sample(self, cond, generator, batch_size: int = 256):
        """Ancestral DDPM sampling from pure noise with sigma_t^2 = 1 - alpha_t.

        With ``guidance`` w > 0 the noise estimate is eps_c + w (eps_c - eps_0).
        """
        outs = [self._sample_batch(cond[i:i + batch_size], generator) for i in range(0, len(cond), batch_size)]
        if not outs:
            return torch.empty((0,) + self.image_shape)
        return torch.cat(outs)

    def _sample_batch(self, cond, generator):
        s = self.schedule
        alphas, abars = s.alphas.float(), s.alpha_bars.float()
        n = cond.shape[0]
        x = torch.randn((n,) + self.image_shape, generator=generator)
        for t in range(s.timesteps, 0, -1):
            tt = torch.full((n,), t, dtype=torch.long)
            eps = self.eps(x, tt, cond)
            if self.guidance:
                eps = eps + self.guidance * (eps - self.eps(x, tt, torch.zeros_like(cond)))
            a, ab = alphas[t - 1], abars[t - 1]
            mean = (x - (1 - a) / torch.sqrt(1 - ab) * eps) / torch.sqrt(a)
            if t > 1:
                x = mean + torch.sqrt(1 - a) * torch.randn(x.shape, generator=generator)
            else:
                x = mean
        return to_unit_scale(x.clamp(-1.0, 1.0))

    def save(self, path: str | Path, extra: dict | None = None) -> str:
        header = {"kind": self.kind, "base": self.unet.inc.out_channels, "emb_dim": self.unet.emb_dim,
                  "channels": self.image_shape[0], "image_shape": list(self.image_shape),
                  "alphas": [float(a) for a in self.schedule.alphas]}
        header.update(extra or {})
        return write_payload(path, header, OrderedDict(self.unet.state_dict()))

    @classmethod
    def load(cls, path: str | Path, guidance: float | None = None) -> "ToyDDPMBackend":
        meta, tensors = read_payload(path)
        if meta.get("kind") != cls.kind:
            raise ValueError(f"{path} does not hold a toy_ddpm backend")
        unet = TinyUNet(meta["channels"], meta["base"], meta["emb_dim"], meta["image_shape"][1])
        unet.load_state_dict(tensors)
        sched = NoiseSchedule(torch.tensor(meta["alphas"], dtype=torch.float64))
        g = DEFAULT_GUIDANCE if guidance is None else guidance
        return cls(unet, sched, tuple(meta["image_shape"]), g).freeze()


def train_toy_ddpm(images: np.ndarray, labels: np.ndarray, epochs: int, seed: int,
                   timesteps: int = 200, base: int = 32, emb_dim: int = 64, batch_size: int = 32,
                   lr: float = 2e-3, p_uncond: float = 0.1, log=None) -> ToyDDPMBackend:
    """Train the class-conditional toy DDPM used as the frozen backend.

    Classes condition through a learned embedding table that is discarded after
    training; dropping the condition to zero with probability ``p_uncond`` keeps
    small-norm prototypes close to the unconditional model.
    """
    from ..utils import torch_generator

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        unet = TinyUNet(images.shape[-1], base, emb_dim, images.shape[1])
        classes = np.unique(labels)
        table = nn.Embedding(len(classes), emb_dim)
        nn.init.normal_(table.weight, std=1.0)
    remap = {int(c): i for i, c in enumerate(classes)}
    y_all = torch.tensor([remap[int(c)] for c in labels])
    x_all = to_model_scale(torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float())
    sched = NoiseSchedule.linear(timesteps)
    abars = sched.alpha_bars.float()
    opt = torch.optim.Adam(list(unet.parameters()) + list(table.parameters()), lr=lr)
    gen = torch_generator(seed, 77)
    for epoch in range(epochs):
        order = torch.randperm(len(y_all), generator=gen)
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            x0, y = x_all[idx], y_all[idx]
            n = len(idx)
            t = torch.randint(1, timesteps + 1, (n,), generator=gen)
            noise = torch.randn(x0.shape, generator=gen)
            ab = abars[t - 1].reshape(-1, 1, 1, 1)
            x_t = torch.sqrt(ab) * x0 + torch.sqrt(1 - ab) * noise
            keep = (torch.rand(n, generator=gen) >= p_uncond).float()[:, None]
            cond = table(y) * keep
            loss = F.mse_loss(unet(x_t, t, cond), noise)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * n
        if log is not None:
            log(epoch, total / len(order))
    backend = ToyDDPMBackend(unet, sched, (images.shape[-1],) + images.shape[1:3]).freeze()
    # kept outside the state dict: diagnostics only, never saved
    backend.class_table = {int(c): table.weight[i].detach().clone() for i, c in enumerate(classes)}
    return backend
