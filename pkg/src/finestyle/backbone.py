"""The frozen generative stack: latent autoencoder, text encoder, noise predictor.

Two implementations share one interface (:class:`BackboneBundle`):

* ``make_toy_backbone`` builds a tiny deterministic stack (latents 4x8x8,
  d_text=32, T=50) used for tests and desk-scale runs.
* ``load_pretrained_backbone`` wraps a Stable Diffusion v1.x checkpoint
  directory through ``diffusers``/``transformers`` (optional dependencies).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from finestyle.prep import MAX_LENGTH, ClipTokenizer, ToyTokenizer

TOY_LATENT_SHAPE = (4, 8, 8)
TOY_D_TEXT = 32
TOY_T = 50
FULL_T = 1000
FULL_D_TEXT = 768
SD_LATENT_SCALE = 0.18215
SD_IMAGE_SIZE = 512


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative alphas of a discrete diffusion schedule (float64)."""

    alphas_cumprod: torch.Tensor

    def __post_init__(self):
        a = self.alphas_cumprod
        if a.ndim != 1 or len(a) < 1:
            raise ValueError("alphas_cumprod must be a non-empty vector")
        if not (a[0] <= 1 and a[-1] > 0 and bool((a[1:] < a[:-1]).all())):
            raise ValueError("alphas_cumprod must be strictly decreasing inside (0, 1]")

    @property
    def T(self) -> int:
        return len(self.alphas_cumprod)

    @classmethod
    def scaled_linear(cls, T: int, beta_start: float = 0.00085, beta_end: float = 0.012) -> "NoiseSchedule":
        betas = torch.linspace(beta_start**0.5, beta_end**0.5, T, dtype=torch.float64) ** 2
        return cls(torch.cumprod(1.0 - betas, dim=0))

    def alpha_bar(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if bool(((t < 0) | (t >= self.T)).any()):
            raise ValueError(f"timestep out of range [0, {self.T})")
        return self.alphas_cumprod[t]


def _broadcast_coef(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = coef.to(like.dtype)
    if coef.ndim == 0:
        return coef
    return coef.view(-1, *([1] * (like.ndim - 1)))


def add_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward diffusion: ``sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps``.

    ``t`` is an int or a (B,) tensor of timesteps matching the leading axis.
    """
    if z0.shape != eps.shape:
        raise ValueError(f"z0 and eps shapes differ: {tuple(z0.shape)} vs {tuple(eps.shape)}")
    ab = _broadcast_coef(schedule.alpha_bar(t), z0)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def parameter_hash(*modules: nn.Module) -> str:
    """sha256 over names, dtypes and raw bytes of every parameter and buffer."""
    h = hashlib.sha256()
    for i, m in enumerate(modules):
        for name, tensor in sorted(m.state_dict().items()):
            arr = tensor.detach().cpu().contiguous().numpy()
            h.update(f"{i}:{name}:{arr.dtype}:{arr.shape}".encode())
            h.update(arr.tobytes())
    return h.hexdigest()


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ToyTextEncoder(nn.Module):
    """Token embedding table followed by one causal self-attention mixing layer."""

    def __init__(self, vocab_size: int = 1024, d_text: int = TOY_D_TEXT, eos_id: int = ToyTokenizer.eos_id,
                 mix_gain: float = 4.0):
        super().__init__()
        self.eos_id = eos_id
        self.token = nn.Embedding(vocab_size, d_text)
        self.position = nn.Parameter(torch.empty(MAX_LENGTH, d_text))
        self.mix = nn.MultiheadAttention(d_text, num_heads=4, batch_first=True)
        self.norm = nn.LayerNorm(d_text)
        nn.init.normal_(self.token.weight, std=1.0)
        nn.init.normal_(self.position, std=0.1)
        with torch.no_grad():
            # without the gain the shared EOS embedding dominates every pooled output
            self.mix.out_proj.weight.mul_(mix_gain)
        self.register_buffer("causal", torch.triu(torch.ones(MAX_LENGTH, MAX_LENGTH, dtype=torch.bool), 1))

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        h = self.token(ids) + self.position
        mixed, _ = self.mix(h, h, h, attn_mask=self.causal, need_weights=False)
        return self.norm(h + mixed)

    def pooled(self, ids: torch.Tensor, hidden: torch.Tensor | None = None) -> torch.Tensor:
        hidden = self(ids) if hidden is None else hidden
        eos_pos = (ids == self.eos_id).int().argmax(dim=-1)
        return hidden[torch.arange(len(ids)), eos_pos]


class ToyNoisePredictor(nn.Module):
    """x0-parameterised denoiser with cross-attention conditioning.

    Layer one is multi-head cross-attention from per-position, time-aware
    queries onto the (layer-normalized) conditioning rows; layer two maps the
    attended features to a latent mean ``mu``. The noise prediction is the
    posterior-mean estimate of eps under ``z0 ~ N(mu, prior_scale^2 I)``::

        eps_hat = b * (z_t - a * mu) / (a^2 * prior_scale^2 + b^2)

    with ``a = sqrt(abar_t)``, ``b = sqrt(1 - abar_t)``. A conditioning that
    encodes the latent exactly drives the error to its irreducible floor.
    """

    def __init__(self, schedule: NoiseSchedule, latent_shape=TOY_LATENT_SHAPE, d_text: int = TOY_D_TEXT,
                 hidden: int = 64, heads: int = 8, prior_scale: float = 0.1, sharpness: float = 4.0,
                 out_gain: float = 3.0):
        super().__init__()
        c, h, w = latent_shape
        self.latent_shape = tuple(latent_shape)
        self.prior_scale = prior_scale
        self.sharpness = sharpness
        self.register_buffer("alphas_cumprod", schedule.alphas_cumprod.clone())
        self.position = nn.Parameter(torch.randn(h * w, hidden))
        self.time_proj = nn.Linear(hidden, hidden)
        self.context_norm = nn.LayerNorm(d_text)
        self.attn = nn.MultiheadAttention(hidden, heads, kdim=d_text, vdim=d_text, batch_first=True)
        self.out = nn.Linear(hidden, c)
        with torch.no_grad():
            self.out.weight.mul_(out_gain)

    def latent_mean(self, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b = cond.shape[0]
        temb = self.time_proj(timestep_embedding(t, self.position.shape[1]).to(cond.dtype))
        q = (self.position.unsqueeze(0) + temb.unsqueeze(1)) * self.sharpness
        ctx = self.context_norm(cond)
        h, _ = self.attn(q, ctx, ctx, need_weights=False)
        c, hh, ww = self.latent_shape
        return self.out(h).transpose(1, 2).reshape(b, c, hh, ww)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(z_t.shape[0])
        mu = self.latent_mean(t, cond)
        ab = _broadcast_coef(self.alphas_cumprod[t], z_t)
        a, b = ab.sqrt(), (1 - ab).sqrt()
        return b * (z_t - a * mu) / (ab * self.prior_scale**2 + b**2)


class ToyLatentCodec(nn.Module):
    """Identity on 4x8x8 latents; RGB images are pooled to 8x8 and given a
    luminance fourth channel, all mapped to [-1, 1]."""

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        if image.shape[-3:] == TOY_LATENT_SHAPE:
            return image
        if image.ndim == 3:
            return self.encode(image.unsqueeze(0))[0]
        if image.shape[1] != 3:
            raise ValueError("expected RGB images with values in [0, 1]")
        small = F.adaptive_avg_pool2d(image, TOY_LATENT_SHAPE[1:])
        lum = (0.299 * small[:, 0] + 0.587 * small[:, 1] + 0.114 * small[:, 2]).unsqueeze(1)
        return torch.cat([small, lum], dim=1) * 2 - 1

    def decode(self, z: torch.Tensor, size: int | None = None) -> torch.Tensor:
        """Latent -> RGB in [0, 1]. Without ``size`` this is the identity."""
        if size is None:
            return z
        rgb = ((z[..., :3, :, :] + 1) / 2).clamp(0, 1)
        squeeze = rgb.ndim == 3
        rgb = rgb.unsqueeze(0) if squeeze else rgb
        rgb = F.interpolate(rgb, size=(size, size), mode="nearest")
        return rgb[0] if squeeze else rgb


@dataclass
class BackboneBundle:
    """The frozen stack. All callables operate on batched tensors.

    ``latent_encoder`` maps (B,3,H,W) RGB in [0,1] to latents; ``latent_decoder``
    maps latents to (B,3,S,S) RGB given an output size; ``text_encoder`` maps
    (B,77) ids to (B,77,d_text); ``noise_predictor(z_t, t, cond)`` returns the
    predicted noise with z_t's shape.
    """

    latent_encoder: Callable
    latent_decoder: Callable
    text_encoder: nn.Module
    noise_predictor: nn.Module
    schedule: NoiseSchedule
    tokenizer: Callable
    d_text: int
    latent_shape: tuple[int, int, int]
    mode: str = "toy"
    frozen: bool = True
    modules: list[nn.Module] = field(default_factory=list)
    pooled_text: Callable | None = None

    def freeze(self) -> "BackboneBundle":
        for m in self.modules:
            m.requires_grad_(False)
            m.eval()
        self.frozen = True
        return self

    def to(self, dtype: torch.dtype) -> "BackboneBundle":
        for m in self.modules:
            m.to(dtype)
        return self

    @property
    def dtype(self) -> torch.dtype:
        return next(self.noise_predictor.parameters()).dtype

    def param_hash(self) -> str:
        return parameter_hash(*self.modules)

    def token_ids(self, texts: Sequence[str]) -> torch.Tensor:
        return torch.stack([self.tokenizer(t).as_tensor() for t in texts])

    def encode_text(self, texts: Sequence[str]) -> torch.Tensor:
        """(B, 77, d_text) content embeddings."""
        with torch.no_grad():
            return self.text_encoder(self.token_ids(texts))

    def encode_text_pooled(self, texts: Sequence[str]) -> torch.Tensor:
        """(B, d_text) end-of-sequence pooled text features."""
        with torch.no_grad():
            return self.pooled_text(self.token_ids(texts))

    def encode_latent(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.latent_encoder(images)

    def decode_latent(self, z: torch.Tensor, size: int | None = None) -> torch.Tensor:
        with torch.no_grad():
            return self.latent_decoder(z, size)

    def sample_timesteps(self, n: int, generator: torch.Generator) -> torch.Tensor:
        return torch.randint(0, self.schedule.T, (n,), generator=generator)


def make_toy_backbone(seed: int = 0) -> BackboneBundle:
    """Deterministic, frozen, differentiable toy stack."""
    schedule = NoiseSchedule.scaled_linear(TOY_T)
    tokenizer = ToyTokenizer()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        text_encoder = ToyTextEncoder(tokenizer.vocab_size, TOY_D_TEXT, tokenizer.eos_id)
        predictor = ToyNoisePredictor(schedule)
    codec = ToyLatentCodec()
    bundle = BackboneBundle(
        latent_encoder=codec.encode,
        latent_decoder=codec.decode,
        text_encoder=text_encoder,
        noise_predictor=predictor,
        schedule=schedule,
        tokenizer=tokenizer,
        d_text=TOY_D_TEXT,
        latent_shape=TOY_LATENT_SHAPE,
        mode="toy",
        modules=[text_encoder, predictor],
        pooled_text=text_encoder.pooled,
    )
    return bundle.freeze()


_SD_REQUIRED = {
    "unet": ("config.json",),
    "vae": ("config.json",),
    "text_encoder": ("config.json",),
    "tokenizer": ("vocab.json", "merges.txt"),
}
_WEIGHT_SUFFIXES = (".safetensors", ".bin")


def _check_sd_layout(root: Path) -> None:
    if not root.is_dir():
        raise FileNotFoundError(f"backbone directory not found: {root}")
    missing = []
    for sub, files in _SD_REQUIRED.items():
        for f in files:
            if not (root / sub / f).is_file():
                missing.append(f"{sub}/{f}")
        if sub != "tokenizer" and not any(p.suffix in _WEIGHT_SUFFIXES for p in (root / sub).glob("*")):
            missing.append(f"{sub}/<weights{'|'.join(_WEIGHT_SUFFIXES)}>")
    if missing:
        raise FileNotFoundError(f"incomplete Stable Diffusion directory {root}; missing: {', '.join(missing)}")


def load_pretrained_backbone(path: str | Path, device: str = "cpu") -> BackboneBundle:
    """Load a Stable Diffusion v1.x directory (diffusers layout) as a frozen bundle."""
    root = Path(path)
    _check_sd_layout(root)
    try:
        from diffusers import AutoencoderKL, UNet2DConditionModel
        from transformers import CLIPTextModel, CLIPTokenizer
    except ImportError as exc:
        raise ImportError("full mode needs the optional 'diffusers' and 'transformers' packages") from exc

    try:
        vae = AutoencoderKL.from_pretrained(root / "vae").to(device)
        unet = UNet2DConditionModel.from_pretrained(root / "unet").to(device)
        text_model = CLIPTextModel.from_pretrained(root / "text_encoder").to(device)
        tokenizer = ClipTokenizer(CLIPTokenizer.from_pretrained(root / "tokenizer"))
    except (OSError, ValueError, RuntimeError) as exc:
        raise OSError(f"could not load backbone weights from {root}: {exc}") from exc

    schedule = NoiseSchedule.scaled_linear(FULL_T)

    def latent_encoder(images: torch.Tensor) -> torch.Tensor:
        x = images.to(device, vae.dtype)
        if x.shape[-1] != SD_IMAGE_SIZE or x.shape[-2] != SD_IMAGE_SIZE:
            x = F.interpolate(x, size=(SD_IMAGE_SIZE, SD_IMAGE_SIZE), mode="bilinear", antialias=True)
        x = x * 2 - 1
        return vae.encode(x).latent_dist.mean * SD_LATENT_SCALE

    def latent_decoder(z: torch.Tensor, size: int | None = None) -> torch.Tensor:
        img = vae.decode(z.to(device, vae.dtype) / SD_LATENT_SCALE).sample
        img = ((img + 1) / 2).clamp(0, 1)
        if size is not None and img.shape[-1] != size:
            img = F.interpolate(img, size=(size, size), mode="bilinear", antialias=True)
        return img

    class _Text(nn.Module):
        def __init__(self):
            super().__init__()
            self.model = text_model

        def forward(self, ids):
            return self.model(ids.to(device)).last_hidden_state

    class _Unet(nn.Module):
        def __init__(self):
            super().__init__()
            self.model = unet

        def forward(self, z_t, t, cond):
            t = torch.as_tensor(t, device=device).reshape(-1).expand(z_t.shape[0])
            return self.model(z_t, t, encoder_hidden_states=cond).sample

    def pooled(ids):
        return text_model(ids.to(device)).pooler_output

    text, unet_wrap = _Text(), _Unet()
    d_text = text_model.config.hidden_size
    bundle = BackboneBundle(
        latent_encoder=latent_encoder,
        latent_decoder=latent_decoder,
        text_encoder=text,
        noise_predictor=unet_wrap,
        schedule=schedule,
        tokenizer=tokenizer,
        d_text=d_text,
        latent_shape=(unet.config.in_channels, unet.config.sample_size, unet.config.sample_size),
        mode="full",
        modules=[vae, unet, text_model],
        pooled_text=pooled,
    )
    return bundle.freeze()


def make_backbone(mode: str, seed: int = 0, path: str | Path | None = None) -> BackboneBundle:
    if mode == "toy":
        return make_toy_backbone(seed)
    if mode == "full":
        if path is None:
            raise ValueError("full mode needs a backbone path")
        return load_pretrained_backbone(path)
    raise ValueError(f"unknown mode {mode!r}")


def to_numpy(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy()
