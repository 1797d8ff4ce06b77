"""Inference: style tokens from a reference image + classifier-free guidance.

The latent update is the deterministic step

    z_prev = sqrt(a_prev) * (z_t - sqrt(1 - a_t) * eps) / sqrt(a_t) + sqrt(1 - a_prev) * eps

applied once per timestep with no multistep history.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from finestyle.backbone import BackboneBundle
from finestyle.dataset import STYLE_SUFFIX
from finestyle.inversion import build_condition
from finestyle.style_module import extract_style_feature, project


@dataclass(frozen=True)
class GenerationRequest:
    reference_image: str
    prompt: str
    seed: int = 0
    steps: int = 50
    guidance_scale: float = 7.5
    output_size: int = 512

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be >= 0")


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, s: float) -> torch.Tensor:
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    # lerp is exact at s=0, at s=1 and when both predictions agree
    return torch.lerp(eps_uncond, eps_cond, float(s))


def pndm_step(z_t: torch.Tensor, eps: torch.Tensor, a_t: float, a_prev: float) -> torch.Tensor:
    a_t, a_prev = float(a_t), float(a_prev)
    if a_t == 0:
        raise ZeroDivisionError("a_t must be non-zero")
    if not (0 < a_t <= 1 and 0 < a_prev <= 1):
        raise ValueError(f"cumulative alphas must lie in (0, 1], got a_t={a_t}, a_prev={a_prev}")
    z0_hat = (z_t - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)
    return math.sqrt(a_prev) * z0_hat + math.sqrt(1 - a_prev) * eps


def timestep_grid(T: int, steps: int) -> list[int]:
    """``steps`` strictly decreasing indices with stride ~T/steps, starting at T-1."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}]")
    return [T - 1 - (k * T) // steps for k in range(steps)]


def sample_latent(bundle: BackboneBundle, cond: torch.Tensor | None, uncond: torch.Tensor, steps: int,
                  guidance_scale: float, seed: int) -> torch.Tensor:
    """Run the reverse process from seeded Gaussian noise.

    With ``cond=None`` only the unconditional prediction is used.
    """
    dtype = bundle.dtype
    g = torch.Generator().manual_seed(seed)
    z = torch.randn((1, *bundle.latent_shape), generator=g, dtype=torch.float64).to(dtype)
    alphas = bundle.schedule.alphas_cumprod
    grid = timestep_grid(bundle.schedule.T, steps)
    with torch.no_grad():
        for k, t in enumerate(grid):
            t_vec = torch.tensor([t])
            eps_u = bundle.noise_predictor(z, t_vec, uncond.to(dtype))
            if cond is None:
                eps = eps_u
            else:
                eps = cfg_combine(eps_u, bundle.noise_predictor(z, t_vec, cond.to(dtype)), guidance_scale)
            a_prev = alphas[grid[k + 1]].item() if k + 1 < len(grid) else 1.0
            z = pndm_step(z, eps, alphas[t].item(), a_prev)
            if not torch.isfinite(z).all():
                raise FloatingPointError(f"non-finite latent after step {k} (t={t})")
    return z


def style_tokens(enc, p, pixels: torch.Tensor) -> torch.Tensor:
    return project(p, extract_style_feature(enc, pixels))


def generate(bundle: BackboneBundle, enc, p, req: GenerationRequest, reference_pixels: torch.Tensor,
             style: torch.Tensor | None = None) -> torch.Tensor:
    """Generate one (3, S, S) image in [0, 1].

    ``reference_pixels`` is the preprocessed reference image. ``style`` lets a
    caller supply the 8 x d_text tokens directly (e.g. a Stage-1 vector).
    """
    if not req.prompt.endswith(STYLE_SUFFIX):
        raise ValueError(f"prompt must end with {STYLE_SUFFIX!r}")
    if style is None:
        with torch.no_grad():
            style = style_tokens(enc, p, reference_pixels)
    text = bundle.encode_text([req.prompt, ""])
    cond = build_condition(style.unsqueeze(0), text[:1])
    z = sample_latent(bundle, cond, text[1:], req.steps, req.guidance_scale, req.seed)
    return bundle.decode_latent(z, req.output_size)[0]
