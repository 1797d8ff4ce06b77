"""Stage 1: per-image textual inversion of an 8-token style vector."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F

from finestyle.backbone import BackboneBundle, add_noise

log = logging.getLogger(__name__)

N_STYLE_TOKENS = 8
INIT_STD = 0.02
PROVENANCES = ("inverted", "predicted", "ablation_replicated")


@dataclass(frozen=True)
class StyleVector:
    tokens: torch.Tensor
    provenance: str = "inverted"
    source_image: str = ""
    step: int = 0
    seed: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != N_STYLE_TOKENS:
            raise ValueError(f"style vector must be 8 x d_text, got {tuple(self.tokens.shape)}")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("style vector has non-finite entries")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def d_text(self) -> int:
        return self.tokens.shape[1]


def init_style_vector(seed: int, d_text: int, dtype: torch.dtype = torch.float32) -> StyleVector:
    """8 x d_text tokens drawn i.i.d. from N(0, 0.02^2)."""
    g = torch.Generator().manual_seed(seed)
    tokens = torch.randn(N_STYLE_TOKENS, d_text, generator=g, dtype=torch.float64) * INIT_STD
    return StyleVector(tokens.to(dtype), "inverted", seed=seed)


def build_condition(style: torch.Tensor, text_emb: torch.Tensor) -> torch.Tensor:
    """Row-wise [style; text]. Works on (8,d)+(77,d) or batched (B,8,d)+(B,77,d)."""
    if isinstance(style, StyleVector):
        style = style.tokens
    if style.shape[-1] != text_emb.shape[-1]:
        raise ValueError(f"d_text mismatch: style {style.shape[-1]} vs text {text_emb.shape[-1]}")
    if style.ndim != text_emb.ndim:
        raise ValueError("style and text embeddings must both be batched or both unbatched")
    return torch.cat([style.to(text_emb.dtype), text_emb], dim=-2)


def recon_loss(bundle: BackboneBundle, z0: torch.Tensor, cond: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the true noise and the frozen predictor's estimate."""
    if z0.ndim == len(bundle.latent_shape):
        z0, eps, cond = z0.unsqueeze(0), eps.unsqueeze(0), cond.unsqueeze(0)
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(z0.shape[0])
    z_t = add_noise(z0, t, eps, bundle.schedule)
    pred = bundle.noise_predictor(z_t, t, cond)
    return F.mse_loss(pred, eps)


def make_adamw(params, lr: float, eps: float = 1e-8) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), eps=eps, weight_decay=0.01)


def invert_style(
    bundle: BackboneBundle,
    image: torch.Tensor,
    caption: str,
    steps: int = 250,
    lr: float = 5e-4,
    checkpoint_every: int = 50,
    seed: int = 0,
    image_id: str = "",
    losses: list | None = None,
) -> list[StyleVector]:
    """Optimise one image's style vector against the frozen backbone.

    ``image`` is a (3,H,W) RGB tensor in [0, 1] or an already-encoded latent.
    Returns the initial vector when ``steps == 0``, otherwise the vectors at
    every multiple of ``checkpoint_every`` (and the final step). Per-step losses
    are appended to ``losses`` when given.
    """
    if not bundle.frozen:
        raise ValueError("inversion requires a frozen backbone")
    dtype = bundle.dtype
    init = init_style_vector(seed, bundle.d_text, dtype)
    if steps == 0:
        return [replace(init, source_image=image_id)]

    z0 = bundle.encode_latent(image.to(dtype).unsqueeze(0))
    text_emb = bundle.encode_text([caption]).to(dtype)
    style = init.tokens.clone().requires_grad_(True)
    opt = make_adamw([style], lr)
    g = torch.Generator().manual_seed(seed + 1)

    checkpoints = []
    for step in range(1, steps + 1):
        t = bundle.sample_timesteps(1, g)
        eps = torch.randn(z0.shape, generator=g, dtype=torch.float64).to(dtype)
        cond = build_condition(style.unsqueeze(0), text_emb)
        loss = recon_loss(bundle, z0, cond, t, eps)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite inversion loss at step {step} for image {image_id!r}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if losses is not None:
            losses.append(loss.item())
        if step % checkpoint_every == 0 or step == steps:
            checkpoints.append(
                StyleVector(style.detach().clone(), "inverted", image_id, step, seed)
            )
    log.debug("inverted %s: final loss %.4f", image_id, loss.item())
    return checkpoints
