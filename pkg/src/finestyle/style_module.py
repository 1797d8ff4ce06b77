"""Feed-forward style extraction: vision encoder + linear projection to 8 tokens."""
from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from finestyle.inversion import N_STYLE_TOKENS, StyleVector
from finestyle.prep import IMAGE_SIZE

TOY_D_ENC = 32
FULL_D_ENC = 768


class ToyStyleEncoder(nn.Module):
    """Two-block ViT over 4x4 patches, returning the class-token feature.

    A fixed average-pool stem reduces the 224x224 input to 32x32 first, so the
    transformer sees 64 patches rather than 3136.
    """

    def __init__(self, d_enc: int = TOY_D_ENC, patch: int = 4, stem: int = 32, depth: int = 2, heads: int = 4):
        super().__init__()
        self.d_enc = d_enc
        self.stem = stem
        self.patch_embed = nn.Conv2d(3, d_enc, kernel_size=patch, stride=patch)
        n_patches = (stem // patch) ** 2
        self.cls_token = nn.Parameter(torch.randn(1, 1, d_enc) * 0.02)
        self.position = nn.Parameter(torch.randn(1, n_patches + 1, d_enc) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d_enc, heads, dim_feedforward=2 * d_enc, dropout=0.0, batch_first=True, norm_first=True
        )
        self.blocks = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(d_enc)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        x = F.adaptive_avg_pool2d(pixels, self.stem)
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(len(x), -1, -1), x], dim=1) + self.position
        x = self.blocks(x)
        return self.norm(x[:, 0])


class ClipStyleEncoder(nn.Module):
    """CLIP ViT-L/14 vision tower; the class-token output after the visual
    projection is the 768-d style feature."""

    def __init__(self, model):
        super().__init__()
        self.model = model
        self.d_enc = model.config.projection_dim

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.model(pixel_values=pixels).image_embeds


def make_toy_encoder(seed: int = 0) -> ToyStyleEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ToyStyleEncoder()


def load_clip_encoder(path: str | Path) -> ClipStyleEncoder:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"vision encoder weights not found: {path}")
    try:
        from transformers import CLIPVisionModelWithProjection
    except ImportError as exc:
        raise ImportError("full mode needs the optional 'transformers' package") from exc
    return ClipStyleEncoder(CLIPVisionModelWithProjection.from_pretrained(path))


class StyleProjection(nn.Linear):
    """Affine map from a d_enc feature to an 8 x d_text style vector.

    Weights start at N(0, (0.02 / sqrt(d_enc))^2) with zero bias, so a fresh
    projection emits vectors on the same scale as an initialised style vector.
    """

    def __init__(self, d_enc: int, d_text: int):
        super().__init__(d_enc, N_STYLE_TOKENS * d_text)
        self.d_enc = d_enc
        self.d_text = d_text
        nn.init.normal_(self.weight, std=0.02 / d_enc**0.5)
        nn.init.zeros_(self.bias)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        out = super().forward(f)
        return out.reshape(*f.shape[:-1], N_STYLE_TOKENS, self.d_text)


def make_projection(d_enc: int, d_text: int, seed: int = 0) -> StyleProjection:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return StyleProjection(d_enc, d_text)


def extract_style_feature(enc: nn.Module, img: torch.Tensor) -> torch.Tensor:
    """Class-token feature of a preprocessed (3,224,224) image, or a batch of them."""
    if img.shape[-2:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"expected a preprocessed {IMAGE_SIZE}x{IMAGE_SIZE} image, got {tuple(img.shape)}")
    batched = img.ndim == 4
    was_training = enc.training
    enc.eval()
    try:
        with torch.no_grad():
            dtype = next(enc.parameters()).dtype
            f = enc(img.to(dtype) if batched else img.to(dtype).unsqueeze(0))
    finally:
        enc.train(was_training)
    if not torch.isfinite(f).all():
        raise FloatingPointError("style encoder produced non-finite features")
    return f if batched else f[0]


def project(p: StyleProjection, f: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(f).all():
        raise ValueError("feature has non-finite entries")
    return p(f.to(p.weight.dtype))


def replicate_feature(f: torch.Tensor, d_text: int) -> torch.Tensor:
    """Ablation pathway: copy the raw feature into all eight style rows."""
    if f.shape[-1] != d_text:
        raise ValueError(f"replicated ablation needs d_enc == d_text, got {f.shape[-1]} vs {d_text}")
    return f.unsqueeze(-2).expand(*f.shape[:-1], N_STYLE_TOKENS, d_text)


def predict_style_vector(enc, p, img: torch.Tensor, mode: str = "projected", d_text: int | None = None,
                         image_id: str = "") -> StyleVector:
    """Style vector for one preprocessed image in a single forward pass."""
    f = extract_style_feature(enc, img)
    if mode == "projected":
        with torch.no_grad():
            tokens = project(p, f)
        return StyleVector(tokens, "predicted", image_id)
    if mode == "ablation_replicated":
        d_text = d_text if d_text is not None else (p.d_text if p is not None else f.shape[-1])
        return StyleVector(replicate_feature(f, d_text).clone(), "ablation_replicated", image_id)
    raise ValueError(f"unknown mode {mode!r}")


def cosine_clip_loss(img_feats: torch.Tensor, tag_feats: torch.Tensor) -> torch.Tensor:
    """Batch mean of 1 - cos(image feature, tag text feature), paired row by row."""
    if img_feats.shape != tag_feats.shape:
        raise ValueError(f"unaligned batches: {tuple(img_feats.shape)} vs {tuple(tag_feats.shape)}")
    n1 = img_feats.norm(dim=-1)
    n2 = tag_feats.norm(dim=-1)
    if bool((n1 == 0).any() or (n2 == 0).any()):
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    cos = (img_feats * tag_feats).sum(-1) / (n1 * n2)
    return (1 - cos).mean()


def map_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()
