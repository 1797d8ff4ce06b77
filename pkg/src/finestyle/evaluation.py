"""Metrics: style score, image-text score, Gram baseline, clustering report."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from sklearn.manifold import TSNE
from sklearn.metrics import silhouette_score

from finestyle.backbone import BackboneBundle
from finestyle.dataset import STYLE_SUFFIX
from finestyle.inversion import build_condition
from finestyle.prep import preprocess_image
from finestyle.sampler import sample_latent, style_tokens
from finestyle.style_module import extract_style_feature, make_toy_encoder, replicate_feature

log = logging.getLogger(__name__)


def _as_pixels(image) -> torch.Tensor:
    """HxWx3 arrays, PIL images or (3,H,W) tensors in [0, 1] -> preprocessed pixels."""
    if isinstance(image, torch.Tensor) and image.ndim == 3 and image.shape[0] == 3:
        image = image.permute(1, 2, 0)
    return preprocess_image(image)


def _cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.double(), b.double()
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for zero-norm features")
    return float(((a @ b) / (na * nb)).clamp(-1, 1))


def style_score(enc, original, reconstruction) -> float:
    """Cosine similarity of style-encoder features of two images."""
    fa = extract_style_feature(enc, _as_pixels(original))
    fb = extract_style_feature(enc, _as_pixels(reconstruction))
    return _cosine(fa, fb)


class ToyDualEncoder:
    """Image/text towers for the toy image-text score: a fixed-seed toy
    vision encoder and the backbone's pooled text output."""

    def __init__(self, bundle: BackboneBundle, seed: int = 7):
        self.bundle = bundle
        self.vision = make_toy_encoder(seed).to(bundle.dtype).eval()

    def image_features(self, pixels: torch.Tensor) -> torch.Tensor:
        return extract_style_feature(self.vision, pixels)

    def text_features(self, text: str) -> torch.Tensor:
        return self.bundle.encode_text_pooled([text])[0]


class ClipDualEncoder:
    def __init__(self, path: str | Path):
        from transformers import CLIPModel, CLIPTokenizer

        self.model = CLIPModel.from_pretrained(path).eval()
        self.tokenizer = CLIPTokenizer.from_pretrained(path)

    def image_features(self, pixels: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.model.get_image_features(pixel_values=pixels.unsqueeze(0))[0]

    def text_features(self, text: str) -> torch.Tensor:
        ids = self.tokenizer(text, padding="max_length", truncation=True, max_length=77, return_tensors="pt")
        with torch.no_grad():
            return self.model.get_text_features(**ids)[0]


def image_text_score(image, prompt: str, dual) -> float:
    return _cosine(dual.image_features(_as_pixels(image)), dual.text_features(prompt))


def gram_features(feature_maps: Sequence[np.ndarray]) -> list[np.ndarray]:
    """G = F F^T / (H W) for each C x H x W map."""
    out = []
    for fm in feature_maps:
        fm = np.asarray(fm, dtype=np.float64)
        if fm.ndim != 3 or fm.size == 0:
            raise ValueError(f"expected a non-empty C x H x W map, got shape {fm.shape}")
        c, h, w = fm.shape
        flat = fm.reshape(c, h * w)
        out.append(flat @ flat.T / (h * w))
    return out


VGG19_STYLE_LAYERS = (1, 6, 11)  # relu1_1, relu2_1, relu3_1 in torchvision's vgg19().features


class GramExtractor:
    """Baseline style descriptor: Gram matrices at chosen layers of a conv net.

    ``features`` is a sequential conv stack (e.g. ``torchvision.models.vgg19(...).features``);
    ``layers`` are indices whose outputs are captured.
    """

    def __init__(self, features: nn.Sequential, layers: Sequence[int] = VGG19_STYLE_LAYERS):
        self.features = features.eval()
        self.layers = tuple(layers)

    @classmethod
    def vgg19(cls, weights: str | Path | None = None, layers=VGG19_STYLE_LAYERS) -> "GramExtractor":
        from torchvision.models import vgg19

        model = vgg19(weights=None)
        if weights is not None:
            model.load_state_dict(torch.load(weights, map_location="cpu"))
        return cls(model.features, layers)

    def __call__(self, pixels: torch.Tensor) -> np.ndarray:
        maps = []
        x = pixels.unsqueeze(0)
        with torch.no_grad():
            for i, layer in enumerate(self.features):
                x = layer(x)
                if i in self.layers:
                    maps.append(x[0].numpy())
                if i >= max(self.layers):
                    break
        grams = gram_features(maps)
        return np.concatenate([g[np.triu_indices(len(g))] for g in grams])


@dataclass
class ClusteringReport:
    coords: np.ndarray
    labels: list[str]
    colors: dict[str, str]
    silhouette: float | None
    silhouette_defined: bool = True

    def save_plot(self, path: str | Path, title: str = "") -> Path:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 5))
        labels = np.array(self.labels)
        for lab, color in self.colors.items():
            m = labels == lab
            ax.scatter(self.coords[m, 0], self.coords[m, 1], s=12, c=color, label=lab)
        ax.legend(fontsize=7)
        sil = "undefined" if self.silhouette is None else f"{self.silhouette:.3f}"
        ax.set_title(f"{title} silhouette={sil}".strip())
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)
        return Path(path)


def clustering_report(features: np.ndarray, labels: Sequence[str], seed: int = 0) -> ClusteringReport:
    """t-SNE coordinates plus a cosine silhouette on the original features."""
    features = np.asarray(features, dtype=np.float64)
    labels = list(labels)
    if len(features) != len(labels):
        raise ValueError("features and labels differ in length")
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2 or counts.min() < 2:
        raise ValueError("need at least two classes with two or more members each")

    import matplotlib

    palette = matplotlib.colormaps["tab10"]
    colors = {c: matplotlib.colors.to_hex(palette(i % 10)) for i, c in enumerate(classes)}
    n = len(features)
    if np.ptp(features, axis=0).max() == 0:
        return ClusteringReport(np.zeros((n, 2)), labels, colors, None, silhouette_defined=False)

    perplexity = min(30.0, (n - 1) / 3)
    coords = TSNE(n_components=2, perplexity=perplexity, random_state=seed, init="pca").fit_transform(features)
    sil = float(silhouette_score(features, labels, metric="cosine"))
    return ClusteringReport(coords, labels, colors, sil)


@dataclass
class EvalRecord:
    image_id: str
    style_score: float
    image_text_score: float


@dataclass
class EvalReport:
    source: str
    records: list[EvalRecord] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def mean_style(self) -> float:
        return float(np.mean([r.style_score for r in self.records]))

    @property
    def mean_image_text(self) -> float:
        return float(np.mean([r.image_text_score for r in self.records]))

    def summary_table(self) -> list[list[str]]:
        return [["metric", self.source],
                ["style_similarity", f"{self.mean_style:.6f}"],
                ["image_text_similarity", f"{self.mean_image_text:.6f}"]]

    def write(self, path: str | Path) -> Path:
        """Tab-separated per-sample rows; the aggregate table goes next to it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            w.writerow(["image_id", "style_score", "image_text_score"])
            for r in self.records:
                w.writerow([r.image_id, f"{r.style_score:.8f}", f"{r.image_text_score:.8f}"])
        with path.with_name(path.stem + "_summary.tsv").open("w", newline="") as f:
            csv.writer(f, delimiter="\t", lineterminator="\n").writerows(self.summary_table())
        return path


@dataclass
class EvalSample:
    image_id: str
    image: np.ndarray
    caption: str


def evaluate_checkpoint(bundle: BackboneBundle, enc, p, samples: Sequence[EvalSample], mode: str, referee,
                        dual, stage1_vectors: dict | None = None, steps: int = 50,
                        guidance_scale: float = 7.5, seed: int = 0, output_size: int = 64) -> EvalReport:
    """Reconstruct each test image from its caption and a style vector, then score it.

    ``mode`` picks the vector source: ``stage1`` (stored inverted vectors),
    ``predicted`` (encoder + projection) or ``ablation`` (replicated feature).
    ``referee`` is the fixed encoder used for the style score.
    """
    if not samples:
        raise ValueError("empty test set")
    if mode not in ("stage1", "predicted", "ablation"):
        raise ValueError(f"unknown mode {mode!r}")
    report = EvalReport(mode, provenance={"mode": mode, "steps": steps, "guidance_scale": guidance_scale,
                                          "seed": seed})
    dtype = bundle.dtype
    for i, s in enumerate(samples):
        if not s.caption.endswith(STYLE_SUFFIX):
            raise ValueError(f"caption for {s.image_id} lacks the style suffix")
        pixels = preprocess_image(s.image)
        if mode == "stage1":
            if stage1_vectors is None or s.image_id not in stage1_vectors:
                raise KeyError(f"no stage-1 style vector for {s.image_id}")
            style = stage1_vectors[s.image_id].tokens
        elif mode == "predicted":
            style = style_tokens(enc, p, pixels)
        else:
            style = replicate_feature(extract_style_feature(enc, pixels), bundle.d_text)
        text = bundle.encode_text([s.caption, ""])
        cond = build_condition(style.to(dtype).unsqueeze(0), text[:1])
        z = sample_latent(bundle, cond, text[1:], steps, guidance_scale, seed + i)
        recon = bundle.decode_latent(z, output_size)[0]
        report.records.append(EvalRecord(
            s.image_id, style_score(referee, s.image, recon), image_text_score(recon, s.caption, dual)
        ))
    return report
