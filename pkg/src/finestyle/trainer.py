"""Training loops for Stages 2a, 2b, 3 and the projection-free ablation.

Every loop uses AdamW (eps=1e-8), a seeded per-epoch shuffle, no clipping and
no schedule. Frozen components are hashed before and after; the hashes land
in the returned :class:`TrainLog`.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch

from finestyle.backbone import BackboneBundle, parameter_hash
from finestyle.inversion import StyleVector, build_condition, make_adamw, recon_loss
from finestyle.style_module import StyleProjection, cosine_clip_loss, map_loss, project, replicate_feature

log = logging.getLogger(__name__)

STAGES = ("2a", "2b", "3", "3_ablation")

_DEFAULTS = {
    "2a": dict(batch_size=32, epochs=10, lr_encoder=5e-5, lr_projection=0.0),
    "2b": dict(batch_size=32, epochs=5, lr_encoder=0.0, lr_projection=5e-5),
    "3": dict(batch_size=8, epochs=10, lr_encoder=2e-6, lr_projection=5e-4),
    "3_ablation": dict(batch_size=8, epochs=3, lr_encoder=2e-6, lr_projection=0.0),
}
# Desk-scale runs see a few dozen images, so the Stage-2 rates are raised to
# make the few available steps count.
_TOY_DEFAULTS = {
    "2a": dict(lr_encoder=1e-3),
    "2b": dict(lr_projection=5e-4, epochs=200),
}


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    batch_size: int
    epochs: int
    lr_encoder: float
    lr_projection: float
    adam_eps: float = 1e-8
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @classmethod
    def for_stage(cls, stage: str, mode: str = "full", **overrides) -> "TrainConfig":
        if stage not in _DEFAULTS:
            raise ValueError(f"unknown stage {stage!r}")
        toy = _TOY_DEFAULTS.get(stage, {}) if mode == "toy" else {}
        return cls(stage=stage, **{**_DEFAULTS[stage], **toy, **overrides})


@dataclass
class TrainLog:
    stage: str
    records: list[dict] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    hashes: dict[str, tuple[str, str]] = field(default_factory=dict)
    optimizer_params: int = 0

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    def log_step(self, epoch: int, loss: float) -> None:
        if not (loss >= 0 and loss < float("inf")):
            raise FloatingPointError(f"stage {self.stage}: bad loss {loss} at step {len(self.records) + 1}")
        self.records.append({"step": len(self.records) + 1, "stage": self.stage, "epoch": epoch,
                             "loss": loss, "timestamp": time.time()})

    def unchanged(self, name: str) -> bool:
        before, after = self.hashes[name]
        return before == after

    def write_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as f:
            for r in self.records:
                f.write(json.dumps(r) + "\n")
        return path


def _batches(n: int, batch_size: int, g: torch.Generator):
    order = torch.randperm(n, generator=g).tolist()
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _n_params(opt: torch.optim.Optimizer) -> int:
    return sum(p.numel() for grp in opt.param_groups for p in grp["params"])


def _run_epochs(cfg: TrainConfig, n: int, step_fn, opt, trainlog: TrainLog, on_epoch=None) -> None:
    g = torch.Generator().manual_seed(cfg.seed)
    t0 = time.time()
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for idx in _batches(n, cfg.batch_size, g):
            loss = step_fn(idx, g)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"stage {cfg.stage}: non-finite loss in epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            trainlog.log_step(epoch, loss.item())
            epoch_losses.append(loss.item())
        trainlog.epoch_means.append(sum(epoch_losses) / len(epoch_losses))
        log.info("stage %s epoch %d mean loss %.5f", cfg.stage, epoch, trainlog.epoch_means[-1])
        if on_epoch is not None:
            on_epoch(epoch)
    trainlog.wall_time = time.time() - t0


def train_stage2a(enc, data: Sequence[tuple[torch.Tensor, str]], cfg: TrainConfig,
                  bundle: BackboneBundle, on_epoch=None) -> tuple[torch.nn.Module, TrainLog]:
    """Pull each image's encoder feature toward its tag's pooled text feature."""
    if not data:
        raise ValueError("stage 2a needs at least one (image, tag) pair")
    if not bundle.frozen:
        raise ValueError("text encoder must be frozen")
    trainlog = TrainLog("2a")
    text_before = bundle.param_hash()
    pixels = torch.stack([p for p, _ in data])
    dtype = next(enc.parameters()).dtype
    tag_feats = bundle.encode_text_pooled([tag for _, tag in data]).to(dtype)
    if tag_feats.shape[-1] != enc.d_enc:
        raise ValueError(f"tag feature dim {tag_feats.shape[-1]} != encoder dim {enc.d_enc}")

    enc.train()
    opt = make_adamw(enc.parameters(), cfg.lr_encoder, cfg.adam_eps)
    trainlog.optimizer_params = _n_params(opt)

    def step(idx, g):
        return cosine_clip_loss(enc(pixels[idx].to(dtype)), tag_feats[idx])

    _run_epochs(cfg, len(data), step, opt, trainlog, on_epoch)
    enc.eval()
    trainlog.hashes["text_encoder"] = (text_before, bundle.param_hash())
    return enc, trainlog


def train_stage2b(p: StyleProjection, enc, data: Sequence[tuple[torch.Tensor, StyleVector]],
                  cfg: TrainConfig, on_epoch=None) -> tuple[StyleProjection, TrainLog]:
    """Regress Stage-1 style vectors from frozen encoder features."""
    if not data:
        raise ValueError("stage 2b needs at least one (image, style vector) pair")
    bad = [sv.source_image for _, sv in data if sv.provenance != "inverted"]
    if bad:
        raise ValueError(f"stage 2b targets must be inverted style vectors; got others for {bad[:3]}")
    trainlog = TrainLog("2b")
    enc_before = parameter_hash(enc)
    enc.requires_grad_(False)
    enc.eval()
    dtype = p.weight.dtype
    with torch.no_grad():
        feats = enc(torch.stack([px for px, _ in data]).to(next(enc.parameters()).dtype)).to(dtype)
    targets = torch.stack([sv.tokens for _, sv in data]).to(dtype)

    p.train()
    opt = make_adamw(p.parameters(), cfg.lr_projection, cfg.adam_eps)
    trainlog.optimizer_params = _n_params(opt)

    def step(idx, g):
        return map_loss(project(p, feats[idx]), targets[idx])

    _run_epochs(cfg, len(data), step, opt, trainlog, on_epoch)
    enc.requires_grad_(True)
    trainlog.hashes["encoder"] = (enc_before, parameter_hash(enc))
    return p, trainlog


def _reconstruction_setup(bundle: BackboneBundle, data, dtype):
    pixels = torch.stack([d[0] for d in data]).to(dtype)
    z0 = torch.stack([d[1] for d in data]).to(dtype)
    text = bundle.encode_text([d[2] for d in data]).to(dtype)
    return pixels, z0, text


def _noise_draw(bundle: BackboneBundle, z0: torch.Tensor, g: torch.Generator):
    t = bundle.sample_timesteps(len(z0), g)
    eps = torch.randn(z0.shape, generator=g, dtype=torch.float64).to(z0.dtype)
    return t, eps


def train_stage3(enc, p: StyleProjection, bundle: BackboneBundle,
                 data: Sequence[tuple[torch.Tensor, torch.Tensor, str]],
                 cfg: TrainConfig, on_epoch=None) -> tuple[torch.nn.Module, StyleProjection, TrainLog]:
    """Joint fine-tuning through the frozen noise predictor.

    ``data`` holds (preprocessed pixels, clean latent z0, suffixed caption).
    """
    if not data:
        raise ValueError("stage 3 needs at least one (image, caption) pair")
    if not bundle.frozen:
        raise ValueError("stage 3 requires a frozen backbone")
    trainlog = TrainLog("3")
    bb_before = bundle.param_hash()
    dtype = bundle.dtype
    pixels, z0, text = _reconstruction_setup(bundle, data, dtype)

    enc.train()
    p.train()
    opt = torch.optim.AdamW(
        [{"params": list(enc.parameters()), "lr": cfg.lr_encoder},
         {"params": list(p.parameters()), "lr": cfg.lr_projection}],
        betas=(0.9, 0.999), eps=cfg.adam_eps, weight_decay=0.01,
    )
    trainlog.optimizer_params = _n_params(opt)

    def step(idx, g):
        t, eps = _noise_draw(bundle, z0[idx], g)
        style = project(p, enc(pixels[idx]))
        return recon_loss(bundle, z0[idx], build_condition(style, text[idx]), t, eps)

    _run_epochs(cfg, len(data), step, opt, trainlog, on_epoch)
    enc.eval()
    p.eval()
    trainlog.hashes["backbone"] = (bb_before, bundle.param_hash())
    return enc, p, trainlog


def train_stage3_ablation(enc, bundle: BackboneBundle, data: Sequence[tuple[torch.Tensor, torch.Tensor, str]],
                          cfg: TrainConfig, on_epoch=None) -> tuple[torch.nn.Module, TrainLog]:
    """Fine-tune the encoder alone, its feature copied into all 8 style rows."""
    if not data:
        raise ValueError("ablation needs at least one (image, caption) pair")
    if enc.d_enc != bundle.d_text:
        raise ValueError(f"ablation needs d_enc == d_text, got {enc.d_enc} vs {bundle.d_text}")
    trainlog = TrainLog("3_ablation")
    bb_before = bundle.param_hash()
    dtype = bundle.dtype
    pixels, z0, text = _reconstruction_setup(bundle, data, dtype)

    enc.train()
    opt = make_adamw(enc.parameters(), cfg.lr_encoder, cfg.adam_eps)
    trainlog.optimizer_params = _n_params(opt)

    def step(idx, g):
        t, eps = _noise_draw(bundle, z0[idx], g)
        style = replicate_feature(enc(pixels[idx]), bundle.d_text)
        return recon_loss(bundle, z0[idx], build_condition(style, text[idx]), t, eps)

    _run_epochs(cfg, len(data), step, opt, trainlog, on_epoch)
    enc.eval()
    trainlog.hashes["backbone"] = (bb_before, bundle.param_hash())
    return enc, trainlog


def heldout_recon_loss(bundle: BackboneBundle, style_fn, data, draws: int = 16, seed: int = 1234) -> float:
    """Mean reconstruction loss over a fixed set of (t, eps) draws per sample.

    ``style_fn`` maps a batch of preprocessed pixels to (B, 8, d_text) tokens.
    The draws depend only on ``seed``, so two configurations can be compared
    without sampling noise.
    """
    dtype = bundle.dtype
    pixels, z0, text = _reconstruction_setup(bundle, data, dtype)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        cond = build_condition(style_fn(pixels).to(dtype), text)
        total = 0.0
        for _ in range(draws):
            t, eps = _noise_draw(bundle, z0, g)
            total += recon_loss(bundle, z0, cond, t, eps).item()
    return total / draws


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def with_overrides(cfg: TrainConfig, **overrides) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
