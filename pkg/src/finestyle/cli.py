"""Command line entry point: one verb per pipeline stage.

Each verb writes into ``<run_dir>/<verb>/`` with ``config.yaml``,
``checkpoints/``, ``logs/`` and ``outputs/``. Later verbs find earlier
artifacts there, so a whole experiment shares one ``--run-dir``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from finestyle import checkpoints as ckpt
from finestyle.backbone import BackboneBundle, make_backbone
from finestyle.dataset import (
    STYLE_SUFFIX,
    OpenAICaptionClient,
    RecordedCaptionClient,
    append_style_suffix,
    build_manifest,
    load_blacklist,
    read_manifest,
    write_manifest,
)
from finestyle.evaluation import (
    ClipDualEncoder,
    EvalSample,
    ToyDualEncoder,
    clustering_report,
    evaluate_checkpoint,
)
from finestyle.inversion import invert_style
from finestyle.prep import load_rgb, preprocess_image
from finestyle.sampler import GenerationRequest, generate
from finestyle.style_module import extract_style_feature, load_clip_encoder, make_projection, make_toy_encoder
from finestyle.trainer import (
    TrainConfig,
    train_stage2a,
    train_stage2b,
    train_stage3,
    train_stage3_ablation,
)

log = logging.getLogger("finestyle")

STAGE_VERBS = {
    "invert": None,
    "pretrain-encoder": "2a",
    "pretrain-projection": "2b",
    "finetune": "3",
    "finetune-ablation": "3_ablation",
}


class PrerequisiteError(RuntimeError):
    pass


@dataclass
class Paths:
    images: str | None = None
    manifest: str | None = None
    backbone: str | None = None
    vision_encoder: str | None = None
    clip: str | None = None


@dataclass
class DatasetConfig:
    test_size: int = 2500
    blacklist_extension: str | None = None
    api_key_env: str = "OPENAI_API_KEY"
    model: str = "gpt-4o"
    caption_attempts: int = 2
    max_workers: int = 8


@dataclass
class InvertConfig:
    steps: int = 250
    lr: float = 5e-4
    checkpoint_every: int = 50
    target_step: int = 200


@dataclass
class SamplingConfig:
    steps: int = 50
    guidance_scale: float = 7.5
    output_size: int = 512


@dataclass
class RunConfig:
    mode: str = "toy"
    seed: int = 0
    run_dir: str | None = None
    paths: Paths = field(default_factory=Paths)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    invert: InvertConfig = field(default_factory=InvertConfig)
    pretrain_encoder: dict = field(default_factory=dict)
    pretrain_projection: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    finetune_ablation: dict = field(default_factory=dict)
    generate: SamplingConfig = field(default_factory=SamplingConfig)
    evaluate: SamplingConfig = field(default_factory=SamplingConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        nested = {"paths": Paths, "dataset": DatasetConfig, "invert": InvertConfig,
                  "generate": SamplingConfig, "evaluate": SamplingConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            kwargs[k] = nested[k](**(v or {})) if k in nested else v
        cfg = cls(**kwargs)
        if cfg.mode not in ("toy", "full"):
            raise ValueError(f"mode must be 'toy' or 'full', got {cfg.mode!r}")
        return cfg

    def stage_overrides(self, stage: str) -> dict:
        key = {"2a": "pretrain_encoder", "2b": "pretrain_projection", "3": "finetune",
               "3_ablation": "finetune_ablation"}[stage]
        return dict(getattr(self, key) or {})


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_dict(yaml.safe_load(Path(path).read_text()) or {})


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Resolved configuration plus lazily built models for one command."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.run_dir or f"runs/{time.strftime('%Y%m%d-%H%M%S')}")
        self._bundle: BackboneBundle | None = None

    def stage_dir(self, verb: str) -> Path:
        return self.root / verb

    def start(self, verb: str) -> Path:
        d = self.stage_dir(verb)
        for sub in ("checkpoints", "logs", "outputs"):
            (d / sub).mkdir(parents=True, exist_ok=True)
        (d / "config.yaml").write_text(yaml.safe_dump(asdict(self.cfg), sort_keys=True))
        return d

    def require(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise PrerequisiteError(f"missing {what}: expected {path}")
        return path

    @property
    def bundle(self) -> BackboneBundle:
        if self._bundle is None:
            self._bundle = make_backbone(self.cfg.mode, self.cfg.seed, self.cfg.paths.backbone)
        return self._bundle

    def new_encoder(self):
        if self.cfg.mode == "toy":
            return make_toy_encoder(self.cfg.seed)
        if not self.cfg.paths.vision_encoder:
            raise PrerequisiteError("full mode needs paths.vision_encoder (openai/clip-vit-large-patch14)")
        return load_clip_encoder(self.cfg.paths.vision_encoder)

    def new_projection(self, enc):
        return make_projection(enc.d_enc, self.bundle.d_text, self.cfg.seed)

    def dual_encoder(self):
        if self.cfg.mode == "toy":
            return ToyDualEncoder(self.bundle)
        if not self.cfg.paths.clip:
            raise PrerequisiteError("full mode needs paths.clip for the image-text score")
        return ClipDualEncoder(self.cfg.paths.clip)

    def manifest_path(self) -> Path:
        if self.cfg.paths.manifest:
            return Path(self.cfg.paths.manifest)
        return self.stage_dir("build-dataset") / "outputs" / "manifest.jsonl"

    def manifest(self):
        return read_manifest(self.require(self.manifest_path(), "dataset manifest (run build-dataset)"))

    def encoder_from(self, verb: str, name: str = "encoder.npz"):
        enc = self.new_encoder()
        ckpt.load_module(self.require(self.stage_dir(verb) / "checkpoints" / name, f"{verb} encoder checkpoint"),
                         enc, "style_encoder")
        return enc.eval()

    def projection_from(self, verb: str, enc, name: str = "projection.npz"):
        p = self.new_projection(enc)
        ckpt.load_module(self.require(self.stage_dir(verb) / "checkpoints" / name,
                                      f"{verb} projection checkpoint"), p, "style_projection")
        return p.eval()

    def vector_path(self, image_id: str, step: int) -> Path:
        return self.stage_dir("invert") / "checkpoints" / image_id / f"step_{step:04d}.npz"


def sample_ids(manifest) -> dict[str, str]:
    return {s.image_path: f"{i:05d}_{Path(s.image_path).stem}" for i, s in enumerate(manifest.samples)}


def _load_image(path: str) -> tuple[np.ndarray, torch.Tensor, torch.Tensor]:
    raw = load_rgb(path)
    return raw, preprocess_image(raw), torch.from_numpy(raw).permute(2, 0, 1).contiguous()


def cmd_build_dataset(run: Run, args) -> int:
    cfg = run.cfg
    images = args.images or cfg.paths.images
    if not images:
        raise PrerequisiteError("no image directory given (--images or paths.images)")
    if cfg.mode == "full":
        client = OpenAICaptionClient.from_env(cfg.dataset.api_key_env, model=cfg.dataset.model)
    else:
        client = RecordedCaptionClient.from_file(
            run.require(Path(images) / "captions.json", "recorded captions for the stub captioner")
        )
    d = run.start("build-dataset")
    manifest, summary = build_manifest(
        images, client, cfg.dataset.test_size, cfg.seed, load_blacklist(cfg.dataset.blacklist_extension),
        attempts=cfg.dataset.caption_attempts, max_workers=cfg.dataset.max_workers,
    )
    out = write_manifest(manifest, d / "outputs" / "manifest.jsonl")
    (d / "logs" / "summary.txt").write_text("\n".join(summary.lines()) + "\n")
    print(f"wrote {len(manifest.samples)} samples to {out}")
    print("\n".join(summary.lines()))
    return 0


def cmd_invert(run: Run, args) -> int:
    cfg = run.cfg.invert
    manifest = run.manifest()
    d = run.start("invert")
    ids = sample_ids(manifest)
    bundle = run.bundle
    with (d / "logs" / "losses.jsonl").open("w") as logf:
        for i, s in enumerate(manifest.samples):
            _, _, rgb = _load_image(s.image_path)
            losses: list[float] = []
            vectors = invert_style(bundle, rgb, s.caption, cfg.steps, cfg.lr, cfg.checkpoint_every,
                                   seed=run.cfg.seed + i, image_id=ids[s.image_path], losses=losses)
            for sv in vectors:
                ckpt.save_style_vector(run.vector_path(ids[s.image_path], sv.step), sv)
            for step, loss in enumerate(losses, 1):
                logf.write(json.dumps({"step": step, "stage": "1", "image": ids[s.image_path], "loss": loss,
                                       "timestamp": time.time()}) + "\n")
            log.info("inverted %s (%d checkpoints)", ids[s.image_path], len(vectors))
    print(f"inverted {len(manifest.samples)} images into {d / 'checkpoints'}")
    return 0


def _train_config(run: Run, stage: str, args) -> tuple[TrainConfig, int, int | None]:
    overrides = run.cfg.stage_overrides(stage)
    save_every = int(overrides.pop("save_every", 1))
    init_epoch = overrides.pop("init_epoch", None)
    for k in ("epochs", "batch_size", "lr_encoder", "lr_projection"):
        v = getattr(args, k, None)
        if v is not None:
            overrides[k] = v
    overrides.setdefault("seed", run.cfg.seed)
    return TrainConfig.for_stage(stage, run.cfg.mode, **overrides), save_every, init_epoch


def _epoch_saver(d: Path, cfg: TrainConfig, save_every: int, modules: dict, mode: str):
    def on_epoch(epoch: int):
        if (epoch + 1) % save_every == 0 or epoch + 1 == cfg.epochs:
            for name, (module, kind) in modules.items():
                ckpt.save_module(d / "checkpoints" / f"{name}_epoch{epoch + 1:03d}.npz", module, kind, mode,
                                 epoch=epoch + 1, config=asdict(cfg))
    return on_epoch


def _save_final(d: Path, cfg: TrainConfig, modules: dict, mode: str, trainlog) -> None:
    for name, (module, kind) in modules.items():
        ckpt.save_module(d / "checkpoints" / f"{name}.npz", module, kind, mode, epoch=cfg.epochs,
                         config=asdict(cfg))
    trainlog.write_jsonl(d / "logs" / "train.jsonl")
    (d / "logs" / "hashes.json").write_text(json.dumps(trainlog.hashes, indent=1, sort_keys=True))


def _reconstruction_data(manifest, bundle: BackboneBundle):
    data = []
    for s in manifest.subset("train"):
        _, pixels, rgb = _load_image(s.image_path)
        data.append((pixels, bundle.encode_latent(rgb.unsqueeze(0))[0], s.caption))
    return data


def cmd_run_stage(run: Run, verb: str, args) -> int:
    if verb == "invert":
        return cmd_invert(run, args)
    stage = STAGE_VERBS[verb]
    manifest = run.manifest()
    mode = run.cfg.mode
    train = manifest.subset("train")
    if not train:
        raise ValueError("manifest has no training samples")
    cfg, save_every, init_epoch = _train_config(run, stage, args)
    init_name = "encoder.npz" if init_epoch is None else f"encoder_epoch{int(init_epoch):03d}.npz"

    if stage == "2a":
        enc = run.new_encoder()
        d = run.start(verb)
        data = [(_load_image(s.image_path)[1], s.tag) for s in train]
        mods = {"encoder": (enc, "style_encoder")}
        enc, tl = train_stage2a(enc, data, cfg, run.bundle, _epoch_saver(d, cfg, save_every, mods, mode))
    elif stage == "2b":
        enc = run.encoder_from("pretrain-encoder")
        ids = sample_ids(manifest)
        target = run.cfg.invert.target_step
        data = []
        for s in train:
            path = run.require(run.vector_path(ids[s.image_path], target),
                               f"inverted style vector (step {target}) for {ids[s.image_path]}; run invert first")
            data.append((_load_image(s.image_path)[1], ckpt.load_style_vector(path)))
        p = run.new_projection(enc)
        d = run.start(verb)
        mods = {"projection": (p, "style_projection")}
        p, tl = train_stage2b(p, enc, data, cfg, _epoch_saver(d, cfg, save_every, mods, mode))
    elif stage == "3":
        enc = run.encoder_from("pretrain-encoder", init_name)
        p = run.projection_from("pretrain-projection", enc,
                                "projection.npz" if init_epoch is None else f"projection_epoch{int(init_epoch):03d}.npz")
        d = run.start(verb)
        mods = {"encoder": (enc, "style_encoder"), "projection": (p, "style_projection")}
        enc, p, tl = train_stage3(enc, p, run.bundle, _reconstruction_data(manifest, run.bundle), cfg,
                                  _epoch_saver(d, cfg, save_every, mods, mode))
    else:
        enc = run.encoder_from("pretrain-encoder", init_name)
        d = run.start(verb)
        mods = {"encoder": (enc, "style_encoder")}
        enc, tl = train_stage3_ablation(enc, run.bundle, _reconstruction_data(manifest, run.bundle), cfg,
                                        _epoch_saver(d, cfg, save_every, mods, mode))
    _save_final(d, cfg, mods, mode, tl)
    print(f"{verb}: {cfg.epochs} epochs, final epoch mean loss "
          f"{tl.epoch_means[-1] if tl.epoch_means else float('nan'):.6f}; artifacts in {d}")
    return 0


def _style_modules(run: Run, source: str):
    if source == "finetune":
        enc = run.encoder_from("finetune")
        return enc, run.projection_from("finetune", enc)
    if source == "pretrain-projection":
        enc = run.encoder_from("pretrain-encoder")
        return enc, run.projection_from("pretrain-projection", enc)
    raise ValueError(f"cannot generate from checkpoint source {source!r}")


def _checkpoint_files(run: Run, source: str) -> list[Path]:
    if source == "finetune":
        return [run.stage_dir("finetune") / "checkpoints" / n for n in ("encoder.npz", "projection.npz")]
    return [run.stage_dir("pretrain-encoder") / "checkpoints" / "encoder.npz",
            run.stage_dir("pretrain-projection") / "checkpoints" / "projection.npz"]


def cmd_generate(run: Run, args) -> int:
    if args.replay:
        side = json.loads(Path(args.replay).read_text())
        req = GenerationRequest(**side["request"])
        source = side["checkpoint_source"]
    else:
        if not args.reference or args.prompt is None:
            raise ValueError("generate needs --reference and --prompt (or --replay)")
        prompt = args.prompt if args.prompt.endswith(STYLE_SUFFIX) else append_style_suffix(args.prompt)
        s = run.cfg.generate
        req = GenerationRequest(str(args.reference), prompt, run.cfg.seed,
                                args.steps or s.steps, s.guidance_scale if args.guidance is None else args.guidance,
                                args.size or s.output_size)
        source = args.checkpoint
    ref = Path(req.reference_image)
    if not ref.is_file():
        raise FileNotFoundError(f"unreadable reference image: {ref}")
    for f in _checkpoint_files(run, source):
        run.require(f, f"{source} checkpoint")
    enc, p = _style_modules(run, source)
    _, pixels, _ = _load_image(str(ref))
    image = generate(run.bundle, enc, p, req, pixels)

    d = run.start("generate")
    out = Path(args.output) if args.output else d / "outputs" / f"{ref.stem}_seed{req.seed}.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    arr = (image.permute(1, 2, 0).clamp(0, 1).numpy() * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(out)
    sidecar = {
        "request": asdict(req),
        "mode": run.cfg.mode,
        "checkpoint_source": source,
        "checkpoints": {f.name: _sha256(f) for f in _checkpoint_files(run, source)},
        "output_sha256": _sha256(out),
    }
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    if args.replay:
        side = json.loads(Path(args.replay).read_text())
        same = side["output_sha256"] == sidecar["output_sha256"]
        print(f"replay {'matches' if same else 'DIFFERS from'} the recorded output")
        if not same:
            return 1
    print(f"wrote {out} (seed {req.seed})")
    return 0


EVAL_SOURCES = ("stage1", "pretrain-projection", "finetune", "finetune-ablation")


def cmd_evaluate(run: Run, args) -> int:
    manifest = run.manifest()
    test = manifest.subset("test")
    if not test:
        raise ValueError("manifest has an empty test split")
    referee = run.encoder_from("pretrain-encoder")
    ids = sample_ids(manifest)
    sources = EVAL_SOURCES if args.checkpoint == "all" else (args.checkpoint,)
    s = run.cfg.evaluate
    samples = [EvalSample(ids[t.image_path], load_rgb(t.image_path), t.caption) for t in test]
    d = None
    for source in sources:
        enc = p = vectors = None
        if source == "stage1":
            step = run.cfg.invert.target_step
            vectors = {}
            for t in test:
                vp = run.require(run.vector_path(ids[t.image_path], step), f"stage-1 vector for {ids[t.image_path]}")
                vectors[ids[t.image_path]] = ckpt.load_style_vector(vp)
            mode = "stage1"
        elif source == "finetune-ablation":
            enc = run.encoder_from("finetune-ablation")
            mode = "ablation"
        else:
            for f in _checkpoint_files(run, source):
                run.require(f, f"{source} checkpoint")
            enc, p = _style_modules(run, source)
            mode = "predicted"
        if d is None:
            d = run.start("evaluate")
        report = evaluate_checkpoint(run.bundle, enc, p, samples, mode, referee, run.dual_encoder(), vectors,
                                     steps=s.steps, guidance_scale=s.guidance_scale, seed=run.cfg.seed,
                                     output_size=s.output_size)
        report.source = source
        out = report.write(d / "outputs" / f"report_{source}.tsv")
        print(f"{source}: style similarity {report.mean_style:.4f}, "
              f"image-text similarity {report.mean_image_text:.4f} ({out})")
    if args.plot:
        everything = manifest.samples
        pixels = torch.stack([_load_image(t.image_path)[1] for t in everything])
        feats = extract_style_feature(referee, pixels).numpy()
        rep = clustering_report(feats, [t.tag for t in everything], run.cfg.seed)
        rep.save_plot(d / "outputs" / "tsne_referee.png", "stage-2a encoder")
        print(f"referee silhouette: {rep.silhouette}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--mode", choices=("toy", "full"))
    common.add_argument("--seed", type=int)
    common.add_argument("--run-dir", help="experiment directory shared by all stages")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="finestyle", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    b = sub.add_parser("build-dataset", parents=[common], help="caption, screen and split images")
    b.add_argument("--images", help="directory laid out as <tag>/<image>")

    for verb in STAGE_VERBS:
        sp = sub.add_parser(verb, parents=[common], help=f"run the {verb} stage")
        if verb != "invert":
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--batch-size", type=int, dest="batch_size")
            sp.add_argument("--lr-encoder", type=float, dest="lr_encoder")
            sp.add_argument("--lr-projection", type=float, dest="lr_projection")

    g = sub.add_parser("generate", parents=[common], help="stylize a prompt after a reference image")
    g.add_argument("--reference", help="style reference image")
    g.add_argument("--prompt", help="content prompt; the style suffix is appended if missing")
    g.add_argument("--checkpoint", default="finetune", choices=("finetune", "pretrain-projection"))
    g.add_argument("--steps", type=int)
    g.add_argument("--guidance", type=float)
    g.add_argument("--size", type=int)
    g.add_argument("--output")
    g.add_argument("--replay", help="sidecar JSON of an earlier generate call to reproduce")

    e = sub.add_parser("evaluate", parents=[common], help="score reconstructions of the test split")
    e.add_argument("--checkpoint", default="finetune", choices=(*EVAL_SOURCES, "all"))
    e.add_argument("--plot", action="store_true", help="also write a t-SNE plot of referee features")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.mode:
            cfg.mode = args.mode
        if args.seed is not None:
            cfg.seed = args.seed
        if args.run_dir:
            cfg.run_dir = args.run_dir
        if cfg.mode == "toy":
            # single-threaded CPU kernels keep toy reruns bit-identical
            torch.set_num_threads(1)
        run = Run(cfg)
        if args.verb == "build-dataset":
            return cmd_build_dataset(run, args)
        if args.verb in STAGE_VERBS:
            return cmd_run_stage(run, args.verb, args)
        if args.verb == "generate":
            return cmd_generate(run, args)
        return cmd_evaluate(run, args)
    except PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, PermissionError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
