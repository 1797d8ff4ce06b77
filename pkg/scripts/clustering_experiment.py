"""Silhouette and t-SNE of toy style-encoder features before and after Stage 2a."""
import argparse
from pathlib import Path

import torch

from finestyle.backbone import make_toy_backbone
from finestyle.evaluation import clustering_report
from finestyle.prep import preprocess_image
from finestyle.style_module import extract_style_feature, make_toy_encoder
from finestyle.synthetic import STYLE_TAGS, styled_set
from finestyle.trainer import TrainConfig, train_stage2a


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--per-class", type=int, default=30)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/clustering")
    args = ap.parse_args()
    torch.set_num_threads(1)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images, labels = styled_set(args.per_class, seed=args.seed + 7)
    pixels = torch.stack([preprocess_image(i) for i in images])
    bundle = make_toy_backbone(args.seed)

    enc = make_toy_encoder(args.seed)
    before = clustering_report(extract_style_feature(enc, pixels).numpy(), labels, args.seed)
    data = [(p, STYLE_TAGS[lab]) for p, lab in zip(pixels, labels)]
    enc, _ = train_stage2a(enc, data, TrainConfig.for_stage("2a", "toy", epochs=args.epochs, seed=args.seed), bundle)
    after = clustering_report(extract_style_feature(enc, pixels).numpy(), labels, args.seed)

    before.save_plot(out / "tsne_untrained.png", "untrained")
    after.save_plot(out / "tsne_trained.png", "after stage 2a")
    print(f"silhouette untrained {before.silhouette:.3f}, trained {after.silhouette:.3f}")


if __name__ == "__main__":
    main()
