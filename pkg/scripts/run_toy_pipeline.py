"""Run every CLI stage in toy mode on freshly written fixtures."""
import argparse
import sys
from pathlib import Path

import yaml

from finestyle.cli import main as cli
from finestyle.synthetic import write_fixture_images

VERBS = ("build-dataset", "invert", "pretrain-encoder", "pretrain-projection", "finetune", "finetune-ablation")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--run-dir", default="runs/toy")
    ap.add_argument("--config", default="configs/toy.yaml")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--prompt", default="a cat")
    args = ap.parse_args()

    run_dir = Path(args.run_dir)
    images = write_fixture_images(run_dir / "fixtures")
    cfg = yaml.safe_load(Path(args.config).read_text())
    cfg.setdefault("paths", {})["images"] = str(images)
    cfg_path = run_dir / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))

    common = ["--config", str(cfg_path), "--run-dir", str(run_dir), "--seed", str(args.seed)]
    for verb in VERBS:
        if cli([verb, *common]) != 0:
            return 1
    ref = images / "Dot Pattern" / "circle_0.png"
    if cli(["generate", *common, "--reference", str(ref), "--prompt", args.prompt]) != 0:
        return 1
    return cli(["evaluate", *common, "--checkpoint", "all", "--plot"])


if __name__ == "__main__":
    sys.exit(main())
