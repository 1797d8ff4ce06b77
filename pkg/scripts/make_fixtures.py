"""Write the procedural fixture images (and recorded captions) for toy runs."""
import argparse

from finestyle.synthetic import STYLES, write_fixture_images


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="fixtures/images")
    ap.add_argument("--per-class", type=int, default=4)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    root = write_fixture_images(args.out, args.per_class, STYLES, args.size, args.seed)
    print(f"wrote {args.per_class * len(STYLES)} images under {root}")


if __name__ == "__main__":
    main()
