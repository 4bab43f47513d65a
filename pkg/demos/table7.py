"""Print the parameter / MAC table for the full-size presets next to the published values."""
import argparse

from robustlab.analyzer import cost_table
from robustlab.arch import resolve_presets

PUBLISHED = {
    "convnext-t": (4.47, 28.59), "convnext-t+convstem": (4.60, 28.63),
    "isotropic-convnext-s": (4.29, 22.31), "isotropic-convnext-s+convstem": (4.67, 23.04),
    "vit-s": (4.61, 22.05), "vit-s+convstem": (4.99, 22.78),
    "vit-m": (8.01, 38.85), "vit-m+convstem": (8.38, 39.5),
    "convnext-s": (8.70, 50.10), "convnext-s+convstem": (8.79, 50.33),
    "vit-b": (17.58, 86.57), "vit-b+convstem": (17.93, 87.14),
    "convnext-b": (15.38, 88.59), "convnext-b+convstem": (15.97, 88.75),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--resolution", type=int, default=224)
    args = ap.parse_args()
    _, rows = cost_table(resolve_presets("table7"), args.resolution)
    print(f"{'model':32s} {'GMACs':>7s} {'pub':>7s} {'params(M)':>10s} {'pub':>7s}")
    for r in rows:
        g, p = PUBLISHED[r.name]
        print(f"{r.name:32s} {r.macs / 1e9:7.2f} {g:7.2f} {r.params / 1e6:10.2f} {p:7.2f}")


if __name__ == "__main__":
    main()
