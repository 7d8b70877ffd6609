"""Fourier sensitivity heatmaps of source-only and TC-trained models on glyph images.

Writes one long-format CSV per preset and prints the mean error over the
high-frequency region, plus a coarse text rendering of each target heatmap.

    python3 scripts/fourier_glyphs.py --out-dir fourier
"""

import argparse
from pathlib import Path

from uda_lab.analysis import fourier_sensitivity, write_fourier
from uda_lab.trainer import glyph_run_config, load_data, train

SHADES = " .:-=+*#%@"


def render(errors) -> str:
    return "\n".join("".join(SHADES[min(int(e * len(SHADES)), len(SHADES) - 1)] * 2 for e in row) for row in errors)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--presets", nargs="+", default=["source_only", "cliv+tc"])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--norm", type=float, default=1.0, help="L2 norm of each Fourier perturbation")
    parser.add_argument("--out-dir", default="fourier")
    args = parser.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    for preset in args.presets:
        cfg = glyph_run_config(preset, args.seed)
        pair = load_data(cfg)
        bundle, history = train(cfg, pair)
        maps = {d: fourier_sensitivity(bundle, pair, d, args.norm, args.seed) for d in ("source", "target")}
        path = write_fourier(maps, out / f"{preset.replace('+', '_')}.csv")
        print(f"{preset}: target acc {history[-1].target_acc:.3f}")
        for d, m in maps.items():
            print(f"  {d} high-frequency error {m.high_frequency_error():.3f}")
        print(render(maps["target"].errors))
        print(f"  wrote {path}\n")


if __name__ == "__main__":
    main()
