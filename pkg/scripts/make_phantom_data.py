"""Write synthetic phantom volumes for exercising the CLI.

Produces ``<prefix><k>.nii`` image volumes with ``<prefix><k>_mask.nii``
analytic masks, the layout ``skullstrip train`` expects, plus default
watershed and training parameter files.

    python scripts/make_phantom_data.py --out demo --volumes 3 --slices 17 --size 80
"""
import argparse
from pathlib import Path

from skullstrip import params, phantoms, volume_io
from skullstrip.train import TrainConfig
from skullstrip.watershed import WatershedParams


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--volumes", type=int, default=3)
    ap.add_argument("--slices", type=int, default=17)
    ap.add_argument("--size", type=int, default=80)
    ap.add_argument("--prefix", default="rat")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    data = out / "data"
    data.mkdir(parents=True, exist_ok=True)
    for k in range(args.volumes):
        img, mask = phantoms.phantom_volume(args.slices, args.size, seed=args.seed + k)
        volume_io.write_nifti(img, data / f"{args.prefix}{k}.nii")
        volume_io.write_nifti(mask, data / f"{args.prefix}{k}_mask.nii")
    params.dump(WatershedParams(), out / "watershed.txt")
    depth = 4 if args.size % 8 == 0 else 3
    params.dump(TrainConfig(epochs=20, depth=depth, base_channels=8), out / "train.txt")
    print(f"wrote {args.volumes} volume pairs to {data}, params to {out}")


if __name__ == "__main__":
    main()
