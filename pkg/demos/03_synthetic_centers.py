"""The synthetic multi-center data pipeline: one shared phantom anatomy
family, per-center degradation recipes, and the measurable domain shift
between centers.

Run:  python3 demos/03_synthetic_centers.py
"""

import numpy as np

from drmc.analysis import psnr
from drmc.data import build_dataset, default_known_centers, default_unknown_centers


def main():
    centers = default_known_centers() + default_unknown_centers()
    print("center recipes:")
    for c in centers:
        role = "known" if c.id <= 4 else "held-out"
        print(f"  C{c.id} ({role:8}): drf={c.drf:>4} psf={c.psf_sigma} "
              f"spacing={c.spacing_scale} gain={c.intensity_gain} "
              f"phantom={c.phantom} lesions={c.lesions}")

    records = build_dataset(centers, n_train_per_center=2, n_test_per_center=1,
                            shape=(24, 24, 24), seed=0)
    print(f"\nbuilt {len(records)} paired volumes; per-center statistics of the"
          " degraded inputs:")
    print(f"  {'center':>6} {'mean':>8} {'std':>8} {'input PSNR':>11}")
    for cid in sorted({r.center_id for r in records}):
        mine = [r for r in records if r.center_id == cid]
        lows = np.stack([r.low.data for r in mine])
        p = np.mean([
            psnr(r.low, r.full, peak=float(r.full.data.max())) for r in mine
        ])
        print(f"  C{cid:<5} {lows.mean():8.4f} {lows.std():8.4f} {p:9.2f} dB")
    print("\ndistinct means/spreads/PSNRs across centers = the domain shift the"
          "\nrouting network is asked to absorb.")


if __name__ == "__main__":
    main()
