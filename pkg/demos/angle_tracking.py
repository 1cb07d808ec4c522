"""Follow a drifting angle through noise and outliers with the multi-trend tracker.

Run: python3 demos/angle_tracking.py
"""
from __future__ import annotations

import numpy as np

from rtpos.tracking import AngleTracker


def main() -> None:
    rng = np.random.default_rng(0)
    tr = AngleTracker()
    slope = 0.01  # rad per TTI
    for k in range(120):
        est = slope * k + rng.normal(0, np.deg2rad(0.2))
        if rng.uniform() < 0.1:
            est += np.deg2rad(rng.uniform(-20, 20))
        tr.update(k, [est])
        if k % 20 == 19:
            dom = tr.dominant()
            print(f"tti {k:3d}  trends {len(tr.trends)}  dominant slope {dom.a:.5f} rad/TTI  "
                  f"deviation {np.rad2deg(dom.deviation):.3f} deg")
    print(f"true slope {slope:.5f} rad/TTI")


if __name__ == "__main__":
    main()
