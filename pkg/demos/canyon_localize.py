"""Localize a UE walking along the canyon street with two LOS RRUs.

Run: python3 demos/canyon_localize.py
"""
from __future__ import annotations

import numpy as np

from rtpos.harness import ExperimentConfig, run_pipeline, summarize_records


def main() -> None:
    cfg = ExperimentConfig(scene="canyon", seeds=(0,), rru_ids=(0, 1), n_bs=2, tti_step=10)
    records = run_pipeline(cfg)
    for r in records:
        est = np.array2string(r.estimate[:2], precision=1) if r.has_position else "none"
        print(f"tti {r.tti:3d}  truth {np.array2string(r.truth[:2], precision=1)}  estimate {est}  "
              f"error {r.error:6.2f} m")
    s = summarize_records(records, "canyon")
    print(f"median {s.median:.2f} m, p90 {s.p90:.2f} m over {len(s.errors)} TTIs")


if __name__ == "__main__":
    main()
