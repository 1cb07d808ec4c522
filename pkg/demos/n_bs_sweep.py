"""Positioning error against the number of RRUs on the block fixture.

Run: python3 demos/n_bs_sweep.py   (a few minutes on one CPU)
"""
from __future__ import annotations

from rtpos.harness import ExperimentConfig, sweep


def main() -> None:
    cfg = ExperimentConfig(scene="block", seeds=(0,), tti_step=25)
    for s in sweep(cfg, "n_bs", [1, 2, 3, 4, 5]):
        print(f"{s.label:8s} median {s.median:6.2f} m  p90 {s.p90:6.2f} m  no position {s.n_no_position}")


if __name__ == "__main__":
    main()
