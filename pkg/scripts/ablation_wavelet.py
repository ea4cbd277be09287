"""Reconstruction error and time for each Daubechies order."""

import argparse
import time

from qsm_amp.metrics import hfen, nrmse
from qsm_amp.recon import ReconConfig, reconstruct
from qsm_amp.scenarios import outlier_scenario
from qsm_amp.wavelet import BASES


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--preset", default="hemorrhage")
    args = ap.parse_args()

    sc = outlier_scenario(args.size, args.preset)
    print(f"{'basis':>5} {'NRMSE':>8} {'HFEN':>8} {'time s':>7}")
    for basis in BASES:
        t = time.perf_counter()
        rep = reconstruct("amp-pe", sc.echoes, ReconConfig(basis=basis, alpha=0.05, outer_max=10), sc.mask)
        print(f"{basis:>5} {nrmse(rep.chi, sc.chi, sc.mask):>8.2f} {hfen(rep.chi, sc.chi, sc.mask):>8.2f} "
              f"{time.perf_counter() - t:>7.1f}", flush=True)


if __name__ == "__main__":
    main()
