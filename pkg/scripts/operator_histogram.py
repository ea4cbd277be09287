"""Entry distribution of the dense dipole operator for one echo."""

import argparse

import numpy as np

from qsm_amp.dipole import EchoProtocol, operator_entry_stats


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dims", type=int, nargs=3, default=[10, 10, 10])
    ap.add_argument("--echo-time", type=float, default=0.004)
    ap.add_argument("--bins", type=int, default=60)
    args = ap.parse_args()

    stats = operator_entry_stats(tuple(args.dims), EchoProtocol(3.0, (args.echo_time,)), bins=args.bins)
    hist = stats.pop("histogram")
    for key, value in stats.items():
        print(f"{key:>22}: {value}")
    counts = np.asarray(hist["counts"])
    edges = np.asarray(hist["edges"])
    # log-scaled bars: the distribution is sharply peaked at zero
    bars = np.round(60 * np.log1p(counts) / np.log1p(counts.max())).astype(int)
    for lo, c, bar in zip(edges[:-1], counts, bars):
        print(f"{lo:>+10.4f} {c:>8d} {'#' * bar}")


if __name__ == "__main__":
    main()
