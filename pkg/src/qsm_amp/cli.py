"""``qsm`` command-line tool.

Subcommands: ``phantom``, ``simulate``, ``recon``, ``evaluate``,
``diag-operator`` and ``slice``. Every command writes a JSON run manifest
next to its outputs (see :func:`manifest_path`). Exit codes: 0 success,
2 usage or configuration error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dipole import EchoProtocol, EchoSet, dipole_kernel, forward_measurements, operator_entry_stats
from .metrics import evaluate, format_table
from .phantom import add_noise, load_phantom_spec, make_phantom
from .recon import METHODS, ConfigError, ReconConfig, ReconDivergenceError, reconstruct
from .volume import SUSCEPTIBILITY_WINDOW, Volume, VolumeError, export_slice, read_qvol, write_qvol

logger = logging.getLogger("qsm_amp")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    """Bad input detected by a command; maps to exit code 2."""


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None = None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    tool_version: str = __version__
    wall_time_s: float = 0.0

    @property
    def config_digest(self) -> str:
        canon = json.dumps({"command": self.command, "config": self.config, "seed": self.seed},
                           sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def write(self, path) -> Path:
        path = Path(path)
        doc = asdict(self)
        doc["config_digest"] = self.config_digest
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        return path


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON ({exc})") from None


def _read(path) -> Volume:
    try:
        return read_qvol(path)
    except FileNotFoundError:
        raise UsageError(f"no such volume: {path}") from None


def _outdir(path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ------------------------------------------------------------------ commands

def cmd_phantom(args) -> RunManifest:
    doc = _load_json(args.spec)
    try:
        shapes, dims, voxel_size = load_phantom_spec(doc)
        chi, mask = make_phantom(shapes, dims, voxel_size)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid phantom spec: {exc}") from None
    out = _outdir(args.out)
    b0_dir = tuple(doc.get("b0_dir", (0.0, 0.0, 1.0)))
    write_qvol(Volume.from_array(chi, "susceptibility_ppm", voxel_size, b0_dir), out / "chi.qvol")
    write_qvol(Volume.from_array(mask, "mask", voxel_size, b0_dir), out / "mask.qvol")
    return RunManifest("phantom", {"spec": doc}, inputs={"spec": str(args.spec)},
                       outputs={"chi": str(out / "chi.qvol"), "mask": str(out / "mask.qvol")})


def cmd_simulate(args) -> RunManifest:
    chi_vol = _read(args.chi)
    proto_doc = _load_json(args.protocol)
    try:
        protocol = EchoProtocol.from_json(proto_doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid protocol: {exc}") from None
    dims = chi_vol.dims
    if args.mask:
        mask_vol = _read(args.mask)
        if mask_vol.dims != dims:
            raise UsageError(f"mask dims {mask_vol.dims} do not match chi dims {dims}")
        weights = np.asarray(mask_vol.data, dtype=np.float64)
    else:
        weights = np.ones(dims)
    kernel = dipole_kernel(dims, chi_vol.header.voxel_size, chi_vol.header.b0_dir)
    meas = forward_measurements(np.asarray(chi_vol.data, dtype=np.float64), protocol, weights, kernel)
    if args.snr is not None:
        if not args.snr > 0:
            raise UsageError("--snr must be positive")
        sigma = float(np.abs(meas).max()) / args.snr
    else:
        sigma = args.sigma
    noisy = add_noise(meas, sigma, args.outlier_frac, args.outlier_sigma, seed=args.seed)
    echoes = EchoSet.from_measurements(noisy, protocol, chi_vol.header.voxel_size,
                                       chi_vol.header.b0_dir)
    out = _outdir(args.out)
    echoes.save(out)
    config = {"protocol": proto_doc, "sigma": sigma, "snr": args.snr,
              "outlier_frac": args.outlier_frac, "outlier_sigma": args.outlier_sigma,
              "weights": "mask" if args.mask else "ones"}
    inputs = {"chi": str(args.chi), "protocol": str(args.protocol)}
    if args.mask:
        inputs["mask"] = str(args.mask)
    return RunManifest("simulate", config, args.seed, inputs, {"echoes": str(out)})


def _load_echoes(directory) -> EchoSet:
    try:
        return EchoSet.load(directory)
    except FileNotFoundError as exc:
        raise UsageError(f"incomplete echo directory {directory}: {exc}") from None


def _report_doc(report) -> dict:
    doc = report.summary()
    return json.loads(json.dumps(doc, default=float))


def cmd_recon(args) -> RunManifest:
    if args.method not in METHODS:
        raise UsageError(f"unknown method {args.method!r}; choose from {METHODS}")
    cfg_doc = _load_json(args.config)
    try:
        config = ReconConfig.from_json(cfg_doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    echoes = _load_echoes(args.echoes)
    mask = None
    if args.mask:
        mask_vol = _read(args.mask)
        if mask_vol.dims != tuple(echoes.dims):
            raise UsageError("mask dims do not match the echoes")
        mask = np.asarray(mask_vol.data, dtype=np.float64)
    out = _outdir(args.out)
    manifest = RunManifest("recon", {"method": args.method, "config": cfg_doc},
                           inputs={"echoes": str(args.echoes), "config": str(args.config),
                                   **({"mask": str(args.mask)} if args.mask else {})})

    def save(report, status):
        vol = Volume.from_array(report.chi, "susceptibility_ppm", echoes.voxel_size, echoes.b0_dir)
        write_qvol(vol, out / "chi.qvol")
        doc = {"status": status, **_report_doc(report)}
        with open(out / "report.json", "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")
        if report.trace:
            with open(out / "trace.jsonl", "w", encoding="utf-8") as f:
                for entry in report.trace:
                    f.write(json.dumps(entry, default=float) + "\n")
        manifest.outputs = {"chi": str(out / "chi.qvol"), "report": str(out / "report.json")}

    try:
        report = reconstruct(args.method, echoes, config, mask)
    except ReconDivergenceError as exc:
        save(exc.report, "diverged")
        manifest.write(out / "manifest.json")
        raise
    save(report, "ok")
    return manifest


def cmd_evaluate(args) -> RunManifest:
    est, truth = _read(args.chi), _read(args.truth)
    if est.dims != truth.dims:
        raise UsageError(f"dims mismatch: {est.dims} vs {truth.dims}")
    mask = None
    inputs = {"chi": str(args.chi), "truth": str(args.truth)}
    if args.mask:
        mask = _read(args.mask).data
        inputs["mask"] = str(args.mask)
    rois = {}
    for item in args.roi or []:
        name, sep, path = item.partition("=")
        if not sep:
            raise UsageError(f"--roi expects NAME=PATH, got {item!r}")
        try:
            rois[name] = read_qvol(path).data
            inputs[f"roi:{name}"] = path
        except FileNotFoundError:
            logger.warning("ROI file %s not found; ROI %r skipped", path, name)
    est_data = np.asarray(est.data, dtype=np.float64)
    truth_data = np.asarray(truth.data, dtype=np.float64)
    report = evaluate(est_data, truth_data, mask, rois, detrend=not args.no_detrend)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, indent=2)
        f.write("\n")
    outputs = {"metrics": str(out)}
    if args.table:
        table = format_table({args.label: report})
        table_path = out.with_suffix(".txt")
        table_path.write_text(table + "\n", encoding="utf-8")
        outputs["table"] = str(table_path)
        print(table)
    return RunManifest("evaluate", {"detrend": not args.no_detrend, "rois": sorted(rois)},
                       inputs=inputs, outputs=outputs)


def cmd_diag_operator(args) -> RunManifest:
    proto_doc = _load_json(args.protocol)
    try:
        protocol = EchoProtocol.from_json(proto_doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid protocol: {exc}") from None
    if args.bins < 50:
        raise UsageError("--bins must be at least 50")
    try:
        stats = operator_entry_stats(tuple(args.dims), protocol, args.echo, bins=args.bins,
                                     seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _outdir(args.out)
    hist = stats.pop("histogram")
    with open(out / "operator_stats.json", "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=2)
        f.write("\n")
    with open(out / "operator_histogram.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        edges = hist["edges"]
        for lo, hi, count in zip(edges[:-1], edges[1:], hist["counts"]):
            writer.writerow([repr(lo), repr(hi), count])
    config = {"dims": list(args.dims), "protocol": proto_doc, "echo": args.echo, "bins": args.bins}
    return RunManifest("diag-operator", config, args.seed, {"protocol": str(args.protocol)},
                       {"stats": str(out / "operator_stats.json"),
                        "histogram": str(out / "operator_histogram.csv")})


def cmd_slice(args) -> RunManifest:
    vol = _read(args.volume)
    lo, hi = args.window
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    try:
        export_slice(vol, args.axis, args.index, (lo, hi), args.out)
    except (IndexError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return RunManifest("slice", {"axis": args.axis, "index": args.index, "window": [lo, hi]},
                       inputs={"volume": str(args.volume)}, outputs={"image": str(args.out)})


def manifest_path(command, out) -> Path:
    """``out/manifest.json``; commands writing a single file get ``<stem>.manifest.json``."""
    out = Path(out)
    if command in ("evaluate", "slice"):
        return out.with_name(out.stem + ".manifest.json")
    return out / "manifest.json"


# ------------------------------------------------------------------- parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="rasterize a phantom spec into chi.qvol and mask.qvol")
    p.add_argument("spec", help="phantom JSON (preset and/or shapes)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="simulate noisy multi-echo data from chi.qvol")
    p.add_argument("chi")
    p.add_argument("protocol", help="JSON with b0_T and echo_times_s")
    p.add_argument("--out", required=True)
    p.add_argument("--mask", help="use this mask as the magnitude (default: ones)")
    noise = p.add_mutually_exclusive_group()
    noise.add_argument("--snr", type=float, help="peak SNR; sigma = max|W| / snr")
    noise.add_argument("--sigma", type=float, default=0.0, help="noise std per component")
    p.add_argument("--outlier-frac", type=float, default=0.0)
    p.add_argument("--outlier-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("recon", help="reconstruct chi from an echo directory")
    p.add_argument("echoes")
    p.add_argument("config", help="reconstruction config JSON")
    p.add_argument("--method", default="amp-pe", help=f"one of {', '.join(METHODS)}")
    p.add_argument("--mask")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recon)

    p = sub.add_parser("evaluate", help="score a reconstruction against ground truth")
    p.add_argument("chi")
    p.add_argument("truth")
    p.add_argument("--mask")
    p.add_argument("--roi", action="append", metavar="NAME=PATH", help="ROI mask, repeatable")
    p.add_argument("--no-detrend", action="store_true", help="plain NRMSE inside ROIs")
    p.add_argument("--table", action="store_true", help="also print and save a text table")
    p.add_argument("--label", default="estimate", help="row label for --table")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diag-operator", help="entry statistics of the dense dipole operator")
    p.add_argument("protocol")
    p.add_argument("--dims", type=int, nargs=3, default=(8, 8, 8))
    p.add_argument("--echo", type=int, default=0)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diag_operator)

    p = sub.add_parser("slice", help="export one slice as an 8-bit PNG")
    p.add_argument("volume")
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--window", type=float, nargs=2, default=SUSCEPTIBILITY_WINDOW,
                   metavar=("LO", "HI"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_slice)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        manifest = args.func(args)
    except (UsageError, ConfigError, VolumeError) as exc:
        print(f"qsm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ReconDivergenceError as exc:
        print(f"qsm {args.command}: diverged: {exc} (partial result kept)", file=sys.stderr)
        return EXIT_DIVERGED
    manifest.wall_time_s = time.perf_counter() - t0
    manifest.write(manifest_path(args.command, args.out))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
