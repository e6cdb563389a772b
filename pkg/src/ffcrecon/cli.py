"""Command-line interface: ``ffcrecon {phantom,fit,eval,export}``.

Exit codes: 0 success, 1 numerical failure, 2 usage or input error.
Set ``FFC_LOG`` to ``quiet``, ``info`` (default) or ``debug`` to control
the JSON-lines log on standard error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .datamodel import (DataFormatError, export_csv, load_dataset, load_maps, read_pgm,
                        save_maps)
from .linops import FilterConfig, fourier_adjoint, set_fft_workers
from .presets import PRESET_NAMES, preset_protocol

log = logging.getLogger("ffcrecon")

METHODS = ("standard", "multifield", "h1", "tgv")


class UsageError(Exception):
    """Bad flags or unusable inputs (exit code 2)."""


class JsonLineFormatter(logging.Formatter):
    """One JSON object per line; messages that are JSON objects are merged in."""

    def format(self, record):
        out = {"time": round(record.created, 3), "level": record.levelname.lower(),
               "logger": record.name}
        msg = record.getMessage()
        try:
            payload = json.loads(msg)
        except ValueError:
            payload = None
        if isinstance(payload, dict):
            out.update(payload)
        else:
            out["msg"] = msg
        return json.dumps(out)


def setup_logging() -> None:
    level = os.environ.get("FFC_LOG", "info").lower()
    levels = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"FFC_LOG must be one of {sorted(levels)}, got {level!r}")
    root = logging.getLogger("ffcrecon")
    root.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root.addHandler(handler)
    root.setLevel(levels[level])
    root.propagate = False


def _write_run_json(out: Path, command: str, params: dict, extra=None) -> None:
    doc = {"command": command, "version": __version__, "parameters": params}
    if extra:
        doc.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(doc, indent=2, default=_jsonable))


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if dataclasses.is_dataclass(x):
        return dataclasses.asdict(x)
    raise TypeError(f"not JSON serialisable: {type(x)}")


def _matrix(text: str):
    parts = text.lower().split("x")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad matrix {text!r}") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"bad matrix {text!r}")
    return tuple(vals)


def _noise(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad noise fraction {text!r}") from None
    if not 0 <= v <= 0.1:
        raise argparse.ArgumentTypeError("noise fraction must lie in [0, 0.1]")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return v


# ---------------------------------------------------------------- commands

def cmd_phantom(args) -> int:
    from .phantom import NoiseSpec, build_phantom, write_phantom_dataset

    mask = None
    if args.mask:
        mask = read_pgm(args.mask) != 0
    try:
        protocol = preset_protocol(args.protocol, args.matrix, mask)
    except (ValueError, DataFormatError) as exc:
        raise UsageError(str(exc)) from None
    try:
        noise = NoiseSpec(args.noise, args.seed)
        build_phantom(protocol.matrix)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    snr = write_phantom_dataset(out, protocol, noise)
    params = {"noise": args.noise, "matrix": list(args.matrix), "protocol": args.protocol,
              "seed": args.seed, "mask": args.mask}
    _write_run_json(out, "phantom", params, {"snr_post_inversion": snr})
    print(f"{'roi':<20} {'SNR':>8}")
    for label, v in snr.items():
        print(f"{label:<20} {v:>8.2f}")
    return 0


def _load_config(path, method):
    from .reference_fitters import PixelFitConfig
    from .tgv import SolverConfig

    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"{path}: cannot read config ({exc})") from None
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    try:
        if method in ("tgv", "h1"):
            return SolverConfig.from_dict(raw)
        raw = dict(raw)
        if "filter" in raw:
            raw["filter"] = FilterConfig(**raw["filter"])
        raw.setdefault("presmooth", method == "standard")
        return PixelFitConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def cmd_fit(args) -> int:
    from . import reference_fitters as rf
    from .tgv import run_irgn

    cfg = _load_config(args.config, args.method)
    data = load_dataset(args.input)
    out = Path(args.out)
    t0 = time.perf_counter()
    extra = {}
    if args.method == "tgv":
        maps, records = run_irgn(data, cfg)
        extra["progress"] = records
    elif args.method == "h1":
        maps, records = run_irgn(data, cfg, inner=rf._h1_inner)
        extra["progress"] = records
    else:
        images = fourier_adjoint(data)
        fit = (rf.fit_pixelwise_single_field_detailed if args.method == "standard"
               else rf.fit_pixelwise_multifield_detailed)
        res = fit(images, cfg)
        maps = res.maps
        extra["failed_pixels"] = res.n_failed
    extra["seconds"] = round(time.perf_counter() - t0, 3)
    save_maps(maps, out)
    params = {"method": args.method, "input": str(args.input), "config": dataclasses.asdict(cfg),
              "threads": args.threads}
    _write_run_json(out, "fit", params, extra)
    log.info(json.dumps({"event": "fit_done", "method": args.method,
                         "seconds": extra["seconds"]}))
    return 0


def cmd_eval(args) -> int:
    from . import metrics
    from .phantom import read_rois

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        rois = read_rois(args.rois)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"{args.rois}: cannot read ROIs ({exc})") from None
    truth = load_maps(args.truth) if args.truth else None
    fields = _fields_for(args)
    labels = _labels(args.maps)
    summary = {"methods": {}, "std": "population (1/N)"}
    table = []
    for label, mdir in zip(labels, args.maps):
        maps = load_maps(mdir)
        if fields is not None and len(fields) != maps.n_fields:
            raise UsageError(f"{mdir}: {maps.n_fields} fields but protocol has {len(fields)}")
        flds = fields if fields is not None else list(range(1, maps.n_fields + 1))
        rows = metrics.dispersion_profile(maps, rois, flds)
        metrics.write_profile_csv(rows, out / f"{label}_dispersion.csv")
        entry = {"dispersion": rows}
        if truth is not None:
            if truth.T1.shape != maps.T1.shape:
                raise UsageError(f"{mdir}: maps do not match truth shape")
            obj = np.logical_or.reduce([r.pixels for r in rois])
            grid, mean = metrics.rel_abs_diff(maps.T1, truth.T1, obj)
            per_field = [metrics.rel_abs_diff(maps.T1[i], truth.T1[i], obj)[1]
                         for i in range(maps.n_fields)]
            for i in range(maps.n_fields):
                export_csv(np.nan_to_num(grid[i]), out / f"{label}_relerr_field{i + 1}.csv")
                metrics.export_grid_pgm(grid[i], out / f"{label}_relerr_field{i + 1}.pgm",
                                        (0.0, 100.0))
            hist = metrics.joint_histogram_2d(1e3 * maps.T1, 1e3 * truth.T1, obj,
                                              args.bins, tuple(args.range))
            metrics.write_histogram(hist, out / f"{label}_hist2d")
            entry.update({"mean_rel_err_pct": mean, "per_field_pct": per_field,
                          "high_t1_underestimation": metrics.underestimation_fraction(hist)})
            table.append([label, mean, *per_field])
        summary["methods"][label] = entry
    if table:
        n_e = len(table[0]) - 2
        head = "method,all," + ",".join(f"field{i + 1}" for i in range(n_e))
        body = [",".join([r[0]] + [repr(float(x)) for x in r[1:]]) for r in table]
        (out / "mean_error.csv").write_bytes(("\r\n".join([head] + body) + "\r\n").encode())
        base = table[0][1]
        summary["error_ratio_vs_first"] = {r[0]: (base / r[1] if r[1] > 0 else float("inf"))
                                           for r in table}
    (out / "report.json").write_text(json.dumps(summary, indent=2))
    _write_run_json(out, "eval", {"maps": [str(m) for m in args.maps], "truth": args.truth,
                                  "rois": str(args.rois), "bins": args.bins,
                                  "range": list(args.range)})
    return 0


def _labels(dirs):
    labels, seen = [], {}
    for d in dirs:
        base = Path(d).resolve().name or "maps"
        n = seen.get(base, 0)
        seen[base] = n + 1
        labels.append(base if n == 0 else f"{base}_{n}")
    return labels


def _fields_for(args):
    if args.protocol_dir:
        from .datamodel import protocol_from_json

        doc = json.loads((Path(args.protocol_dir) / "protocol.json").read_text())
        return list(protocol_from_json(doc, args.protocol_dir)[0].evolution_fields)
    return None


def cmd_export(args) -> int:
    from .metrics import export_grid_pgm

    maps = load_maps(args.maps)
    names = maps.channel_names()
    if args.channel not in names:
        raise UsageError(f"unknown channel {args.channel!r}; choose from {names}")
    ch = maps.to_stack()[names.index(args.channel)]
    part = {"real": ch.real, "imag": ch.imag, "abs": np.abs(ch), "phase": np.angle(ch)}
    grid = part[args.part]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"channel": args.channel, "part": args.part}
    if args.format == "csv":
        export_csv(grid, out)
    else:
        meta.update(export_grid_pgm(grid, out, tuple(args.window) if args.window else None))
    out.with_suffix(out.suffix + ".json").write_text(json.dumps(meta, indent=2))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ffcrecon", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=_positive_int, default=1,
                    help="cap on FFT and BLAS threads (1 gives bit-reproducible runs)")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="simulate the numerical phantom dataset")
    p.add_argument("--noise", type=_noise, default=0.0,
                   help="noise std per real/imaginary part, fraction of max signal")
    p.add_argument("--matrix", type=_matrix, default=(128, 128), help="N or NxxNy")
    p.add_argument("--protocol", choices=PRESET_NAMES, default="sim3field")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask", help="optional k-space sampling mask (PGM)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("fit", help="reconstruct parameter maps")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with solver settings")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="compare maps to ground truth")
    p.add_argument("--maps", action="append", required=True)
    p.add_argument("--truth")
    p.add_argument("--rois", required=True)
    p.add_argument("--protocol-dir", help="dataset directory used to label fields in tesla")
    p.add_argument("--bins", type=_positive_int, default=100)
    p.add_argument("--range", type=float, nargs=2, default=(0.0, 400.0), metavar=("LO", "HI"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="convert a map channel to CSV or PGM")
    p.add_argument("--maps", required=True)
    p.add_argument("--channel", required=True, help="e.g. C, alpha_1, T1_2")
    p.add_argument("--part", choices=("real", "imag", "abs", "phase"), default="real")
    p.add_argument("--format", choices=("csv", "pgm"), default="csv")
    p.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    from .tgv import SolverError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        setup_logging()
        set_fft_workers(args.threads)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(args.threads):
            return args.func(args)
    except (UsageError, DataFormatError, FileNotFoundError) as exc:
        print(f"ffcrecon: error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"ffcrecon: numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
