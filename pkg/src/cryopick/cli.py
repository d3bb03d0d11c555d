"""Command-line entry point: ``cryopick synth|train|cotrain|infer|eval|bench``.

Every command writes a ``manifest.json`` (command, resolved config and its
hash, seed, timestamps, artifact hashes, build id) next to its outputs.
Commands that produce a fresh output directory stage it under a temporary
name and rename it on success, so a failed run leaves nothing that looks
finished. Training commands write resumable ``ckpt_*.json`` snapshots in
place but only write the final checkpoint, metrics and manifest on success.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import (ClassCatalog, FormatError, PickError, PickSet, PlacementError, SynthConfig,
                   VolumeMeta, default_catalog, file_digest, read_catalog, read_picks,
                   read_volume, synthesize_tomogram, write_catalog, write_picks, write_volume)
from .decode import (FLIP_ALL, FLIP_AXES, FLIP_NONE, Detection, bench_csv, bench_decode,
                     bench_json, bench_table, infer_volume)
from .evaluate import (MatchConfig, evaluate, merge_reports, report_csv, report_json,
                       report_table, sweep_detections)
from .picknet import ConfigError, NetConfig
from .train import (CheckpointMismatch, SSLConfig, TrainConfig, TrainingError, Volume,
                    ablation_configs, burn_in, config_digest, cotrain, load_checkpoint,
                    new_checkpoint, save_checkpoint, train_report, write_metrics)

SPLITS = ("labeled", "unlabeled", "test")
ABLATIONS = {"mt": "+MT", "mv": "+MT+MV", "dropblock": "+MT+MV+DropBlock"}
TTA = {"off": FLIP_NONE, "on": FLIP_AXES, "all": FLIP_ALL}


class CLIError(Exception):
    """User-facing failure; reported on stderr with exit status 1."""


def build_id() -> str:
    return f"cryopick-{__version__} python-{platform.python_version()} torch-{torch.__version__}"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CLIError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None


def write_manifest(out: Path, command: str, config: dict, seed, started: str,
                   artifacts: list[Path]) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_digest(config),
        "seed": seed,
        "started": started,
        "finished": _now(),
        "build": build_id(),
        "artifacts": {str(p.relative_to(out)): file_digest(p) for p in sorted(artifacts)},
    }
    path = out / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    os.replace(tmp, path)
    return path


@contextmanager
def staged_dir(out: Path, force: bool):
    """Yield a temporary sibling of ``out``; move it into place on success."""
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise CLIError(f"{out} exists and is not empty (use --force to replace it)")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)


def _files(root: Path) -> list[Path]:
    return [p for p in root.rglob("*") if p.is_file() and p.name != "manifest.json"]


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CLIError(f"expected comma-separated numbers, got {text!r}") from None


def _grid(text: str) -> list[float]:
    """``lo:hi:step`` (inclusive) or a comma list."""
    if ":" in text:
        lo, hi, step = (float(v) for v in text.split(":"))
        n = int(round((hi - lo) / step))
        return [round(lo + i * step, 10) for i in range(n + 1)]
    return _floats(text)


# ---------------------------------------------------------------------------
# dataset directory layout


class Dataset:
    """``catalog.json``, ``volumes/<id>.json``, ``picks/<id>.jsonl``, ``splits/*.txt``."""

    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / "catalog.json").exists():
            raise CLIError(f"{self.root} is not a dataset directory (no catalog.json)")
        self.catalog = read_catalog(self.root / "catalog.json")

    def split(self, name: str) -> list[str]:
        path = self.root / "splits" / f"{name}.txt"
        if not path.exists():
            raise CLIError(f"missing split list {path}")
        return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]

    def volume(self, tid: str):
        return read_volume(self.root / "volumes" / f"{tid}.json")

    def picks(self, tid: str, meta: VolumeMeta) -> PickSet:
        return read_picks(self.root / "picks" / f"{tid}.jsonl", meta, self.catalog)

    def prepared(self, split: str, stride: int, labeled: bool) -> list[Volume]:
        out = []
        for tid in self.split(split):
            tomo = self.volume(tid)
            picks = self.picks(tid, tomo.meta) if labeled else None
            out.append(Volume.prepare(tomo, picks, self.catalog, stride))
        return out


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    cfg = _load_json(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    splits = cfg.get("splits", {})
    n = {s: int(splits.get(s, 0)) for s in SPLITS}
    if sum(n.values()) <= 0:
        raise CLIError("config requests zero volumes")
    catalog = (ClassCatalog.from_entries(cfg["catalog"]) if "catalog" in cfg
               else default_catalog())
    vcfg = dict(cfg.get("volume", {}))
    resolved = {"seed": seed, "splits": n, "volume": vcfg, "catalog": catalog.to_entries()}
    started = _now()
    with staged_dir(args.out, args.force) as tmp:
        for sub in ("volumes", "picks", "splits"):
            (tmp / sub).mkdir()
        write_catalog(catalog, tmp / "catalog.json")
        index = 0
        for split in SPLITS:
            ids = []
            for _ in range(n[split]):
                tid = f"{split}_{index:03d}"
                # volume i draws from its own sub-seed, independent of the split sizes
                sc = SynthConfig.from_dict({**vcfg, "seed": seed * 1_000_003 + index})
                tomo, picks = synthesize_tomogram(sc, catalog, tid)
                write_volume(tomo, tmp / "volumes" / f"{tid}.json")
                write_picks(picks, tmp / "picks" / f"{tid}.jsonl", tomo.meta, catalog)
                ids.append(tid)
                index += 1
            (tmp / "splits" / f"{split}.txt").write_text("".join(f"{i}\n" for i in ids))
        write_manifest(tmp, "synth", resolved, seed, started, _files(tmp))
    print(f"wrote {sum(n.values())} volumes to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train / cotrain


class _Snapshots:
    def __init__(self, out: Path):
        self.out = out

    def __call__(self, ckpt):
        path = self.out / f"ckpt_{ckpt.step:06d}.json"
        save_checkpoint(ckpt, path)
        print(f"  checkpoint step {ckpt.step} -> {path.name}", flush=True)


def _prepare_out(out: Path, force: bool, resume: bool) -> Path:
    out = Path(out)
    if (out / "manifest.json").exists() and not (force or resume):
        raise CLIError(f"{out} already holds a finished run (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish_training(out: Path, command: str, result, resolved: dict, seed, started) -> int:
    final = out / "checkpoint.json"
    written = []
    try:
        save_checkpoint(result.checkpoint, final)
        write_metrics(result.metrics, out / "metrics.csv")
        (out / "report.json").write_text(
            json.dumps(train_report(result.checkpoint, result.metrics), indent=2) + "\n")
        written = [final, final.with_suffix(".bin"), out / "metrics.csv", out / "report.json"]
        write_manifest(out, command, resolved, seed, started, written)
    except BaseException:
        for p in written or [final, final.with_suffix(".bin"), out / "metrics.csv",
                             out / "report.json"]:
            p.unlink(missing_ok=True)
        raise
    last = result.metrics[-1] if result.metrics else {}
    print(f"{command}: step {result.checkpoint.step}, supervised loss "
          f"{last.get('supervised', float('nan')):.5f} -> {final}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_json(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    net = NetConfig.from_dict(cfg.get("net", {}))
    tcfg = TrainConfig.from_dict({**cfg.get("train", {}), "seed": seed})
    data = Dataset(args.data)
    out = _prepare_out(args.out, args.force, args.resume is not None)
    started = _now()
    if args.resume:
        init = load_checkpoint(args.resume)
        if init.net != net:
            raise CheckpointMismatch("network config differs from the checkpoint")
    elif args.init:
        init = load_checkpoint(args.init)
    else:
        init = new_checkpoint(net, data.catalog, seed, tcfg)
    if init.catalog.digest() != data.catalog.digest():
        raise CheckpointMismatch("checkpoint catalog differs from the dataset catalog")
    labeled = data.prepared("labeled", net.output_stride, labeled=True)
    result = burn_in(labeled, tcfg, init, resume=args.resume is not None,
                     on_checkpoint=_Snapshots(out))
    resolved = {"net": net.to_dict(), "train": tcfg.to_dict(), "data": str(args.data),
                "init": args.init, "resume": args.resume}
    return _finish_training(out, "train", result, resolved, seed, started)


def cmd_cotrain(args) -> int:
    if not args.init and not args.resume:
        raise CLIError("cotrain requires --init <burn-in checkpoint> (run `train` first)")
    cfg = _load_json(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    ssl = SSLConfig.from_dict(cfg.get("ssl", {}))
    ssl = replace(ssl, train=replace(ssl.train, seed=seed))
    if args.ablate:
        ssl = ablation_configs(ssl)[ABLATIONS[args.ablate]]
    data = Dataset(args.data)
    out = _prepare_out(args.out, args.force, args.resume is not None)
    started = _now()
    init = load_checkpoint(args.resume or args.init)
    if not args.resume and init.stage != "burn-in":
        raise CheckpointMismatch(f"--init must be a burn-in checkpoint, got stage {init.stage!r}")
    if init.catalog.digest() != data.catalog.digest():
        raise CheckpointMismatch("checkpoint catalog differs from the dataset catalog")
    R = init.net.output_stride
    labeled = data.prepared("labeled", R, labeled=True)
    unlabeled = data.prepared("unlabeled", R, labeled=False)
    result = cotrain(labeled, unlabeled, init, ssl, resume=args.resume is not None,
                     on_checkpoint=_Snapshots(out))
    resolved = {"ssl": ssl.to_dict(), "ablate": args.ablate, "data": str(args.data),
                "init": args.init, "resume": args.resume}
    return _finish_training(out, "cotrain", result, resolved, seed, started)


# ---------------------------------------------------------------------------
# infer


def write_detections(dets, path, tomogram_id: str, meta: VolumeMeta, catalog) -> None:
    s = meta.spacing
    with open(path, "w") as fh:
        for d in dets:
            z, y, x = d.center
            fh.write(json.dumps({"tomogram_id": tomogram_id,
                                 "class_name": catalog[d.class_id].name,
                                 "x_angstrom": x * s, "y_angstrom": y * s, "z_angstrom": z * s,
                                 "confidence": d.confidence}) + "\n")


def read_detections(path, spacing: float, catalog) -> tuple[str, list[Detection]]:
    tid, out = None, []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            cid = catalog.by_name(rec["class_name"]).class_id
            center = tuple(float(rec[f"{a}_angstrom"]) / spacing for a in "zyx")
            out.append(Detection(cid, center, float(rec.get("confidence", 1.0))))
            tid = tid or rec.get("tomogram_id")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return tid or Path(path).stem, out


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model()
    catalog = ckpt.catalog
    thr = _floats(args.thresholds)
    thresholds = thr[0] if len(thr) == 1 else thr
    flips = TTA[args.tta]
    resolved = {"checkpoint": str(args.checkpoint), "volumes": [str(v) for v in args.volumes],
                "tta": args.tta, "window": args.window, "overlap": args.overlap,
                "thresholds": thr}
    started = _now()
    with staged_dir(args.out, args.force) as tmp:
        for vpath in args.volumes:
            tomo = read_volume(vpath)
            tid = Path(vpath).stem
            res = infer_volume(model, tomo, catalog, args.window, args.overlap, flips, thresholds)
            write_detections(res.detections, tmp / f"{tid}.jsonl", tid, tomo.meta, catalog)
            print(f"{tid}: {len(res.detections)} detections, {res.forwards} forwards, "
                  f"{res.seconds:.2f} s")
        write_manifest(tmp, "infer", resolved, None, started, _files(tmp))
    return 0


# ---------------------------------------------------------------------------
# eval


def _pairs(detections: Path, truth: Path) -> list[tuple[Path, Path]]:
    if detections.is_dir():
        dets = sorted(detections.glob("*.jsonl"))
        if not dets:
            raise CLIError(f"no detection files in {detections}")
    elif detections.exists():
        dets = [detections]
    else:
        raise CLIError(f"detections not found: {detections}")
    pairs = []
    for d in dets:
        t = truth / d.name if truth.is_dir() else truth
        if not t.exists():
            raise CLIError(f"missing truth file {t}")
        pairs.append((d, t))
    return pairs


def cmd_eval(args) -> int:
    data = Dataset(args.data)
    catalog = data.catalog
    taus = _floats(args.tau)
    pairs = _pairs(Path(args.detections), Path(args.truth))
    per_tau = {t: [] for t in taus}
    all_dets, all_truth, spacing = [], [], None
    for dpath, tpath in pairs:
        tid = dpath.stem
        vol = data.root / "volumes" / f"{tid}.json"
        if not vol.exists():
            raise CLIError(f"no volume {vol} for detections {dpath.name}")
        meta = json.loads(vol.read_text())
        meta = VolumeMeta(tuple(meta["dims"]), float(meta["spacing_angstrom"]))
        spacing = meta.spacing
        truth = read_picks(tpath, meta, catalog)
        _, dets = read_detections(dpath, meta.spacing, catalog)
        for tau, rep in evaluate(dets, truth, catalog, meta.spacing, taus).items():
            per_tau[tau].append(rep)
        all_dets.append(dets)
        all_truth.append(truth)
    reports = [merge_reports(per_tau[t]) for t in taus]
    sweep = None
    if args.sweep:
        sweep = sweep_detections(all_dets, all_truth, catalog, spacing, _grid(args.sweep),
                                 taus[0])
    resolved = {"detections": str(args.detections), "truth": str(args.truth),
                "data": str(args.data), "tau": taus, "sweep": args.sweep}
    started = _now()
    with staged_dir(args.out, args.force) as tmp:
        (tmp / "report.json").write_text(report_json(reports) + "\n")
        (tmp / "report.csv").write_text(report_csv(reports))
        (tmp / "report.txt").write_text(report_table(reports) + "\n")
        if sweep is not None:
            (tmp / "sweep.json").write_text(json.dumps(
                {"tau": taus[0], "grid": sweep.grid, "curves": sweep.curves,
                 "best": sweep.best}, indent=2) + "\n")
        write_manifest(tmp, "eval", resolved, None, started, _files(tmp))
    print(report_table(reports))
    if sweep is not None:
        print(f"best threshold (macro) at tau {taus[0]:g}: {sweep.best['macro']:g}")
    return 0


# ---------------------------------------------------------------------------
# bench


def _sizes(text: str) -> list[tuple[int, ...]]:
    try:
        return [tuple(int(v) for v in s.lower().split("x")) for s in text.split(",") if s]
    except ValueError:
        raise CLIError(f"bad --sizes {text!r}; expected e.g. 6x92x325x325") from None


def cmd_bench(args) -> int:
    catalog = read_catalog(args.catalog) if args.catalog else default_catalog()
    sizes = _sizes(args.sizes)
    if any(len(s) != 4 or s[0] != catalog.C for s in sizes):
        raise CLIError(f"sizes must be C x D x H x W with C = {catalog.C}")
    started = _now()
    rows = bench_decode(sizes, catalog, args.reps, args.n_per_class, args.threshold, args.seed)
    resolved = {"sizes": sizes, "reps": args.reps, "n_per_class": args.n_per_class,
                "threshold": args.threshold, "threads": torch.get_num_threads()}
    with staged_dir(args.out, args.force) as tmp:
        (tmp / "bench.csv").write_text(bench_csv(rows))
        (tmp / "bench.json").write_text(bench_json(rows) + "\n")
        (tmp / "bench.txt").write_text(bench_table(rows) + "\n")
        write_manifest(tmp, "bench", resolved, args.seed, started, _files(tmp))
    print(bench_table(rows))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cryopick", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap torch worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--force", action="store_true", help="replace an existing output")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="override the config seed")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("config")
    s.add_argument("out")
    common(s)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="supervised burn-in on the labeled split")
    t.add_argument("config")
    t.add_argument("data")
    t.add_argument("out")
    t.add_argument("--init", help="start from this checkpoint instead of a fresh network")
    t.add_argument("--resume", help="continue an interrupted run from one of its snapshots")
    common(t)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("cotrain", help="teacher/student co-training from a burn-in checkpoint")
    c.add_argument("config")
    c.add_argument("data")
    c.add_argument("out")
    c.add_argument("--init", help="burn-in checkpoint (required)")
    c.add_argument("--resume", help="continue an interrupted co-training run")
    c.add_argument("--ablate", choices=sorted(ABLATIONS),
                   help="mt: single-view teacher, no DropBlock; mv: four views, no DropBlock; "
                        "dropblock: four views with DropBlock")
    common(c)
    c.set_defaults(func=cmd_cotrain)

    i = sub.add_parser("infer", help="detect particles in volumes")
    i.add_argument("checkpoint")
    i.add_argument("volumes", nargs="+")
    i.add_argument("--out", required=True)
    i.add_argument("--tta", choices=sorted(TTA), default="on",
                   help="on: identity + three single-axis flips; all: all 8 flips")
    i.add_argument("--window", type=int, default=None, help="tile edge (default: whole volume)")
    i.add_argument("--overlap", type=float, default=0.25)
    i.add_argument("--thresholds", default="0.5", help="one value or one per class")
    common(i, seed=False)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score detections against ground truth")
    e.add_argument("detections", help="detections file or directory")
    e.add_argument("--truth", required=True, help="truth picks file or directory")
    e.add_argument("--data", required=True, help="dataset directory (catalog and volumes)")
    e.add_argument("--out", required=True)
    e.add_argument("--tau", default="0.5,0.75")
    e.add_argument("--sweep", default=None, help="threshold grid, lo:hi:step or a list")
    common(e, seed=False)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time nms_decode against ccl_decode")
    b.add_argument("--sizes", default="6x92x325x325")
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--n-per-class", type=int, default=100)
    b.add_argument("--threshold", type=float, default=0.5)
    b.add_argument("--catalog", default=None)
    b.add_argument("--out", required=True)
    common(b)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        torch.set_num_threads(args.threads)
    if getattr(args, "seed", None) is None and args.command == "bench":
        args.seed = 0
    try:
        return args.func(args)
    except (CLIError, FormatError, PickError, PlacementError, CheckpointMismatch, ConfigError,
            TrainingError, ValueError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"cryopick {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
