"""Command-line entry point: gen | pad | optimize | eval | ablate | plot.

Exit codes: 0 success, 1 usage error, 2 data error, 3 divergence.
Report files carry their timestamp on a single header line; everything
else in them is a pure function of inputs, config and seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml
from shapely.geometry import Polygon, mapping, shape

from . import __version__
from .core import PointCloud, PointCloudError, atomic_write_text, load_point_cloud, save_point_cloud
from .dataset import PadConfig, RoofSpec, add_padding, generate_roof
from .optim import ARMS, GRIDS, DivergenceError, OptimizerConfig, ablation_cell, run_joint, run_single_loss, run_two_stage
from .planefit import SegmentationParams
from .roofeval import TABLE_COLUMNS, EvalConfig, aggregate_metrics, density_profile, evaluate_roof, outline_2d

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

# default sweep values for each grid
DEFAULT_GRID_VALUES = {
    "alpha": [0.2, 0.3, 0.5, 0.8, 1.0, 1.5, 2.0],
    "n_points": [3000, 4000, 6000, 8000],
    "arm": ["two-stage", "emd-cd", "cd-cd", "emd-emd"],
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class EvalSettings:
    resolution: float = 0.1
    outline_alpha: float | None = None
    outline_on_padded: bool = False
    density_radius: float = 0.5
    pred_pad_mode: str = "auto"
    strip_padding: bool = True
    resample_emd: bool = True


@dataclass
class SegmentationSettings:
    k_normals: int = 12
    angle_threshold_deg: float = 10.0
    distance_threshold: float = 0.15
    min_points: int = 30
    refit_every: int = 20
    attach_boundary: bool = True
    absorb_fraction: float = 0.9


@dataclass
class RunConfig:
    seed: int = 0
    pad: PadConfig = field(default_factory=PadConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    segmentation: SegmentationSettings = field(default_factory=SegmentationSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"].pop("seed")  # follows the root seed
        return d

    def optimizer_cfg(self) -> OptimizerConfig:
        return replace(self.optimizer, seed=self.seed)

    def segmentation_params(self) -> SegmentationParams:
        s = self.segmentation
        return SegmentationParams(
            k_normals=s.k_normals,
            angle_threshold=float(np.deg2rad(s.angle_threshold_deg)),
            distance_threshold=s.distance_threshold,
            min_points=s.min_points,
            refit_every=s.refit_every,
            attach_boundary=s.attach_boundary,
            absorb_fraction=s.absorb_fraction,
        )

    def eval_cfg(self) -> EvalConfig:
        e = self.eval
        return EvalConfig(
            resolution=e.resolution,
            outline_alpha=e.outline_alpha,
            outline_on_padded=e.outline_on_padded,
            density_radius=e.density_radius,
            pad_margin=self.pad.margin,
            pred_pad_mode=e.pred_pad_mode,
            strip_padding=e.strip_padding,
            resample_emd=e.resample_emd,
            seed=self.seed,
            segmentation=self.segmentation_params(),
        )


_SECTIONS = {
    "pad": PadConfig,
    "optimizer": OptimizerConfig,
    "segmentation": SegmentationSettings,
    "eval": EvalSettings,
}


def _section_keys(cls):
    keys = {f.name for f in fields(cls)}
    if cls is OptimizerConfig:
        keys.discard("seed")
    return keys


def _merge(base: dict, extra: dict, where: str) -> None:
    for key, value in extra.items():
        if key == "seed" and where == "":
            base["seed"] = value
            continue
        if where == "" and key in _SECTIONS:
            if not isinstance(value, dict):
                raise UsageError(f"config section {key!r} must be a mapping")
            allowed = _section_keys(_SECTIONS[key])
            unknown = sorted(set(value) - allowed)
            if unknown:
                raise UsageError(f"unknown config key(s) in {key}: {', '.join(unknown)}")
            base[key].update(value)
            continue
        raise UsageError(f"unknown config key {where}{key!r}")


def _parse_override(text: str) -> dict:
    if "=" not in text:
        raise UsageError(f"--set expects section.key=value, got {text!r}")
    path, raw = text.split("=", 1)
    value = yaml.safe_load(raw)
    parts = path.strip().split(".")
    if len(parts) == 1:
        return {parts[0]: value}
    if len(parts) == 2:
        return {parts[0]: {parts[1]: value}}
    raise UsageError(f"--set key too deep: {path!r}")


def load_config(path=None, overrides=(), seed=None) -> RunConfig:
    """Defaults, then the YAML file, then ``--set`` overrides, then ``--seed`` (flags win)."""
    base = RunConfig().to_dict()
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except FileNotFoundError:
            raise DataError(f"{path}: config file not found") from None
        except yaml.YAMLError as exc:
            raise UsageError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError(f"{path}: config must be a mapping")
        _merge(base, data, "")
    for text in overrides:
        _merge(base, _parse_override(text), "")
    if seed is not None:
        base["seed"] = seed
    try:
        return RunConfig(
            seed=int(base["seed"]),
            pad=PadConfig(**base["pad"]),
            optimizer=OptimizerConfig(**base["optimizer"]),
            segmentation=SegmentationSettings(**base["segmentation"]),
            eval=EvalSettings(**base["eval"]),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def config_digest(cfg: RunConfig) -> str:
    text = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return now.strftime("%Y-%m-%dT%H:%M:%SZ")


def write_json_report(path, payload: dict) -> None:
    """JSON whose second line is the only timestamped one."""
    body = json.dumps(payload, indent=2, sort_keys=True)
    head = json.dumps({"generated": _timestamp()})[1:-1]
    text = "{\n  " + head + ("," + body[1:] if payload else "\n}")
    atomic_write_text(path, text + "\n")


def write_csv_report(path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    buf.write(f"# generated {_timestamp()} by roofcloud {__version__}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    atomic_write_text(path, buf.getvalue())


def read_csv_report(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def echo_config(outdir: Path, cfg: RunConfig) -> None:
    atomic_write_text(outdir / "config.resolved.yaml", yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def _load(path) -> PointCloud:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{p}: no such file")
    try:
        return load_point_cloud(p)
    except PointCloudError as exc:
        raise DataError(str(exc)) from None


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# gen / pad
# ---------------------------------------------------------------------------

_SPEC_KEYS = {f.name for f in fields(RoofSpec)}


def read_spec_file(path) -> list[tuple[str, RoofSpec]]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{p}: no such file")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise DataError(f"{p}: invalid YAML: {exc}") from None
    if isinstance(data, dict):
        data = data.get("roofs")
    if not data:
        raise DataError(f"{p}: no roof specs")
    if not isinstance(data, list):
        raise DataError(f"{p}: expected a list of roof specs")
    out = []
    for i, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise DataError(f"{p}: entry {i}: expected a mapping")
        entry = dict(entry)
        name = str(entry.pop("name", ""))
        unknown = sorted(set(entry) - _SPEC_KEYS)
        if unknown:
            raise DataError(f"{p}: entry {i}: unknown key(s) {', '.join(unknown)}")
        try:
            spec = RoofSpec(**entry)
        except (TypeError, ValueError) as exc:
            raise DataError(f"{p}: entry {i}: {exc}") from None
        out.append((name or f"{spec.kind.value}-{i:03d}", spec))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise DataError(f"{p}: duplicate sample names")
    return out


def _sidecar(roof, name, padded_path) -> dict:
    return {
        "name": name,
        "spec": roof.spec.to_dict(),
        "facet_labels": roof.facet_labels.tolist(),
        "facet_models": [{"normal": m.normal.tolist(), "offset": m.offset} for m in roof.facet_models],
        "outline": mapping(roof.outline),
        "padded": padded_path,
    }


def cmd_gen(args, cfg: RunConfig) -> int:
    specs = read_spec_file(args.specfile)
    seeds = [s.seed for _, s in specs]
    dup = sorted({s for s in seeds if seeds.count(s) > 1})
    if dup:
        print(f"warning: duplicate seeds {dup}; those samples share random streams", file=sys.stderr)
    out = _outdir(args.outdir)
    samples = []
    for name, spec in specs:
        roof = generate_roof(spec)
        save_point_cloud(roof.cloud, out / f"{name}.ply")
        padded = None
        if args.pad:
            padded = f"{name}_padded.ply"
            save_point_cloud(add_padding(roof.cloud, roof.outline, cfg.pad, spec.seed), out / padded)
        atomic_write_text(out / f"{name}.json", json.dumps(_sidecar(roof, name, padded), indent=2, sort_keys=True) + "\n")
        samples.append({
            "name": name,
            "roof": f"{name}.ply",
            "target": padded or f"{name}.ply",
            "sidecar": f"{name}.json",
            "n_points": len(roof.cloud),
            "n_facets": roof.n_facets,
        })
    write_json_report(out / "manifest.json", {"samples": samples})
    echo_config(out, cfg)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def _outline_for(path: Path, cloud, sidecar=None):
    side = Path(sidecar) if sidecar else path.with_suffix(".json")
    if side.exists():
        try:
            return shape(json.loads(side.read_text(encoding="utf-8"))["outline"])
        except (KeyError, ValueError) as exc:
            raise DataError(f"{side}: no usable outline ({exc})") from None
    if sidecar:
        raise DataError(f"{side}: no such file")
    return outline_2d(cloud)


def cmd_pad(args, cfg: RunConfig) -> int:
    src = Path(args.input)
    cloud = _load(src)
    outline = _outline_for(src, cloud, args.sidecar)
    if not isinstance(outline, Polygon) and outline.geom_type != "MultiPolygon":
        raise DataError(f"{src}: outline is not a polygon")
    try:
        padded = add_padding(PointCloud(cloud.points), outline, cfg.pad, cfg.seed)
    except ValueError as exc:
        raise DataError(f"{src}: {exc}") from None
    dst = Path(args.output)
    dst.parent.mkdir(parents=True, exist_ok=True)
    save_point_cloud(padded, dst)
    print(f"wrote {len(padded)} points ({len(padded) - len(cloud)} pad) to {dst}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# optimize
# ---------------------------------------------------------------------------

HISTORY_HEADER = ["iteration", "stage", "cd", "emd", "total"]


def write_history(path, history) -> None:
    rows = [[r.iteration, r.stage, r.cd, r.emd, r.total] for r in history]
    write_csv_report(path, HISTORY_HEADER, rows)


def cmd_optimize(args, cfg: RunConfig) -> int:
    target = _load(args.sample)
    out = _outdir(args.outdir)
    echo_config(out, cfg)
    ocfg = cfg.optimizer_cfg()
    try:
        if args.mode == "two-stage":
            res = run_two_stage(target, ocfg)
        elif args.mode == "joint":
            res = run_joint(target, ocfg)
        else:
            loss = "cd" if args.mode == "cd-only" else "emd"
            cloud, history = run_single_loss(target, ocfg, loss)
            save_point_cloud(cloud, out / "x_final.ply")
            write_history(out / "history.csv", history)
            print(f"{args.mode}: final {loss} {history[-1].total:.6g}")
            return EXIT_OK
    except DivergenceError as exc:
        write_history(out / "history.csv", exc.history)
        print(f"error: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_point_cloud(res.x_inter, out / "x_inter.ply")
    save_point_cloud(res.x_final, out / "x_final.ply")
    write_history(out / "history.csv", res.history)
    if res.loss is not None:
        print(f"{args.mode}: cd_inter {res.loss.cd_inter:.6g} emd_final {res.loss.emd_final:.6g} total {res.loss.total:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _manifest_samples(path: Path) -> list[dict]:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except ValueError as exc:
        raise DataError(f"{path}: invalid manifest: {exc}") from None
    samples = data.get("samples") if isinstance(data, dict) else None
    if not samples:
        raise DataError(f"{path}: manifest lists no samples")
    return samples


def _batch_pairs(gt_dir: Path, pred_dir: Path) -> list[tuple[str, Path, Path]]:
    manifest = gt_dir / "manifest.json"
    if manifest.exists():
        gts = [(s["name"], gt_dir / s["target"]) for s in _manifest_samples(manifest)]
    else:
        gts = [(p.stem, p) for p in sorted(gt_dir.glob("*.ply"))]
    pairs = []
    for name, gt in gts:
        for cand in (pred_dir / name / "x_final.ply", pred_dir / gt.name, pred_dir / f"{name}.ply"):
            if cand.exists():
                pairs.append((name, gt, cand))
                break
        else:
            print(f"warning: no prediction for {name} in {pred_dir}", file=sys.stderr)
    if not pairs:
        raise DataError(f"no ground-truth/prediction pairs between {gt_dir} and {pred_dir}")
    return pairs


def _eval_one(task):
    name, gt, pred, ecfg = task
    return name, evaluate_roof(load_point_cloud(gt), load_point_cloud(pred), ecfg).to_dict()


def _map(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def cmd_eval(args, cfg: RunConfig) -> int:
    if args.with_pad is not None:
        cfg = replace(cfg, eval=replace(cfg.eval, strip_padding=not args.with_pad))
    ecfg = cfg.eval_cfg()
    gt, pred = Path(args.gt), Path(args.pred)
    if gt.is_dir() != pred.is_dir():
        raise UsageError("gt and pred must both be files or both be directories")
    if gt.is_dir():
        tasks = [(n, g, p, ecfg) for n, g, p in _batch_pairs(gt, pred)]
    else:
        for p in (gt, pred):
            if not p.exists():
                raise DataError(f"{p}: no such file")
        tasks = [(pred.stem, gt, pred, ecfg)]
    try:
        results = _map(_eval_one, tasks, args.jobs)
    except PointCloudError as exc:
        raise DataError(str(exc)) from None
    out = _outdir(args.outdir)
    echo_config(out, cfg)
    agg = aggregate_metrics([r for _, r in results])
    payload = {"samples": {n: r for n, r in results}}
    rows = [[n, *(r["metrics"][c] for c in TABLE_COLUMNS)] for n, r in results]
    if len(results) > 1:
        payload["aggregate"] = agg
        rows.append(["mean", *(agg[c] for c in TABLE_COLUMNS)])
    write_json_report(out / "report.json", payload)
    write_csv_report(out / "report.csv", ["sample", *TABLE_COLUMNS], rows)
    for n, r in results:
        if r["errors"]:
            print(f"{n}: partial report: {', '.join(r['errors'])}", file=sys.stderr)
    m = agg
    print(f"{len(results)} sample(s): Q {m['quality']} Cm {m['completeness']} Cr {m['correctness']} IoU {m['outline_iou']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def _parse_values(grid, raw):
    if not raw:
        return list(DEFAULT_GRID_VALUES[grid])
    if grid == "arm":
        bad = [v for v in raw if v not in ARMS]
        if bad:
            raise UsageError(f"unknown arm(s) {bad}; expected {sorted(ARMS)}")
        return list(raw)
    try:
        return [int(v) if grid == "n_points" else float(v) for v in raw]
    except ValueError:
        raise UsageError(f"bad {grid} value in {raw}") from None


def _cell_path(cache: Path, sample: str, label: str, seed: int) -> Path:
    safe = label.replace("=", "-").replace("/", "_")
    return cache / f"{sample}__{safe}__seed{seed}.json"


def _ablate_cell(task):
    index, name, target_path, grid, value, ocfg, ecfg, cache_path, digest = task
    try:
        cell = ablation_cell(load_point_cloud(target_path), name, index, grid, value, ocfg, ecfg)
        result = {
            "report": cell.report.to_dict(),
            "inter": None if cell.inter_report is None else cell.inter_report.to_dict(),
            "seconds": cell.seconds,
            "error": None,
        }
    except Exception as exc:  # recorded per cell; the table run continues
        result = {"report": None, "inter": None, "seconds": None, "error": f"{type(exc).__name__}: {exc}"}
    result["config"] = digest
    atomic_write_text(cache_path, json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def cmd_ablate(args, cfg: RunConfig) -> int:
    from .optim import _cell_cfg, sample_seed

    manifest = Path(args.manifest)
    samples = _manifest_samples(manifest)
    if args.limit:
        samples = samples[: args.limit]
    values = _parse_values(args.grid, args.values)
    ocfg, ecfg = cfg.optimizer_cfg(), cfg.eval_cfg()
    out = _outdir(args.outdir)
    cache = _outdir(out / "cache")
    echo_config(out, cfg)
    digest = config_digest(cfg)

    cells, tasks = {}, []
    for value in values:
        label = _cell_cfg(args.grid, value, ocfg)[0]
        for i, s in enumerate(samples):
            path = _cell_path(cache, s["name"], label, sample_seed(ocfg.seed, i))
            key = (label, s["name"])
            if path.exists():
                try:
                    cached = json.loads(path.read_text(encoding="utf-8"))
                    if cached.get("config") == digest and cached.get("error") is None:
                        cells[key] = cached
                        continue
                except ValueError:
                    pass
            target = manifest.parent / s["target"]
            if not target.exists():
                raise DataError(f"{target}: no such file")
            tasks.append((i, s["name"], target, args.grid, value, ocfg, ecfg, path, digest))
    skipped = len(cells)
    t0 = time.perf_counter()
    for task, result in zip(tasks, _map(_ablate_cell, tasks, args.jobs)):
        label = _cell_cfg(args.grid, task[4], ocfg)[0]
        cells[(label, task[1])] = result
    print(f"{len(tasks)} cell(s) run, {skipped} from cache, {time.perf_counter() - t0:.1f}s")

    labels = [_cell_cfg(args.grid, v, ocfg)[0] for v in values]
    names = [s["name"] for s in samples]
    rows, timing, combined, failed = [], [], {"grid": args.grid, "rows": {}, "cells": {}}, 0
    for label in labels:
        ok = [cells[(label, n)] for n in names if cells[(label, n)]["error"] is None]
        failed += len(names) - len(ok)
        agg = aggregate_metrics([c["report"] for c in ok])
        rows.append([label, *(agg[c] for c in TABLE_COLUMNS), len(ok)])
        secs = [c["seconds"] for c in ok]
        timing.append([label, float(np.mean(secs)) if secs else None])
        combined["rows"][label] = agg
        for n in names:
            c = cells[(label, n)]
            combined["cells"][f"{label}/{n}"] = {k: c[k] for k in ("report", "inter", "error")}
    write_csv_report(out / f"ablation_{args.grid}.csv", [args.grid, *TABLE_COLUMNS, "n"], rows)
    write_csv_report(out / f"timing_{args.grid}.csv", [args.grid, "seconds_per_sample"], timing)
    write_json_report(out / f"ablation_{args.grid}.json", combined)
    if failed:
        print(f"warning: {failed} cell(s) failed; see ablation_{args.grid}.json", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------

def cmd_plot(args, cfg: RunConfig) -> int:
    from . import plots

    inputs = [Path(p) for p in args.inputs]
    for p in inputs:
        if not p.exists():
            raise DataError(f"{p}: no such file")
    if args.kind == "history":
        if len(inputs) != 1 or inputs[0].suffix.lower() != ".csv":
            raise UsageError("history plots take exactly one history CSV")
        rows = read_csv_report(inputs[0])
        if not rows or set(HISTORY_HEADER) - set(rows[0]):
            raise DataError(f"{inputs[0]}: not a loss history (expected columns {HISTORY_HEADER})")
        it = np.array([int(r["iteration"]) for r in rows])
        cols = {}
        for c in ("cd", "emd", "total"):
            vals = np.array([float(r[c]) if r[c] else np.nan for r in rows])
            if np.isfinite(vals).any():
                cols[c] = vals
        svg = plots.loss_curves(cols, it, title=inputs[0].parent.name)
    else:
        if any(p.suffix.lower() not in (".ply", ".xyz") for p in inputs):
            raise UsageError(f"{args.kind} plots take point cloud files")
        clouds = [_load(p) for p in inputs]
        if args.kind == "density":
            if len(clouds) < 2:
                raise UsageError("density plots take a ground-truth cloud and at least one prediction")
            labels = args.labels or ["gt"] + [p.stem if p.stem != "x_final" else p.parent.name for p in inputs[1:]]
            if len(labels) != len(clouds):
                raise UsageError(f"--labels needs {len(clouds)} names")
            profiles = [density_profile(clouds[0], c, cfg.eval.density_radius) for c in clouds[1:]]
            groups = [(labels[0], profiles[0].counts_gt)]
            groups += [(lab, prof.counts_pred) for lab, prof in zip(labels[1:], profiles)]
            svg = plots.density_boxplot(groups, cfg.eval.density_radius)
        else:
            if len(clouds) != 1:
                raise UsageError("cloud-topdown plots take exactly one cloud")
            svg = plots.cloud_topdown(clouds[0], title=inputs[0].name)
    dst = Path(args.output)
    dst.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(dst, svg)
    print(f"wrote {dst}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run config (unknown keys are rejected)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable; wins over --config")
    common.add_argument("--seed", type=int, help="root seed (wins over config)")

    parser = _Parser(prog="roofcloud", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"roofcloud {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate synthetic roofs from a spec file")
    p.add_argument("specfile")
    p.add_argument("-o", "--outdir", required=True)
    p.add_argument("--pad", action="store_true", help="also write padded targets")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pad", parents=[common], help="add a pad ring around a roof cloud")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--sidecar", help="JSON sidecar with the outline (default: alongside input, else alpha shape)")
    p.set_defaults(func=cmd_pad)

    p = sub.add_parser("optimize", parents=[common], help="fit a point set to a target cloud")
    p.add_argument("sample")
    p.add_argument("-o", "--outdir", required=True)
    p.add_argument("--mode", choices=["two-stage", "cd-only", "emd-only", "joint"], default="two-stage")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("eval", parents=[common], help="evaluate a prediction (or a directory of them)")
    p.add_argument("gt")
    p.add_argument("pred")
    p.add_argument("-o", "--outdir", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--with-pad", dest="with_pad", action="store_true", default=None,
                   help="shape metrics on the padded clouds")
    g.add_argument("--no-pad", dest="with_pad", action="store_false",
                   help="strip padding before shape metrics (default)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="batch-mean metrics over a grid of settings")
    p.add_argument("manifest")
    p.add_argument("--grid", choices=list(GRIDS), required=True)
    p.add_argument("--values", nargs="*", help="grid values (default: the standard grid)")
    p.add_argument("-o", "--outdir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--limit", type=int, help="use only the first N samples")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", parents=[common], help="write an SVG figure")
    p.add_argument("kind", choices=["density", "history", "cloud-topdown"])
    p.add_argument("inputs", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--labels", nargs="*")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config, args.set, args.seed)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, PointCloudError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
