"""Command-line runs: configuration, image and mesh I/O, stage orchestration and evaluation.

Exit codes: 0 success, 1 user error (bad config, missing input, no alpha
channel), 2 internal abort (non-finite optimization, degenerate geometry).
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import gsplat, mesh as meshlib, surface
from .camera import CameraPose, balance_factor
from .compose import ComposeSchedule
from .evaluation import builtin_object, chamfer, held_out_poses, psnr, render_reference
from .mesh_render import render_mesh
from .priors import ConstantPrior, OracleBank, OraclePrior
from .splat_render import render as render_splats
from .stages import CoarseConfig, MetricsLog, ReferenceView, RefineConfig, StageAbort, run_coarse, run_refine
from .texture import TextureField

log = logging.getLogger("img2mesh")

EXIT_OK, EXIT_USER, EXIT_ABORT = 0, 1, 2


class UserError(Exception):
    pass


# configuration -------------------------------------------------------------------------

@dataclass
class PriorConfig:
    source: str = "builtin:sphere"   # builtin:sphere | builtin:torus | path/to/mesh.obj
    texture: str = "vertex"          # vertex | checker (builtin objects only)
    sigma_max: float = 2.0
    blur: bool = True
    second: str = "none"             # none | oracle | constant
    second_magnitude: float = 1.0


@dataclass
class ComposeConfig:
    mode: str = "none"               # none (single prior) | editing | enhancement
    upper_start: float = 100.0
    upper_end: float = 10.0
    lower_start: float = 10.0
    lower_end: float = 1.0
    front_eta_threshold: float = 0.75
    lower_eta_threshold: float = 0.5


@dataclass
class RunSection:
    ref_azimuth: float = 0.0
    ref_elevation: float = 0.0
    radius: float = 2.0
    fov: float = 49.1
    eval_resolution: int = 64
    eval_views: int = 8
    chamfer_samples: int = 100_000


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    prior: PriorConfig = field(default_factory=PriorConfig)
    coarse: CoarseConfig = field(default_factory=CoarseConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    compose: ComposeConfig = field(default_factory=ComposeConfig)

    def sections(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def compose_schedule(self) -> ComposeSchedule | None:
        c = self.compose
        if c.mode == "none":
            return None
        return ComposeSchedule(self.refine.steps, c.mode, c.upper_start, c.upper_end, c.lower_start,
                               c.lower_end, c.front_eta_threshold, c.lower_eta_threshold)


def _coerce(kind, raw: str, where: str):
    kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool, "str": str}[kind]
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise UserError(f"config {where}: cannot read {raw!r} as {kind.__name__}") from None


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive field names
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise UserError(f"config: {exc}") from None
    cfg = RunConfig()
    sections = cfg.sections()
    for name in parser.sections():
        if name not in sections:
            raise UserError(f"config: unknown section [{name}] (known: {', '.join(sections)})")
        obj = sections[name]
        types = {f.name: f.type for f in dataclasses.fields(obj)}
        for key, raw in parser.items(name):
            if key not in types:
                raise UserError(f"config: unknown key {key!r} in [{name}]")
            setattr(obj, key, _coerce(types[key], raw, f"[{name}] {key}"))
    validate_config(cfg)
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    out = io.StringIO()
    for name, obj in cfg.sections().items():
        out.write(f"[{name}]\n")
        for f in dataclasses.fields(obj):
            out.write(f"{f.name} = {getattr(obj, f.name)!r}\n".replace("'", ""))
        out.write("\n")
    return out.getvalue()


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise UserError(f"config file {path} does not exist")
    return parse_config(p.read_text())


def validate_config(cfg: RunConfig) -> None:
    if cfg.compose.mode not in ("none", "editing", "enhancement"):
        raise UserError(f"config: [compose] mode must be none, editing or enhancement, not {cfg.compose.mode!r}")
    if cfg.prior.second not in ("none", "oracle", "constant"):
        raise UserError(f"config: [prior] second must be none, oracle or constant, not {cfg.prior.second!r}")
    if (cfg.prior.second == "none") != (cfg.compose.mode == "none"):
        raise UserError("config: a second prior needs a compose mode, and a compose mode needs a second prior")
    for name in ("steps",):
        if getattr(cfg.coarse, name) < 1 or getattr(cfg.refine, name) < 1:
            raise UserError(f"config: {name} must be at least 1")


# I/O -------------------------------------------------------------------------------------

def read_rgba(path: str | Path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise UserError(f"input image {path} does not exist")
    with Image.open(p) as im:
        if "A" not in im.getbands():
            raise UserError(
                f"input image {path} has no alpha channel; an RGBA PNG whose alpha marks the foreground is required"
            )
        arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    if arr.shape[0] != arr.shape[1]:
        raise UserError(f"input image must be square, got {arr.shape[1]}x{arr.shape[0]}")
    return arr


def write_png(path: str | Path, rgb, alpha=None) -> None:
    rgb = np.clip(np.asarray(rgb, np.float64), 0.0, 1.0)
    if alpha is not None:
        rgb = np.concatenate([rgb, np.clip(np.asarray(alpha, np.float64), 0.0, 1.0)[..., None]], -1)
    Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(path)


def load_gt(source: str, texture: str) -> meshlib.TriangleMesh:
    if source.startswith("builtin:"):
        try:
            return builtin_object(source.split(":", 1)[1], texture)
        except ValueError as exc:
            raise UserError(str(exc)) from None
    p = Path(source)
    if not p.is_file():
        raise UserError(f"ground-truth mesh {source} does not exist")
    gt = meshlib.load_obj(p)
    if gt.is_empty:
        raise UserError(f"ground-truth mesh {source} has no faces")
    return gt


def build_priors(cfg: RunConfig):
    gt = load_gt(cfg.prior.source, cfg.prior.texture)
    phi = OraclePrior(OracleBank(gt), cfg.prior.sigma_max, cfg.prior.blur)
    rho = None
    if cfg.prior.second == "oracle":
        rho = OraclePrior(OracleBank(gt), 2 * cfg.prior.sigma_max, cfg.prior.blur)
    elif cfg.prior.second == "constant":
        res = cfg.refine.res_end
        direction = torch.ones((res, res, 3), dtype=torch.float64)
        rho = ConstantPrior(direction, cfg.prior.second_magnitude)
    return phi, rho


def reference_pose(cfg: RunConfig, res: int) -> CameraPose:
    r = cfg.run
    return CameraPose(r.ref_azimuth, r.ref_elevation, r.radius, r.fov, res)


# commands ------------------------------------------------------------------------------------

def _paths(out: Path) -> dict[str, Path]:
    return {
        "cloud": out / "coarse.gscl", "grid": out / "refine.grid", "mesh": out / "mesh.obj",
        "metrics": out / "metrics.jsonl", "run": out / "run.json", "eval": out / "eval.json",
        "config": out / "config.ini",
    }


def _save_turntable(out: Path, prefix: str, render_fn, cfg: RunConfig) -> None:
    for k, pose in enumerate(held_out_poses(cfg.run.eval_views, cfg.run.eval_resolution, cfg.run.radius, cfg.run.fov)):
        rgb, alpha = render_fn(pose)
        write_png(out / f"{prefix}_{k}.png", rgb, alpha)


def cmd_coarse(cfg: RunConfig, image: str, out: Path, seed: int, metrics: MetricsLog | None = None):
    rgba = read_rgba(image)
    out.mkdir(parents=True, exist_ok=True)
    paths = _paths(out)
    paths["config"].write_text(serialize_config(cfg))
    prior, _ = build_priors(cfg)
    reference = ReferenceView(rgba, reference_pose(cfg, rgba.shape[0]))
    rng = np.random.default_rng(seed)
    metrics = metrics or MetricsLog(paths["metrics"])
    result = run_coarse(cfg.coarse, prior, reference, rng, metrics, out)
    gsplat.save_cloud(result.cloud, paths["cloud"])

    def render_fn(pose):
        with torch.no_grad():
            img = render_splats(result.cloud, pose)
        return img.rgb.double().numpy(), img.accum_opacity.double().numpy()

    _save_turntable(out, "coarse", render_fn, cfg)
    return result, rng


def cmd_refine(cfg: RunConfig, image: str, out: Path, seed: int, rng=None, metrics: MetricsLog | None = None):
    rgba = read_rgba(image)
    paths = _paths(out)
    if not paths["cloud"].is_file():
        raise UserError(f"no coarse checkpoint at {paths['cloud']}; run the coarse stage first")
    cloud = gsplat.load_cloud(paths["cloud"])
    phi, rho = build_priors(cfg)
    reference = ReferenceView(rgba, reference_pose(cfg, rgba.shape[0]))
    if rng is None:
        rng = np.random.default_rng(seed)
    if metrics is None:
        metrics = MetricsLog(paths["metrics"])
    result = run_refine(cfg.refine, phi, cloud, reference, rng, rho, cfg.compose_schedule(), metrics, out, seed)
    surface.save_grid(paths["grid"], result.grid, result.texture)
    meshlib.save_obj(paths["mesh"], result.mesh)

    def render_fn(pose):
        with torch.no_grad():
            img = render_mesh(result.mesh, result.texture, pose, balance_factor(pose, reference.pose))
        return img.rgb.double().numpy(), img.mask.double().numpy()

    _save_turntable(out, "turntable", render_fn, cfg)
    return result


def cmd_run(cfg: RunConfig, image: str, out: Path, seed: int):
    start = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    metrics = MetricsLog(_paths(out)["metrics"])
    t0 = time.perf_counter()
    _, rng = cmd_coarse(cfg, image, out, seed, metrics)
    t1 = time.perf_counter()
    result = cmd_refine(cfg, image, out, seed, rng, metrics)
    t2 = time.perf_counter()
    _paths(out)["run"].write_text(json.dumps({
        "seed": seed, "coarse_seconds": t1 - t0, "refine_seconds": t2 - t1, "total_seconds": t2 - start,
        "faces": len(result.mesh.faces), "compose_calls": result.compose_calls,
    }, indent=2))
    return result


def cmd_eval(cfg: RunConfig, out: Path, gt_source: str | None, seed: int) -> dict:
    paths = _paths(out)
    if gt_source is None:
        raise UserError("evaluation needs a ground-truth mesh (--gt)")
    gt = load_gt(gt_source, cfg.prior.texture)
    if not paths["mesh"].is_file():
        raise UserError(f"no reconstructed mesh at {paths['mesh']}")
    recon = meshlib.load_obj(paths["mesh"])
    if recon.is_empty:
        raise UserError(f"reconstructed mesh {paths['mesh']} is empty")
    poses = held_out_poses(cfg.run.eval_views, cfg.run.eval_resolution, cfg.run.radius, cfg.run.fov)
    texture = None
    if paths["grid"].is_file():
        r = cfg.refine
        texture = TextureField(r.texture_levels, 2, r.texture_log2_table, r.texture_min_res, r.texture_max_res,
                               r.texture_hidden)
        surface.load_grid(paths["grid"], texture)
    ref = reference_pose(cfg, cfg.run.eval_resolution)
    report: dict = {"views": []}
    with torch.no_grad():
        for pose in poses:
            target = render_mesh(gt, None, pose).rgb
            pred = render_mesh(recon, texture, pose, balance_factor(pose, ref)).rgb
            report["views"].append({"azimuth": pose.azimuth, "psnr": psnr(pred, target)})
        if paths["cloud"].is_file():
            cloud = gsplat.load_cloud(paths["cloud"])
            report["coarse_psnr"] = [psnr(render_splats(cloud, p).rgb, render_mesh(gt, None, p).rgb) for p in poses]
    report["psnr"] = [v["psnr"] for v in report["views"]]
    report["mean_psnr"] = float(np.mean(report["psnr"]))
    report["chamfer"] = chamfer(recon, gt, cfg.run.chamfer_samples, np.random.default_rng(seed))
    if paths["run"].is_file():
        report["runtime_seconds"] = json.loads(paths["run"].read_text())["total_seconds"]
    paths["eval"].write_text(json.dumps(report, indent=2))
    return report


def cmd_fixture(out: str, source: str, texture: str, resolution: int, azimuth: float, elevation: float) -> None:
    """Write an RGBA rendering of a ground-truth object to use as the input image."""
    gt = load_gt(source, texture)
    rgba = render_reference(gt, CameraPose(azimuth, elevation, resolution=resolution))
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_png(out, rgba[..., :3], rgba[..., 3])


# entry point -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="img2mesh", description="Single image to textured mesh (oracle-prior runs).")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, needs_image=True):
        p.add_argument("--config", help="INI configuration file (defaults used when omitted)")
        if needs_image:
            p.add_argument("--input", required=True, help="RGBA PNG, square, object centered")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None, help="intra-op threads (1 for reproducible runs)")

    for name in ("coarse", "refine", "run"):
        common(sub.add_parser(name))
    ev = sub.add_parser("eval")
    common(ev, needs_image=False)
    ev.add_argument("--gt", help="ground-truth mesh: builtin:sphere, builtin:torus or an OBJ path")
    fx = sub.add_parser("fixture", help="render a synthetic RGBA input image")
    fx.add_argument("--out", required=True)
    fx.add_argument("--object", default="builtin:sphere")
    fx.add_argument("--texture", default="vertex")
    fx.add_argument("--resolution", type=int, default=64)
    fx.add_argument("--azimuth", type=float, default=0.0)
    fx.add_argument("--elevation", type=float, default=0.0)
    sub.add_parser("defaults", help="print the default configuration")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "defaults":
            sys.stdout.write(serialize_config(RunConfig()))
            return EXIT_OK
        if args.command == "fixture":
            cmd_fixture(args.out, args.object, args.texture, args.resolution, args.azimuth, args.elevation)
            return EXIT_OK
        if args.threads is not None:
            torch.set_num_threads(max(1, args.threads))
        cfg = load_config(args.config)
        out = Path(args.out)
        if args.command == "coarse":
            cmd_coarse(cfg, args.input, out, args.seed)
        elif args.command == "refine":
            cmd_refine(cfg, args.input, out, args.seed)
        elif args.command == "run":
            cmd_run(cfg, args.input, out, args.seed)
        elif args.command == "eval":
            report = cmd_eval(cfg, out, args.gt, args.seed)
            sys.stdout.write(json.dumps({k: report[k] for k in ("chamfer", "mean_psnr", "psnr")}) + "\n")
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (StageAbort, surface.GeometryError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
