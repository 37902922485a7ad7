"""Command-line front end: data generation, training, reconstruction and reporting.

Exit codes: 0 success, 2 configuration error, 3 solver limit reached (the
incumbent is still written), 4 internal error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from ._accel import USE_NUMBA
from .convex import CsConfig, CshmConfig, scale_lambda, sirt, solve_cs, solve_cshm
from .core import CSV_FIELDS, MetricReport, bms, mc, rdc, rme, write_metric_csv
from .datasets import (NoiseSpec, PhantomSpec, angle_indices, apply_poisson_noise, export_png,
                       generate_phantom, read_image, read_sinogram, ray_rows, subsample_angles,
                       write_image, write_sinogram)
from .edgenet import (EdgeNet, TrainConfig, TrainingDiverged, corpus_training_set, max_output,
                      synthetic_corpus, train_edge_net)
from .projector import ProjectionGeometry, build_geometry, build_radon_matrix, project

log = logging.getLogger("tomomip")

EXIT_OK, EXIT_CONFIG, EXIT_LIMIT, EXIT_INTERNAL = 0, 2, 3, 4
ALGORITHMS = ("sirt", "cs", "cshm", "mipro", "integrated")
PAPER_LAMBDA = 20000.0


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.__cause__ = exc


def _defaults(algorithm: str, side: int) -> dict:
    cshm = {"lambda": scale_lambda(PAPER_LAMBDA, side), "mu": 1.0, "omega": 255.0,
            "max_iters": 20000, "tol": 1e-6}
    table = {
        "sirt": {"iters": 1000},
        "cs": {"lambda": scale_lambda(PAPER_LAMBDA, side), "max_iters": 20000, "tol": 1e-6},
        "cshm": cshm,
        "mipro": dict(cshm, spacing=3, T=800.0, alpha=1 / 50, beta=1 / 50, merge="mean",
                      window_time_limit=None),
        "integrated": dict(cshm, phi=1e8, roi=[24, 24, 16, 16], mode="non-overlapping",
                           gap_tol=0.15, time_limit=600.0, T=800.0, max_windows=25),
    }
    return copy.deepcopy(table[algorithm])


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "phantom", "side": 64})
    geometry: dict = field(default_factory=lambda: {"angles": 20, "wedge": 0.0})
    noise: Optional[dict] = field(default_factory=lambda: {"dose": 1e4, "seed": 0})
    algorithm: str = "sirt"
    params: dict = field(default_factory=dict)
    net: Optional[str] = None
    output_dir: str = "run"
    threads: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"dataset", "geometry", "noise", "algorithm", "params", "net", "output_dir",
                 "threads"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        cfg = cls(**{k: copy.deepcopy(v) for k, v in d.items()})
        cfg.validate()
        return cfg

    @property
    def side(self) -> int:
        return int(self.dataset.get("side", 64))

    def resolved_params(self) -> dict:
        p = _defaults(self.algorithm, self.side)
        unknown = set(self.params) - set(p)
        if unknown:
            raise ConfigError(f"unknown parameters for {self.algorithm}: {sorted(unknown)}")
        p.update(self.params)
        return p

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
        kind = self.dataset.get("kind", "phantom")
        if kind not in ("phantom", "image", "sinogram"):
            raise ConfigError("dataset.kind must be phantom, image or sinogram")
        if kind != "phantom":
            path = self.dataset.get("path")
            if not path or not Path(_stem_json(path, kind)).exists():
                raise ConfigError(f"dataset file {path!r} not found")
        if kind == "phantom" and self.side < 3:
            raise ConfigError("phantom side must be at least 3")
        n_ang = self.geometry.get("angles", 20)
        wedge = self.geometry.get("wedge", 0.0)
        if not isinstance(n_ang, int) or n_ang < 1:
            raise ConfigError("geometry.angles must be a positive integer")
        if not 0 <= wedge < 180:
            raise ConfigError("geometry.wedge must lie in [0, 180)")
        if self.noise is not None and not self.noise.get("dose", 1.0) > 0:
            raise ConfigError("noise.dose must be positive")
        if self.algorithm in ("mipro", "integrated"):
            if not self.net:
                raise ConfigError(f"{self.algorithm} requires a net path")
            if not Path(self.net).exists():
                raise ConfigError(f"net file {self.net} not found")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        p = self.resolved_params()
        if self.algorithm == "mipro" and p["spacing"] not in (1, 3):
            raise ConfigError("mipro spacing must be 1 or 3")
        for key in ("lambda", "mu", "alpha", "beta", "phi", "T"):
            if key in p and p[key] < 0:
                raise ConfigError(f"{key} must be nonnegative")

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "geometry": self.geometry, "noise": self.noise,
                "algorithm": self.algorithm, "params": self.resolved_params(),
                "net": self.net, "output_dir": self.output_dir}


def _stem_json(path, kind):
    s = str(path)
    return s if s.endswith(".json") else s + f".{'img' if kind == 'image' else 'sino'}.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _geometry(cfg: ExperimentConfig, side: int) -> ProjectionGeometry:
    return build_geometry(int(cfg.geometry.get("angles", 20)),
                          float(cfg.geometry.get("wedge", 0.0)), side)


def prepare_data(cfg: ExperimentConfig):
    """Ground truth (or None), geometry, operator and measured sinogram."""
    kind = cfg.dataset.get("kind", "phantom")
    truth = None
    if kind == "sinogram":
        p = read_sinogram(cfg.dataset["path"])
        side = int(cfg.dataset.get("side") or round(p.detector_count / math.sqrt(2)))
        geom = ProjectionGeometry(p.angles, p.detector_count, side)
        return None, geom, build_radon_matrix(geom), p
    if kind == "phantom":
        spec = PhantomSpec(side=cfg.side)
        truth = generate_phantom(spec)
    else:
        truth = read_image(cfg.dataset["path"])
        if truth.width != truth.height:
            raise ConfigError("only square images are supported")
    side = truth.width
    geom = _geometry(cfg, side)
    full = build_geometry(int(cfg.geometry.get("full_angles", 180)), 0.0, side)
    noise = NoiseSpec(**cfg.noise) if cfg.noise else None
    try:
        idx = angle_indices(full.angles_deg, geom.angles_deg)
    except KeyError:
        idx = None
    if idx is not None:
        # noise is drawn once on the full tilt series, then subsampled
        R_full = build_radon_matrix(full)
        p_full = project(full, R_full, truth)
        if noise is not None:
            p_full = apply_poisson_noise(p_full, noise)
        R = R_full.take_rows(ray_rows(idx, full.detector_count))
        p = subsample_angles(p_full, geom)
    else:
        R = build_radon_matrix(geom)
        p = project(geom, R, truth)
        if noise is not None:
            p = apply_poisson_noise(p, noise)
    return truth, geom, R, p


def _cshm(R, p, prm, side, trace_path=None):
    cfg = CshmConfig(lambda_tv=prm["lambda"], max_iters=int(prm["max_iters"]), tol=prm["tol"],
                     mu=prm["mu"], omega=prm["omega"])
    return cfg, solve_cshm(R, p, cfg, image_shape=(side, side), trace_path=trace_path)


def run_algorithm(cfg: ExperimentConfig, R, p, side, out: Path):
    """Returns ``(image, limit_reached, extra)``."""
    prm = cfg.resolved_params()
    alg = cfg.algorithm
    if alg == "sirt":
        return sirt(R, p, int(prm["iters"]), image_shape=(side, side)), False, {}
    if alg == "cs":
        res = solve_cs(R, p, CsConfig(prm["lambda"], int(prm["max_iters"]), prm["tol"]),
                       image_shape=(side, side), trace_path=out / "convex_trace.csv")
        return res.image, False, {"objective": res.objective, "dual_bound": res.dual_bound}
    ccfg, base = _cshm(R, p, prm, side, trace_path=out / "convex_trace.csv")
    if alg == "cshm":
        return base.image, False, {"objective": base.objective, "dual_bound": base.dual_bound}
    net = EdgeNet.load(cfg.net)
    if net.u_bar is None:
        max_output(net)
    if alg == "mipro":
        from .mipro import MipRoConfig, sliding_window_reoptimize

        mcfg = MipRoConfig(spacing=int(prm["spacing"]), T=prm["T"], alpha=prm["alpha"],
                           beta=prm["beta"], omega=net.omega, merge=prm["merge"],
                           time_limit=prm["window_time_limit"] or math.inf)
        res = sliding_window_reoptimize(base.image, net, mcfg, workers=cfg.threads,
                                        log_path=out / "mipro_windows.csv")
        return res.image, res.limited > 0, {"limited_windows": res.limited}
    from .integrated import IntegratedConfig, solve_integrated

    icfg = IntegratedConfig(phi=prm["phi"], roi=tuple(prm["roi"]), mode=prm["mode"],
                            gap_tol=prm["gap_tol"], time_limit=prm["time_limit"], T=prm["T"],
                            max_windows=int(prm["max_windows"]))
    res = solve_integrated(R, p, ccfg, net, icfg, base, trace_path=out / "integrated_trace.csv")
    limited = res.status not in ("optimal", "gap_reached")
    return res.image, limited, {"gap": res.gap, "status": res.status,
                                "baseline_objective": res.baseline_objective,
                                "objective": res.objective}


def run_pipeline(cfg: ExperimentConfig):
    """Run one experiment; returns ``(MetricReport, artifacts, limit_reached)``."""
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        truth, geom, R, p = prepare_data(cfg)
    except ConfigError:
        raise
    except Exception as exc:
        raise StageError("data", exc) from exc
    side = geom.image_side
    t0 = time.perf_counter()
    try:
        image, limited, extra = run_algorithm(cfg, R, p, side, out)
    except ConfigError:
        raise
    except Exception as exc:
        raise StageError(cfg.algorithm, exc) from exc
    runtime = time.perf_counter() - t0

    artifacts = {}
    artifacts["reconstruction.img.json"] = write_image(image, out / "reconstruction")
    artifacts["reconstruction.img.bin"] = out / "reconstruction.img.bin"
    artifacts["reconstruction.png"] = export_png(image, out / "reconstruction.png")
    artifacts["measured.sino.json"] = write_sinogram(p, out / "measured")
    artifacts["measured.sino.bin"] = out / "measured.sino.bin"

    params = cfg.resolved_params()
    report = MetricReport(
        bms=bms(image), mc=mc(image), runtime_seconds=runtime,
        rme=rme(image, truth) if truth is not None else None,
        rdc=rdc(R, image, p),
        dataset=f"{cfg.dataset.get('kind', 'phantom')}{side}",
        algorithm=cfg.algorithm,
        params={"angles": len(geom.angles_deg), "wedge": cfg.geometry.get("wedge", 0.0),
                **{k: v for k, v in params.items() if not isinstance(v, (list, dict))}})
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        write_metric_csv([report], fh)
    manifest = {
        "tomomip_version": __version__,
        "numba": USE_NUMBA,
        "config": cfg.to_dict(),
        "geometry_hash": geom.content_hash(),
        "net_sha256": sha256_file(cfg.net) if cfg.net else None,
        "artifacts": {k: sha256_file(v) for k, v in sorted(artifacts.items())},
        "solver": {k: v for k, v in extra.items() if k not in ("objective",)} if extra else {},
        "limit_reached": bool(limited),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                  default=_json_default))
    artifacts["metrics.csv"] = metrics_path
    artifacts["manifest.json"] = out / "manifest.json"
    return report, artifacts, limited


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def train_command(out_path, cfg: TrainConfig = TrainConfig(), n_images: int = 48,
                  images=(), omega: float = 255.0, log_fh=None) -> EdgeNet:
    """Train on the procedural corpus (plus optional images), compute the
    network maximum and write ``*.edgenet.json``."""
    corpus = synthetic_corpus(n_images, seed=cfg.seed)
    for path in images:
        corpus.append(_load_gray(path))
    samples = corpus_training_set(corpus, omega=omega, seed=cfg.seed)
    if log_fh is not None:
        log_fh.write("epoch,loss\n")

    def emit(epoch, loss):
        if log_fh is not None:
            log_fh.write(f"{epoch},{loss:.10g}\n")

    net, report = train_edge_net(samples, cfg, log_fn=emit)
    net.meta["holdout_rmse_fraction_of_max"] = report.holdout_rmse / report.max_target
    max_output(net)
    net.save(out_path)
    return net


def _load_gray(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".img.json") or path.endswith(".img.bin"):
        return read_image(path).as_array()
    from PIL import Image as PILImage

    return np.asarray(PILImage.open(path).convert("F"), dtype=np.float64)


# ---------------------------------------------------------------------------
# argparse
# ---------------------------------------------------------------------------

def _kv(s):
    if "=" not in s:
        raise argparse.ArgumentTypeError("expected key=value")
    k, v = s.split("=", 1)
    try:
        return k, json.loads(v)
    except json.JSONDecodeError:
        return k, v


def _default_threads():
    from .mipro import default_workers

    return default_workers()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tomomip", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", help="write the binary test phantom")
    sp.add_argument("--side", type=int, default=64)
    sp.add_argument("--out", required=True, help="output stem")

    sp = sub.add_parser("project", help="forward-project an image, optionally with noise")
    sp.add_argument("--image", required=True)
    sp.add_argument("--angles", type=int, default=20)
    sp.add_argument("--wedge", type=float, default=0.0)
    sp.add_argument("--dose", type=float, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("train", help="train the edge network")
    sp.add_argument("--out", required=True, help="*.edgenet.json path")
    sp.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    sp.add_argument("--lr", type=float, default=TrainConfig.lr)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-images", type=int, default=48)
    sp.add_argument("--image", action="append", default=[], help="extra grayscale image")

    sp = sub.add_parser("reconstruct", help="run a full experiment")
    sp.add_argument("--config", help="JSON experiment config")
    sp.add_argument("--algorithm", choices=ALGORITHMS)
    sp.add_argument("--angles", type=int)
    sp.add_argument("--wedge", type=float)
    sp.add_argument("--side", type=int)
    sp.add_argument("--dose", type=float)
    sp.add_argument("--no-noise", action="store_true")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--net")
    sp.add_argument("--out-dir")
    sp.add_argument("--threads", type=int, default=None)
    sp.add_argument("--param", type=_kv, action="append", default=[],
                    help="algorithm parameter override, key=value (JSON value)")

    sp = sub.add_parser("metrics", help="score a reconstruction")
    sp.add_argument("--recon", required=True)
    sp.add_argument("--truth")
    sp.add_argument("--sinogram")
    sp.add_argument("--epsilon", type=float, default=10.0)

    sp = sub.add_parser("report", help="collect metrics.csv files into one table")
    sp.add_argument("paths", nargs="+")
    return ap


def config_from_args(args) -> ExperimentConfig:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    cfg = ExperimentConfig.from_dict(d) if d else ExperimentConfig()
    if args.algorithm:
        cfg.algorithm = args.algorithm
    if args.angles is not None:
        cfg.geometry["angles"] = args.angles
    if args.wedge is not None:
        cfg.geometry["wedge"] = args.wedge
    if args.side is not None:
        cfg.dataset["side"] = args.side
    if args.no_noise:
        cfg.noise = None
    else:
        if cfg.noise is None and (args.dose is not None or args.seed is not None):
            cfg.noise = {"dose": 1e4, "seed": 0}
        if args.dose is not None:
            cfg.noise["dose"] = args.dose
        if args.seed is not None:
            cfg.noise["seed"] = args.seed
    if args.net:
        cfg.net = args.net
    if args.out_dir:
        cfg.output_dir = args.out_dir
    cfg.threads = args.threads if args.threads is not None else (
        d.get("threads") or _default_threads())
    for k, v in args.param:
        cfg.params[k] = v
    cfg.validate()
    return cfg


def _cmd_metrics(args):
    recon = read_image(args.recon)
    row = {"bms": bms(recon, args.epsilon), "mc": mc(recon), "rme": "", "rdc": ""}
    if args.truth:
        row["rme"] = rme(recon, read_image(args.truth))
    if args.sinogram:
        p = read_sinogram(args.sinogram)
        geom = ProjectionGeometry(p.angles, p.detector_count, recon.width)
        row["rdc"] = rdc(build_radon_matrix(geom), recon, p)
    wr = csv.DictWriter(sys.stdout, fieldnames=["rme", "rdc", "bms", "mc"], lineterminator="\n")
    wr.writeheader()
    wr.writerow(row)


def _cmd_report(args):
    rows = []
    for path in args.paths:
        p = Path(path)
        files = sorted(p.rglob("metrics.csv")) if p.is_dir() else [p]
        for f in files:
            with open(f, newline="") as fh:
                rows.extend(csv.DictReader(fh))
    wr = csv.DictWriter(sys.stdout, fieldnames=list(CSV_FIELDS), lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: r.get(k, "") for k in CSV_FIELDS})


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "phantom":
            img = generate_phantom(PhantomSpec(side=args.side))
            write_image(img, args.out)
            export_png(img, str(args.out) + ".png")
        elif args.command == "project":
            img = read_image(args.image)
            geom = build_geometry(args.angles, args.wedge, img.width)
            R = build_radon_matrix(geom)
            s = project(geom, R, img)
            if args.dose is not None:
                s = apply_poisson_noise(s, NoiseSpec(args.dose, args.seed))
            write_sinogram(s, args.out)
        elif args.command == "train":
            cfg = TrainConfig(epochs=args.epochs, lr=args.lr, seed=args.seed)
            net = train_command(args.out, cfg, args.n_images, args.image, log_fh=sys.stdout)
            print(f"holdout_rmse={net.meta['holdout_rmse']:.6g} "
                  f"({100 * net.meta['holdout_rmse_fraction_of_max']:.2f}% of max target) "
                  f"u_bar={net.u_bar:.6g}", file=sys.stderr)
        elif args.command == "reconstruct":
            cfg = config_from_args(args)
            report, artifacts, limited = run_pipeline(cfg)
            sys.stdout.write(write_metric_csv([report]))
            if limited:
                log.warning("a solver limit was reached; the incumbent was written")
                return EXIT_LIMIT
        elif args.command == "metrics":
            _cmd_metrics(args)
        elif args.command == "report":
            _cmd_report(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("internal error", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
