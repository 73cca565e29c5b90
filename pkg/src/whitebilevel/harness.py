"""Experiment harness: degrade, learn, grid sweep, batch runs, reports.

All outputs are deterministic functions of the configuration: noise seeds
are derived per (image, BSNR) from the base seed, files carry the config
hash, and CSV records contain no timestamps (wall-clock timings go to a
separate ``timings.csv`` that is excluded from the reproducibility
guarantee).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agd import nesterov_agd
from .bilevel import BilevelResult, learn_lambda
from .config import ConfigError, ExperimentConfig, KernelSpec
from .degrade import add_awgn_bsnr, make_gaussian_kernel, make_motion_kernel
from .image import read_pgm, read_raw, write_raw
from .losses import GaussLoss, MseLoss, WhiteLoss, loss_residual, loss_value
from .metrics import psnr, ssim
from .operators import ConvOperator, Kernel
from .synth import synthetic_image
from .tv import TVProblem

__all__ = [
    "MissingSideDataError",
    "ExperimentRecord",
    "build_kernel",
    "image_ids",
    "cmd_degrade",
    "cmd_learn",
    "cmd_grid",
    "cmd_batch",
    "cmd_report",
]

logger = logging.getLogger(__name__)

RECORD_FIELDS = (
    "image", "loss", "bsnr", "lambda_hat", "psnr", "ssim",
    "q_value", "outer_iterations", "converged",
)


class MissingSideDataError(FileNotFoundError):
    """A loss needs side data (ground truth or sigma) that is not available."""


@dataclass
class ExperimentRecord:
    image: str
    loss: str
    bsnr: float
    lambda_hat: float
    psnr: float | None
    ssim: float | None
    q_value: float
    outer_iterations: int
    converged: bool
    wall_time_s: float

    def csv_row(self) -> dict:
        return {
            "image": self.image,
            "loss": self.loss,
            "bsnr": _fmt(self.bsnr),
            "lambda_hat": _fmt(self.lambda_hat),
            "psnr": "" if self.psnr is None else _fmt(self.psnr),
            "ssim": "" if self.ssim is None else _fmt(self.ssim),
            "q_value": _fmt(self.q_value),
            "outer_iterations": str(self.outer_iterations),
            "converged": str(int(self.converged)),
        }


def _fmt(v: float) -> str:
    return format(float(v), ".12g")


def build_kernel(spec: KernelSpec) -> Kernel:
    if spec.kind == "gaussian":
        return make_gaussian_kernel(spec.size, spec.std)
    if spec.kind == "motion":
        return make_motion_kernel(spec.length, spec.angle_deg)
    taps = np.asarray(spec.taps, dtype=np.float64)
    return Kernel(taps, (taps.shape[0] // 2, taps.shape[1] // 2))


def _out_dirs(cfg: ExperimentConfig) -> dict[str, Path]:
    root = Path(cfg.out_dir)
    dirs = {
        "root": root,
        "truth": root / "truth",
        "degraded": root / "degraded",
        "runs": root / "runs",
        "grid": root / "grid",
        "report": root / "report",
    }
    for p in dirs.values():
        p.mkdir(parents=True, exist_ok=True)
    return dirs


def image_ids(cfg: ExperimentConfig) -> list[str]:
    if cfg.image_paths:
        return [Path(p).stem for p in cfg.image_paths]
    return [f"synth{k:03d}" for k in range(cfg.synthetic_count)]


def _load_source_image(cfg: ExperimentConfig, index: int) -> np.ndarray:
    if cfg.image_paths:
        path = Path(cfg.image_paths[index])
        if not path.exists():
            raise ConfigError(f"input image {path} does not exist")
        if path.suffix.lower() == ".pgm":
            return read_pgm(path)
        return read_raw(path)
    return synthetic_image(cfg.synthetic_size, cfg.seed + 1000 * index)


def _noise_seed(cfg: ExperimentConfig, image_index: int, bsnr_index: int) -> int:
    seq = np.random.SeedSequence([int(cfg.seed), int(image_index), int(bsnr_index)])
    return int(seq.generate_state(1, np.uint64)[0])


def _stem(image_id: str, bsnr: float) -> str:
    return f"{image_id}_bsnr{bsnr:g}"


def _truth_path(cfg: ExperimentConfig, image_id: str) -> Path:
    return Path(cfg.out_dir) / "truth" / f"{image_id}.f64"


def _observation_path(cfg: ExperimentConfig, image_id: str, bsnr: float) -> Path:
    return Path(cfg.out_dir) / "degraded" / f"{_stem(image_id, bsnr)}.f64"


def _sidecar_path(cfg: ExperimentConfig, image_id: str, bsnr: float) -> Path:
    return Path(cfg.out_dir) / "degraded" / f"{_stem(image_id, bsnr)}.json"


def cmd_degrade(cfg: ExperimentConfig) -> list[Path]:
    """Blur every input image and add seeded noise at every BSNR level.

    Writes the ground truth and each observation as exact float64 dumps plus
    a JSON sidecar per observation recording the degradation parameters.
    Returns the list of observation paths.
    """
    dirs = _out_dirs(cfg)
    chash = cfg.config_hash()
    (dirs["root"] / "config_used.json").write_text(cfg.canonical_json() + "\n", encoding="ascii")
    kernel = build_kernel(cfg.kernel)
    written = []
    for idx, image_id in enumerate(image_ids(cfg)):
        truth = _load_source_image(cfg, idx)
        write_raw(_truth_path(cfg, image_id), truth)
        op = ConvOperator(kernel, truth.shape)
        blurred = op.apply(truth)
        for bidx, level in enumerate(cfg.bsnr):
            seed = _noise_seed(cfg, idx, bidx)
            noisy, sigma = add_awgn_bsnr(blurred, level, seed)
            obs_path = _observation_path(cfg, image_id, level)
            write_raw(obs_path, noisy)
            sidecar = {
                "image": image_id,
                "bsnr": level,
                "sigma": sigma,
                "seed": seed,
                "kernel": cfg.kernel.to_dict(),
                "config_hash": chash,
                "base_seed": cfg.seed,
            }
            _sidecar_path(cfg, image_id, level).write_text(
                json.dumps(sidecar, sort_keys=True) + "\n", encoding="ascii"
            )
            written.append(obs_path)
    return written


def _load_observation(cfg: ExperimentConfig, image_id: str, bsnr: float) -> np.ndarray:
    path = _observation_path(cfg, image_id, bsnr)
    if not path.exists():
        raise MissingSideDataError(f"observation {path} not found; run degrade first")
    return read_raw(path)


def _load_sigma(cfg: ExperimentConfig, image_id: str, bsnr: float) -> float:
    path = _sidecar_path(cfg, image_id, bsnr)
    if not path.exists():
        raise MissingSideDataError(
            f"gauss loss needs the noise level, but sidecar {path} is missing"
        )
    meta = json.loads(path.read_text(encoding="ascii"))
    if "sigma" not in meta:
        raise MissingSideDataError(f"sidecar {path} does not record sigma")
    return float(meta["sigma"])


def _load_truth(cfg: ExperimentConfig, image_id: str, required_by: str | None = None):
    path = _truth_path(cfg, image_id)
    if not path.exists():
        if required_by:
            raise MissingSideDataError(
                f"{required_by} needs the ground truth, but {path} is missing"
            )
        return None
    return read_raw(path)


def _make_loss(cfg: ExperimentConfig, loss_name: str, image_id: str, bsnr: float):
    if loss_name == "mse":
        return MseLoss(_load_truth(cfg, image_id, required_by="mse loss"))
    if loss_name == "gauss":
        return GaussLoss(_load_sigma(cfg, image_id, bsnr))
    if loss_name == "white":
        return WhiteLoss()
    raise ConfigError(f"unknown loss {loss_name!r}")


def cmd_learn(cfg: ExperimentConfig, image_id: str, bsnr: float, loss_name: str) -> ExperimentRecord:
    """Run the bilevel solver for one (image, BSNR, loss) triple.

    Writes the record JSON, the outer-iteration trace as JSON lines, and the
    reconstruction.  The whiteness loss touches neither the ground truth nor
    the sidecar; quality metrics are simply omitted when the truth is absent.
    """
    y = _load_observation(cfg, image_id, bsnr)
    kind = _make_loss(cfg, loss_name, image_id, bsnr)
    op = ConvOperator(build_kernel(cfg.kernel), y.shape)

    start = time.perf_counter()
    result = learn_lambda(y, op, kind, cfg.huber_eps, cfg.agd, cfg.bilevel)
    wall = time.perf_counter() - start

    truth = _load_truth(cfg, image_id)
    rec_psnr = None if truth is None else psnr(result.minimizer, truth)
    rec_ssim = None if truth is None else ssim(result.minimizer, truth)
    q_final = loss_value(loss_residual(kind, result.minimizer, op, y))
    record = ExperimentRecord(
        image=image_id,
        loss=loss_name,
        bsnr=bsnr,
        lambda_hat=result.lambda_hat,
        psnr=rec_psnr,
        ssim=rec_ssim,
        q_value=q_final,
        outer_iterations=len(result.trace),
        converged=result.converged,
        wall_time_s=wall,
    )
    _write_run_outputs(cfg, image_id, bsnr, loss_name, result, record)
    return record


def _write_run_outputs(cfg: ExperimentConfig, image_id: str, bsnr: float, loss_name: str,
                       result: BilevelResult, record: ExperimentRecord) -> None:
    dirs = _out_dirs(cfg)
    stem = f"{_stem(image_id, bsnr)}_{loss_name}"
    chash = cfg.config_hash()
    payload = {
        "image": record.image,
        "loss": record.loss,
        "bsnr": record.bsnr,
        "lambda_hat": record.lambda_hat,
        "psnr": record.psnr,
        "ssim": record.ssim,
        "q_value": record.q_value,
        "outer_iterations": record.outer_iterations,
        "converged": record.converged,
        "config_hash": chash,
        "base_seed": cfg.seed,
        "wall_time_s": record.wall_time_s,
    }
    (dirs["runs"] / f"{stem}.json").write_text(
        json.dumps(payload, sort_keys=True) + "\n", encoding="ascii"
    )
    with open(dirs["runs"] / f"{stem}.trace.jsonl", "w", encoding="ascii") as f:
        for rec in result.trace:
            f.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    write_raw(dirs["runs"] / f"{stem}.recon.f64", result.minimizer)


def cmd_grid(cfg: ExperimentConfig, image_id: str, bsnr: float):
    """Brute-force sweep over a log-spaced grid of regularization weights.

    Solves the inner problem at every grid point (warm starting downwards
    from the largest weight) and tabulates every quality loss plus PSNR and
    SSIM.  Returns (rows, argmin_interior_flag); the flag is False when the
    MSE-loss argmin sits on the grid boundary, meaning the grid is too
    narrow to bracket the optimum.
    """
    y = _load_observation(cfg, image_id, bsnr)
    truth = _load_truth(cfg, image_id, required_by="grid sweep")
    sigma = _load_sigma(cfg, image_id, bsnr)
    op = ConvOperator(build_kernel(cfg.kernel), y.shape)
    lambdas = np.logspace(
        math.log10(cfg.grid.lambda_min), math.log10(cfg.grid.lambda_max), cfg.grid.count
    )
    mse_kind = MseLoss(truth)
    gauss_kind = GaussLoss(sigma)
    white_kind = WhiteLoss()

    rows = []
    x = y.copy()
    for lam in lambdas[::-1]:
        problem = TVProblem(op, y, float(lam), cfg.huber_eps)
        solved = nesterov_agd(problem, x, cfg.agd)
        x = solved.minimizer
        rows.append({
            "lambda": float(lam),
            "q_mse": loss_value(loss_residual(mse_kind, x, op, y)),
            "q_gauss": loss_value(loss_residual(gauss_kind, x, op, y)),
            "q_white": loss_value(loss_residual(white_kind, x, op, y)),
            "psnr": psnr(x, truth),
            "ssim": ssim(x, truth),
        })
    rows.reverse()

    argmin = min(range(len(rows)), key=lambda i: rows[i]["q_mse"])
    interior = 0 < argmin < len(rows) - 1
    if not interior:
        logger.error(
            "grid argmin of the mse loss sits on the boundary (index %d); widen the grid",
            argmin,
        )

    dirs = _out_dirs(cfg)
    path = dirs["grid"] / f"{_stem(image_id, bsnr)}.csv"
    with open(path, "w", newline="", encoding="ascii") as f:
        f.write(f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n")
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    return rows, interior


def _batch_jobs(cfg: ExperimentConfig):
    return [
        (image_id, level, loss_name)
        for image_id in image_ids(cfg)
        for level in cfg.bsnr
        for loss_name in cfg.losses
    ]


def cmd_batch(cfg: ExperimentConfig):
    """Run every (image, BSNR, loss) learning job and aggregate the results.

    Writes ``records.csv`` (deterministic), ``summary.csv`` with per
    (BSNR, loss) means and standard deviations, and ``timings.csv`` (wall
    clock, excluded from determinism).  Per-job failures are logged and
    excluded; the returned flag is False when any job failed.
    """
    jobs = _batch_jobs(cfg)
    workers = max(1, int(os.environ.get("WHITEBILEVEL_THREADS", "1")))
    records: dict[tuple, ExperimentRecord] = {}
    failures = []

    if workers == 1:
        outcomes = (_safe_run(cfg, job) for job in jobs)
    else:
        pool = ThreadPoolExecutor(max_workers=workers)
        outcomes = pool.map(lambda j: _safe_run(cfg, j), jobs)
    for job, outcome in zip(jobs, outcomes):
        if isinstance(outcome, ExperimentRecord):
            records[job] = outcome
        else:
            failures.append(job)
    if workers > 1:
        pool.shutdown()

    ordered = [records[j] for j in sorted(records.keys()) if j in records]
    _write_records(cfg, ordered)
    _write_summary(cfg, ordered)
    _write_timings(cfg, ordered)
    if failures:
        logger.error("%d of %d batch jobs failed", len(failures), len(jobs))
    return ordered, not failures


def _safe_run(cfg: ExperimentConfig, job):
    try:
        return cmd_learn(cfg, *job)
    except Exception as exc:
        logger.exception("batch job %r failed", job)
        return exc


def _write_records(cfg: ExperimentConfig, records) -> None:
    path = Path(cfg.out_dir) / "records.csv"
    with open(path, "w", newline="", encoding="ascii") as f:
        f.write(f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n")
        writer = csv.DictWriter(f, fieldnames=list(RECORD_FIELDS))
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.csv_row())


def _write_timings(cfg: ExperimentConfig, records) -> None:
    path = Path(cfg.out_dir) / "timings.csv"
    with open(path, "w", newline="", encoding="ascii") as f:
        writer = csv.writer(f)
        writer.writerow(["image", "loss", "bsnr", "wall_time_s"])
        for rec in records:
            writer.writerow([rec.image, rec.loss, f"{rec.bsnr:g}", f"{rec.wall_time_s:.3f}"])


def _aggregate(records):
    groups: dict[tuple, list] = {}
    for rec in records:
        groups.setdefault((rec.bsnr, rec.loss), []).append(rec)
    rows = []
    for (bsnr_level, loss_name), recs in sorted(groups.items()):
        psnrs = [r.psnr for r in recs if r.psnr is not None]
        ssims = [r.ssim for r in recs if r.ssim is not None]
        rows.append({
            "bsnr": bsnr_level,
            "loss": loss_name,
            "count": len(recs),
            "psnr_mean": float(np.mean(psnrs)) if psnrs else float("nan"),
            "psnr_std": float(np.std(psnrs)) if psnrs else float("nan"),
            "ssim_mean": float(np.mean(ssims)) if ssims else float("nan"),
            "ssim_std": float(np.std(ssims)) if ssims else float("nan"),
        })
    return rows


def _write_summary(cfg: ExperimentConfig, records) -> None:
    rows = _aggregate(records)
    path = Path(cfg.out_dir) / "summary.csv"
    with open(path, "w", newline="", encoding="ascii") as f:
        f.write(f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n")
        writer = csv.writer(f)
        writer.writerow(["bsnr", "loss", "count", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"])
        for row in rows:
            writer.writerow([
                f"{row['bsnr']:g}", row["loss"], row["count"],
                _fmt(row["psnr_mean"]), _fmt(row["psnr_std"]),
                _fmt(row["ssim_mean"]), _fmt(row["ssim_std"]),
            ])


def read_records_csv(path) -> list[dict]:
    """Read a records CSV written by :func:`cmd_batch` (comments skipped)."""
    out = []
    with open(path, "r", encoding="ascii") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    for row in reader:
        out.append({
            "image": row["image"],
            "loss": row["loss"],
            "bsnr": float(row["bsnr"]),
            "lambda_hat": float(row["lambda_hat"]),
            "psnr": float(row["psnr"]) if row["psnr"] else None,
            "ssim": float(row["ssim"]) if row["ssim"] else None,
            "q_value": float(row["q_value"]),
            "outer_iterations": int(row["outer_iterations"]),
            "converged": bool(int(row["converged"])),
        })
    return out


def percentage_gap(value: float, best: float) -> float:
    """Gap to the row maximum in percent: 100*(best - value)/best."""
    return 100.0 * (best - value) / best


def _plotdata_rows(records) -> list[dict]:
    recs = [ExperimentRecord(
        image=r["image"], loss=r["loss"], bsnr=r["bsnr"], lambda_hat=r["lambda_hat"],
        psnr=r["psnr"], ssim=r["ssim"], q_value=r["q_value"],
        outer_iterations=r["outer_iterations"], converged=r["converged"], wall_time_s=0.0,
    ) for r in records]
    return _aggregate(recs)


def cmd_report(cfg: ExperimentConfig) -> dict[str, Path]:
    """Build plots and tables from an existing ``records.csv``.

    Emits the plot-data CSV, SVG curves of mean PSNR/SSIM versus BSNR with a
    mean +/- 1 std dispersion band per loss, and a per-image table for each
    BSNR level with percentage gaps to the per-row maximum.  The SVGs are a
    pure function of the plot-data CSV, so re-running the report reproduces
    them byte for byte.
    """
    records_path = Path(cfg.out_dir) / "records.csv"
    if not records_path.exists():
        raise MissingSideDataError(f"no records at {records_path}; run batch first")
    records = read_records_csv(records_path)
    if not records:
        raise ConfigError(f"records file {records_path} is empty")
    dirs = _out_dirs(cfg)

    plotdata = dirs["report"] / "plotdata.csv"
    with open(plotdata, "w", newline="", encoding="ascii") as f:
        f.write(f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n")
        writer = csv.writer(f)
        writer.writerow(["bsnr", "loss", "count", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"])
        for row in _plotdata_rows(records):
            writer.writerow([
                f"{row['bsnr']:g}", row["loss"], row["count"],
                _fmt(row["psnr_mean"]), _fmt(row["psnr_std"]),
                _fmt(row["ssim_mean"]), _fmt(row["ssim_std"]),
            ])

    outputs = {"plotdata": plotdata}
    outputs.update(render_plots(plotdata, dirs["report"]))
    outputs.update(_write_tables(records, dirs["report"]))
    return outputs


def render_plots(plotdata_path, out_dir) -> dict[str, Path]:
    """Render the PSNR and SSIM curves from a plot-data CSV (deterministic)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "whitebilevel"

    with open(plotdata_path, "r", encoding="ascii") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    losses = sorted({r["loss"] for r in rows})
    out_dir = Path(out_dir)
    outputs = {}
    labels = {"mse": "mse (supervised)", "gauss": "gauss (semi-supervised)",
              "white": "white (unsupervised)"}
    for metric in ("psnr", "ssim"):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for loss_name in losses:
            pts = sorted(
                (float(r["bsnr"]), float(r[f"{metric}_mean"]), float(r[f"{metric}_std"]))
                for r in rows if r["loss"] == loss_name
            )
            xs = [p[0] for p in pts]
            means = np.array([p[1] for p in pts])
            stds = np.array([p[2] for p in pts])
            ax.plot(xs, means, marker="o", label=labels.get(loss_name, loss_name))
            ax.fill_between(xs, means - stds, means + stds, alpha=0.2)
        ax.set_xlabel("BSNR (dB)")
        ax.set_ylabel("PSNR (dB)" if metric == "psnr" else "SSIM")
        ax.set_title(f"mean {metric.upper()} vs BSNR (band: mean +/- 1 std)")
        ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"{metric}_vs_bsnr.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        outputs[f"{metric}_plot"] = path
    return outputs


def _write_tables(records, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    outputs = {}
    by_bsnr: dict[float, list] = {}
    for rec in records:
        by_bsnr.setdefault(rec["bsnr"], []).append(rec)
    for bsnr_level, recs in sorted(by_bsnr.items()):
        losses = sorted({r["loss"] for r in recs})
        images = sorted({r["image"] for r in recs})
        lookup = {(r["image"], r["loss"]): r for r in recs}
        csv_path = out_dir / f"table_bsnr{bsnr_level:g}.csv"
        txt_path = out_dir / f"table_bsnr{bsnr_level:g}.txt"
        header = ["image"]
        for loss_name in losses:
            header += [f"psnr_{loss_name}", f"psnr_{loss_name}_gap_pct",
                       f"ssim_{loss_name}", f"ssim_{loss_name}_gap_pct"]
        csv_rows = []
        txt_lines = [f"BSNR = {bsnr_level:g} (gap in % of the per-row maximum, * marks the maximum)"]
        for image_id in images:
            cells = {"image": image_id}
            txt = [image_id.ljust(12)]
            for metric in ("psnr", "ssim"):
                vals = {ln: lookup[(image_id, ln)][metric] for ln in losses
                        if (image_id, ln) in lookup and lookup[(image_id, ln)][metric] is not None}
                best = max(vals.values()) if vals else None
                for loss_name in losses:
                    v = vals.get(loss_name)
                    if v is None or best is None:
                        cells[f"{metric}_{loss_name}"] = ""
                        cells[f"{metric}_{loss_name}_gap_pct"] = ""
                        txt.append(f"{metric}/{loss_name}: n/a".ljust(24))
                        continue
                    gap = percentage_gap(v, best)
                    cells[f"{metric}_{loss_name}"] = _fmt(v)
                    cells[f"{metric}_{loss_name}_gap_pct"] = f"{gap:.1f}"
                    star = "*" if v == best else ""
                    txt.append(f"{metric}/{loss_name}: {v:.2f}{star} ({gap:.1f}%)".ljust(28))
            csv_rows.append(cells)
            txt_lines.append("  ".join(txt))
        with open(csv_path, "w", newline="", encoding="ascii") as f:
            writer = csv.DictWriter(f, fieldnames=header)
            writer.writeheader()
            for row in csv_rows:
                writer.writerow(row)
        txt_path.write_text("\n".join(txt_lines) + "\n", encoding="ascii")
        outputs[f"table_bsnr{bsnr_level:g}_csv"] = csv_path
        outputs[f"table_bsnr{bsnr_level:g}_txt"] = txt_path
    return outputs
