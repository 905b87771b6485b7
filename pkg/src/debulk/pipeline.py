"""Scan to verdict: configuration, per-pocket processing, batch runs and
comparison against a post-debulk scan."""

from __future__ import annotations

import json
import logging
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .energy import MaterialParams
from .meshing import MeshConfig, mesh_patch
from .optimizer import SolverConfig, solve
from .postprocess import RMS_THRESHOLD, DebulkReport, classify, postprocess, raw_field, rasterize
from .scanprep import HeightMap, OrganizedPointCloud, build_heightmap, denoise, median_filter
from .segmentation import AirPocketPatch, SegmentationSettings, segment
from .surface import GridSurface

logger = logging.getLogger(__name__)

WORKERS_ENV = "DEBULK_WORKERS"

EXIT_CEASE = 0
EXIT_CREASE = 1
EXIT_INCONCLUSIVE = 3


@dataclass(frozen=True)
class ScanPrepConfig:
    denoise: bool = True
    denoise_k: int = 4
    median: bool = True
    median_window: int = 5
    grid_spacing: float = 1.0  # mm

    def __post_init__(self):
        if self.denoise_k < 1:
            raise ValueError("denoise_k must be >= 1")
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ValueError("median_window must be a positive odd number")
        if not self.grid_spacing > 0:
            raise ValueError("grid_spacing must be positive")


@dataclass(frozen=True)
class IOConfig:
    output_dir: Optional[str] = None
    save_heightfields: bool = True
    save_nets: bool = False
    solver_logs: bool = False


_SECTIONS = {
    "segmentation": SegmentationSettings,
    "mesh": MeshConfig,
    "material": MaterialParams,
    "solver": SolverConfig,
    "scan": ScanPrepConfig,
    "io": IOConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    segmentation: SegmentationSettings = field(default_factory=SegmentationSettings)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    material: MaterialParams = field(default_factory=MaterialParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    scan: ScanPrepConfig = field(default_factory=ScanPrepConfig)
    io: IOConfig = field(default_factory=IOConfig)
    threshold: float = RMS_THRESHOLD  # mm
    margin: Optional[float] = None  # mm, default scales with pocket area
    workers: int = 1

    def __post_init__(self):
        t_c = self.material.consolidated_thickness * 1e3
        if self.threshold < t_c - 1e-12:
            raise ValueError(f"threshold {self.threshold} mm is below the consolidated thickness {t_c:.4g} mm")
        if not np.isclose(self.mesh.ply_thickness, self.material.t * 1e3):
            raise ValueError("mesh.ply_thickness must equal material.t in mm")
        if self.margin is not None and not self.margin > 0:
            raise ValueError("margin must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        d["mesh"]["fiber_angles"] = list(self.mesh.fiber_angles)
        d.update(threshold=self.threshold, margin=self.margin, workers=self.workers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        """Build from nested sections; missing keys keep their defaults and
        unknown keys are an error. ``mesh.ply_thickness`` follows
        ``material.t`` unless given explicitly."""
        return cls().updated(d)

    def updated(self, d: dict) -> "PipelineConfig":
        """Copy with nested overrides applied."""
        d_in = d
        d = dict(d)
        parts = {}
        for name, typ in _SECTIONS.items():
            sub = d.pop(name, None) or {}
            known = {f.name for f in fields(typ)}
            bad = set(sub) - known
            if bad:
                raise ValueError(f"unknown {name} keys: {sorted(bad)}")
            if name == "mesh" and "fiber_angles" in sub:
                sub = dict(sub, fiber_angles=tuple(sub["fiber_angles"]))
            parts[name] = replace(getattr(self, name), **sub)
        mesh_given = "ply_thickness" in (d_in.get("mesh") or {})
        if not mesh_given and parts["material"].t != self.material.t:
            parts["mesh"] = replace(parts["mesh"], ply_thickness=parts["material"].t * 1e3)
        top = {f.name for f in fields(type(self))} - set(_SECTIONS)
        bad = set(d) - top
        if bad:
            raise ValueError(f"unknown config keys: {sorted(bad)}")
        return replace(self, **parts, **d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def resolve_workers(config_value: int, flag: Optional[int] = None) -> int:
    """Worker count: command-line flag, then the environment, then the
    config value."""
    if flag is not None:
        n = int(flag)
    elif os.environ.get(WORKERS_ENV):
        try:
            n = int(os.environ[WORKERS_ENV])
        except ValueError:
            raise ValueError(f"{WORKERS_ENV} must be an integer") from None
    else:
        n = int(config_value)
    if n < 1:
        raise ValueError("worker count must be >= 1")
    return n


def prepare_heightmap(cloud: OrganizedPointCloud, ref: GridSurface, cfg: ScanPrepConfig = ScanPrepConfig()) -> HeightMap:
    if cfg.denoise:
        cloud = denoise(cloud, cfg.denoise_k)
    if cfg.median:
        cloud = median_filter(cloud, cfg.median_window)
    return build_heightmap(cloud, ref, cfg.grid_spacing)


def segment_heightmap(hm: HeightMap, ref: GridSurface, config: PipelineConfig) -> list[AirPocketPatch]:
    return segment(
        hm,
        ref,
        config.segmentation,
        margin=config.margin,
        ply_boundary_tol=config.mesh.ply_boundary_tol,
        target_nodes=config.mesh.target_node_count,
        contact_tol=config.mesh.mold_contact_tol,
    )


@dataclass
class SummaryRow:
    pocket_id: int
    delta: float  # mm
    n_nodes: int
    rms: float  # mm
    verdict: str
    time: float  # s, mesh + solve + post-process
    nfev: int
    low_confidence: bool = False


def _failed_report(patch: AirPocketPatch, stage: str, exc: Exception, timings: dict) -> DebulkReport:
    diag = {"failed_stage": stage, "error": f"{type(exc).__name__}: {exc}", **timings}
    return DebulkReport(patch.id, float("nan"), "inconclusive", float("nan"), float("nan"), None, diag)


def process_pocket(patch: AirPocketPatch, hm: HeightMap, config: PipelineConfig) -> DebulkReport:
    """Mesh, solve, post-process and classify one pocket. Any stage error
    gives an inconclusive report instead of raising."""
    timings: dict = {}
    t0 = time.perf_counter()
    stage = "mesh"
    try:
        net = mesh_patch(patch, config.mesh)
        timings["mesh_time_s"] = time.perf_counter() - t0
        stage = "solve"
        t1 = time.perf_counter()
        log_path = None
        if config.io.solver_logs and config.io.output_dir:
            log_path = Path(config.io.output_dir) / f"pocket_{patch.id:02d}_solver.log"
        res = solve(net, config.material, patch.ref_surface, config.solver, log_path=log_path)
        timings["solve_time_s"] = time.perf_counter() - t1
        stage = "postprocess"
        t2 = time.perf_counter()
        rf = postprocess(net, res.nodes, patch.ref_surface, config.material)
        hf = rasterize(rf, hm, patch.pixels)
        timings["postprocess_time_s"] = time.perf_counter() - t2
        timings["total_time_s"] = time.perf_counter() - t0
        diag = {
            "delta_mm": net.delta,
            "n_nodes": net.n_nodes,
            "function_evaluations": res.function_evaluations,
            "iterations": res.iterations,
            "converged": res.converged,
            "max_equality_residual_m": res.max_equality_residual,
            "max_penetration_m": res.max_penetration,
            "stationarity": res.stationarity,
            "pi_initial_J": res.pi_initial,
            "pi_final_J": res.pi_final,
            "ridges": len(rf.ridges),
            "pocket_area_cm2": patch.area,
            "pocket_peak_mm": patch.peak,
            "low_confidence": bool(patch.meta.get("low_confidence", False)),
            **timings,
        }
        if config.io.save_nets and config.io.output_dir:
            net.with_nodes(res.nodes).save(Path(config.io.output_dir) / f"pocket_{patch.id:02d}_net.json")
        raw_max = raw_field(res.nodes, patch.ref_surface).max_height
        return classify(hf, config.threshold, res.converged, patch.id, raw_max, diag)
    except Exception as exc:  # a bad pocket must not stop the batch
        timings["total_time_s"] = time.perf_counter() - t0
        logger.warning("pocket %d failed in %s: %s", patch.id, stage, exc)
        return _failed_report(patch, stage, exc, timings)


def _worker(args):
    return process_pocket(*args)


@dataclass
class RunResult:
    reports: list
    heightmap: Optional[HeightMap] = None
    patches: list = field(default_factory=list)

    @property
    def rows(self) -> list[SummaryRow]:
        out = []
        for r in self.reports:
            d = r.diagnostics
            out.append(
                SummaryRow(
                    r.pocket_id,
                    float(d.get("delta_mm", float("nan"))),
                    int(d.get("n_nodes", 0)),
                    r.rms,
                    r.verdict,
                    float(d.get("total_time_s", float("nan"))),
                    int(d.get("function_evaluations", 0)),
                    bool(d.get("low_confidence", False)),
                )
            )
        return out

    @property
    def status(self) -> int:
        verdicts = {r.verdict for r in self.reports}
        if "inconclusive" in verdicts:
            return EXIT_INCONCLUSIVE
        if "crease" in verdicts:
            return EXIT_CREASE
        return EXIT_CEASE

    @property
    def status_text(self) -> str:
        return {EXIT_CEASE: "all cease", EXIT_CREASE: "crease present", EXIT_INCONCLUSIVE: "inconclusive present"}[self.status]

    def table(self) -> str:
        head = f"{'id':>3} {'delta_mm':>9} {'nodes':>6} {'rms_mm':>7} {'verdict':>12} {'time_s':>7} {'nfev':>6}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.pocket_id:>3} {r.delta:>9.2f} {r.n_nodes:>6d} {r.rms:>7.3f} {r.verdict:>12} {r.time:>7.2f} {r.nfev:>6d}" + ("  low confidence" if r.low_confidence else ""))
        times = [r.time for r in self.rows if np.isfinite(r.time)]
        if times:
            lines.append(f"mean time {np.mean(times):.2f} s over {len(times)} pockets; status: {self.status_text}")
        else:
            lines.append(f"no pockets; status: {self.status_text}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "status": self.status_text,
            "exit_code": self.status,
            "summary": [asdict(r) for r in self.rows],
            "reports": [r.to_dict() for r in self.reports],
        }

    def save(self, out_dir, heightfields: bool = True) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(_jsonable(self.to_dict()), indent=1))
        (out / "summary.txt").write_text(self.table() + "\n")
        for r in self.reports:
            d = r.to_dict(include_field=heightfields)
            (out / f"pocket_{r.pocket_id:02d}_report.json").write_text(json.dumps(_jsonable(d)))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def run_patches(patches: list, hm: HeightMap, config: PipelineConfig, workers: Optional[int] = None) -> RunResult:
    n = resolve_workers(config.workers, workers)
    if config.io.output_dir:
        Path(config.io.output_dir).mkdir(parents=True, exist_ok=True)
    jobs = [(p, hm, config) for p in patches]
    if n == 1 or len(jobs) <= 1:
        reports = [process_pocket(*j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(n, len(jobs))) as pool:
            reports = list(pool.map(_worker, jobs))
    reports.sort(key=lambda r: r.pocket_id)
    result = RunResult(reports, hm, list(patches))
    if config.io.output_dir:
        result.save(config.io.output_dir, config.io.save_heightfields)
    return result


def run(ply_scan: Union[OrganizedPointCloud, HeightMap], reference: GridSurface, config: PipelineConfig = PipelineConfig(), workers: Optional[int] = None) -> RunResult:
    """Full pipeline for one scan. ``ply_scan`` is a raw cloud (cleaned and
    gridded per ``config.scan``) or an already built heightmap."""
    hm = ply_scan if isinstance(ply_scan, HeightMap) else prepare_heightmap(ply_scan, reference, config.scan)
    patches = segment_heightmap(hm, reference, config)
    logger.info("%d pockets segmented", len(patches))
    return run_patches(patches, hm, config, workers)


@dataclass
class CompareRow:
    pocket_id: int
    predicted_rms: float
    experimental_rms: float
    predicted_verdict: str
    experimental_verdict: str

    @property
    def agree(self) -> bool:
        return self.predicted_verdict == self.experimental_verdict


@dataclass
class CompareResult:
    rows: list
    skipped: list

    @property
    def agreement(self) -> int:
        return sum(r.agree for r in self.rows)

    def table(self) -> str:
        head = f"{'id':>3} {'pred_rms':>9} {'exp_rms':>8} {'pred':>12} {'exp':>12} agree"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.pocket_id:>3} {r.predicted_rms:>9.3f} {r.experimental_rms:>8.3f} {r.predicted_verdict:>12} {r.experimental_verdict:>12} {'yes' if r.agree else 'no'}")
        lines.append(f"agreement {self.agreement}/{len(self.rows)}" + (f"; skipped {self.skipped}" if self.skipped else ""))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return _jsonable({"rows": [dict(asdict(r), agree=r.agree) for r in self.rows], "agreement": self.agreement, "skipped": self.skipped})


def merged_prediction(reports: list) -> HeightMap:
    """Paste the predicted heightfields of all reports into one heightmap
    (they must share a grid)."""
    fields_ = [r.heightfield for r in reports if r.heightfield is not None]
    if not fields_:
        raise ValueError("no report carries a heightfield")
    base = fields_[0]
    values = np.full(base.shape, np.nan)
    mask = np.zeros(base.shape, dtype=bool)
    for hf in fields_:
        if hf.shape != base.shape or not np.allclose(hf.origin, base.origin) or not np.allclose(hf.spacing, base.spacing):
            raise ValueError("report heightfields are on different grids")
        values[hf.mask] = hf.values[hf.mask]
        mask |= hf.mask
    return HeightMap(base.origin, base.spacing, values, mask)


def compare(
    reports: list,
    debulked: Union[OrganizedPointCloud, HeightMap],
    reference: Optional[GridSurface] = None,
    threshold: float = RMS_THRESHOLD,
    scan: ScanPrepConfig = ScanPrepConfig(denoise=False, median=False),
) -> CompareResult:
    """Experimental RMS inside each pocket contour of a post-debulk scan
    and the verdict agreement with the predictions.

    ``debulked`` is a cloud (needs ``reference``) or a heightmap of
    ply-minus-mold heights. The contour of a report is the mask of its
    heightfield; pockets whose contour leaves the debulked scan are skipped
    with a warning.
    """
    if isinstance(debulked, HeightMap):
        hd = debulked
    else:
        if reference is None:
            raise ValueError("a reference surface is needed to grid a debulked cloud")
        hd = prepare_heightmap(debulked, reference, scan)
    grid = np.where(hd.mask, hd.values, np.nan)
    interp = RegularGridInterpolator((hd.ys, hd.xs), grid, bounds_error=False, fill_value=np.nan)
    nearest = RegularGridInterpolator((hd.ys, hd.xs), grid, method="nearest", bounds_error=False, fill_value=np.nan)
    rows, skipped = [], []
    for r in reports:
        if r.heightfield is None or not r.heightfield.mask.any():
            skipped.append(r.pocket_id)
            warnings.warn(f"pocket {r.pocket_id}: no predicted heightfield, skipped", RuntimeWarning)
            continue
        hf = r.heightfield
        rr, cc = np.nonzero(hf.mask)
        x = hf.origin[0] + hf.spacing[0] * cc
        y = hf.origin[1] + hf.spacing[1] * rr
        q = np.column_stack([y, x])
        z = interp(q)
        # cells next to masked ones: fall back to the nearest scanned cell
        gap = ~np.isfinite(z)
        if gap.any():
            z[gap] = nearest(q[gap])
        if not np.all(np.isfinite(z)):
            skipped.append(r.pocket_id)
            warnings.warn(f"pocket {r.pocket_id}: contour outside the debulked scan, skipped", RuntimeWarning)
            continue
        e = float(np.sqrt(np.mean(z * z)))
        rows.append(CompareRow(r.pocket_id, r.rms, e, r.verdict, "cease" if e <= threshold else "crease"))
    return CompareResult(rows, skipped)
