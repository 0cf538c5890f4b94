"""End-to-end restoration and the simulate / evaluate / bench entry points."""
import logging
import time
from pathlib import Path
from typing import NamedTuple

import numpy as np
from rich.progress import track

from .config import PipelineConfig, TurbulenceConfig, load_config
from .deconv import DeconvolutionResult, blind_deconvolve, nonblind_deconvolve
from .exceptions import UsageError
from .file_management import (
    RunLog,
    create_output_dir,
    load_frames,
    read_image,
    write_edges,
    write_field,
    write_frames,
    write_image,
    write_index_map,
    write_manifest,
)
from .fusion import fuse
from .metrics import psnr, sharpness, ssim, temporal_mean
from .nltv import graph_from_config
from .rpca import reference_from_lowrank, rpca_decompose, stack_frames
from .simulate import degrade, disc_psf
from .variational import SplitBregmanConfig, enhance_reference, random_problem, solve_fast, solve_split_bregman

logger = logging.getLogger(__name__)


class RestoreResult(NamedTuple):
    out_dir: Path
    reference: np.ndarray
    enhanced: np.ndarray
    fused: np.ndarray
    restored: np.ndarray
    temporal_mean: np.ndarray


def low_rank_reference(frames: np.ndarray, cfg: PipelineConfig) -> tuple[np.ndarray, dict]:
    result = rpca_decompose(stack_frames(frames), tol=cfg.rpca_tol, max_iter=cfg.rpca_max_iter)
    reference = np.clip(reference_from_lowrank(result.low_rank, frames.shape[1:]), 0.0, 1.0)
    return reference, {
        "iterations": result.iterations,
        "primal_residual": result.primal_residual,
        "dual_residual": result.dual_residual,
        "converged": result.converged,
    }


def restore_frames(frames: np.ndarray, cfg: PipelineConfig = PipelineConfig(), out_dir: Path | str | None = None,
                   progress: bool = False, psf_radius: float | None = None,
                   debug_artifacts: bool = False) -> RestoreResult:
    """Run the four restoration stages on an in-memory (N, H, W) stack.

    Every stage writes its image (and a run-log record) before the next
    stage starts.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise UsageError(f"need a stack of at least 2 frames, got shape {frames.shape}")
    cfg = cfg.validate()
    out_dir = Path(out_dir) if out_dir is not None else create_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    log = RunLog(out_dir / "run_log.jsonl")
    logger.info(f"restoring {frames.shape[0]} frames of {frames.shape[2]}x{frames.shape[1]} into {out_dir}")

    baseline = temporal_mean(frames)
    write_image(out_dir / "temporal_mean.png", baseline)

    # Step 1: low-rank reference
    start = time.perf_counter()
    reference, rpca_info = low_rank_reference(frames, cfg)
    write_image(out_dir / "reference.png", reference)
    log.stage("rpca", time.perf_counter() - start, **rpca_info)

    # Step 2: variational enhancement with registration, out_loop times
    u0 = reference
    enhancement = None
    for outer in range(cfg.out_loop):
        start = time.perf_counter()
        enhancement = enhance_reference(
            frames, u0, cfg.variational(), cfg.registration(), cfg.graph(), progress=progress
        )
        log.stage(
            "enhance_reference",
            time.perf_counter() - start,
            out_loop=outer,
            data_residuals=enhancement.data_residuals,
            inversion_residual=float(np.mean(enhancement.inversion_residuals)),
        )
        if outer < cfg.out_loop - 1:
            start = time.perf_counter()
            u0, rpca_info = low_rank_reference(enhancement.registered, cfg)
            log.stage("rpca", time.perf_counter() - start, out_loop=outer + 1, **rpca_info)
    enhanced = np.clip(enhancement.reference, 0.0, 1.0)
    write_image(out_dir / "enhanced_reference.png", enhanced)
    if debug_artifacts:
        _write_debug_fields(out_dir, enhancement.pullback)
        write_edges(out_dir / "nltv_graph.bin", graph_from_config(enhanced, cfg.graph()))

    # Step 3: fusion
    start = time.perf_counter()
    fusion = fuse(enhancement.registered, enhancement.pullback, cfg.fusion(), progress=progress)
    fused = np.clip(fusion.fused, 0.0, 1.0)
    write_image(out_dir / "fused_Z.png", fused)
    if debug_artifacts:
        write_index_map(out_dir / "reference_index.png", fusion.reference_index)
    log.stage("fuse", time.perf_counter() - start, corrected_pixels=fusion.corrected_pixels)

    # Step 4: deconvolution
    start = time.perf_counter()
    if psf_radius is not None:
        restored = nonblind_deconvolve(fused, disc_psf(psf_radius), cfg.deconv())
        deconv_info = {"mode": "nonblind", "psf_radius": psf_radius}
    else:
        result: DeconvolutionResult = blind_deconvolve(fused, cfg.deconv())
        restored = result.latent
        deconv_info = {"mode": "blind", "energies": result.energies, "flagged": result.flagged}
    restored = np.clip(restored, 0.0, 1.0)
    write_image(out_dir / "restored_L.png", restored)
    log.stage("deconvolve", time.perf_counter() - start, **deconv_info)

    return RestoreResult(out_dir, reference, enhanced, fused, restored, baseline)


def _write_debug_fields(out_dir: Path, fields) -> None:
    field_dir = out_dir / "fields"
    field_dir.mkdir(exist_ok=True)
    for i, field in enumerate(fields):
        write_field(field_dir / f"pullback_{i:04d}.bin", field)


def restore(input_dir: Path | str, config: PipelineConfig | Path | str | None = None,
            out_dir: Path | str | None = None, progress: bool = False, psf_radius: float | None = None,
            debug_artifacts: bool = False) -> RestoreResult:
    """Restore one sharp image from a directory of turbulent frames.

    Args:
        input_dir: Directory of PNG/PGM frames, read in lexicographic order.
        config: PipelineConfig, path to a TOML config, or None for defaults.
        out_dir: Output directory; a timestamped one is created when None.
        progress: Show progress bars.
        psf_radius: Known disc PSF radius; switches the last stage to non-blind deconvolution.
        debug_artifacts: Also write pull-back fields, the graph edge list and the k* map.

    Returns:
        RestoreResult with every intermediate image.
    """
    if not isinstance(config, PipelineConfig):
        config = load_config(config)
    frames = load_frames(input_dir)
    return restore_frames(frames, config, out_dir, progress, psf_radius, debug_artifacts)


def simulate(truth_path: Path | str, turbulence: TurbulenceConfig, out_dir: Path | str,
             preset: str = "custom", write_fields: bool = False, progress: bool = False) -> list[Path]:
    """Write a simulated frame sequence plus a manifest.toml describing it."""
    truth = read_image(truth_path)
    sequence = degrade(truth, turbulence, progress=progress)
    out_dir = Path(out_dir)
    paths = write_frames(out_dir / "frames", sequence.frames)
    write_image(out_dir / "truth.png", truth)
    if write_fields:
        field_dir = out_dir / "fields"
        field_dir.mkdir(parents=True, exist_ok=True)
        for i, field in enumerate(sequence.fields):
            write_field(field_dir / f"pullback_{i:04d}.bin", field)
    write_manifest(
        out_dir / "manifest.toml",
        {"preset": preset, "truth": str(Path(truth_path).name), "height": truth.shape[0],
         "width": truth.shape[1], **turbulence._asdict()},
    )
    logger.info(f"wrote {len(paths)} frames to {out_dir / 'frames'}")
    return paths


class EvaluationRow(NamedTuple):
    name: str
    psnr: float
    ssim: float

    def csv(self) -> str:
        return f"{self.name},{self.psnr:.4f},{self.ssim:.6f}"


def evaluate(images: list[Path | str], truth: Path | str) -> list[EvaluationRow]:
    """PSNR (8-bit scale, peak 255) and SSIM of each image against the truth."""
    reference = read_image(truth)
    rows = []
    for path in images:
        image = read_image(path)
        if image.shape != reference.shape:
            raise UsageError(f"{path} is {image.shape}, truth is {reference.shape}")
        rows.append(EvaluationRow(Path(path).name, psnr(image * 255.0, reference * 255.0, 255.0), ssim(image, reference)))
    return rows


class BenchReport(NamedTuple):
    size: int
    trials: int
    iterations: int
    fast_seconds: float
    split_bregman_seconds: float

    @property
    def ratio(self) -> float:
        return self.fast_seconds / self.split_bregman_seconds

    @property
    def reduction(self) -> float:
        return 100.0 * (1.0 - self.ratio)

    def lines(self) -> list[str]:
        return [
            "size,trials,iterations,fast_seconds,split_bregman_seconds,ratio,reduction_percent",
            f"{self.size},{self.trials},{self.iterations},{self.fast_seconds:.4f},"
            f"{self.split_bregman_seconds:.4f},{self.ratio:.4f},{self.reduction:.2f}",
        ]


def bench_solvers(size: int = 240, trials: int = 3, iterations: int = 50, seed: int = 0,
                  cfg: PipelineConfig = PipelineConfig(), progress: bool = False) -> BenchReport:
    """Mean wall time of the fast and split Bregman mixed-ROF solvers at a fixed iteration count."""
    rng = np.random.default_rng(seed)
    fast_total = 0.0
    bregman_total = 0.0
    trial_iter = range(trials)
    if progress:
        trial_iter = track(trial_iter, description="Benchmarking solvers")
    for _ in trial_iter:
        problem = random_problem(size, rng, cfg.variational(), cfg.graph())
        start = time.perf_counter()
        solve_fast(problem, iters=iterations, tol=0.0)
        fast_total += time.perf_counter() - start
        start = time.perf_counter()
        solve_split_bregman(problem, SplitBregmanConfig(iters=iterations, tol=0.0))
        bregman_total += time.perf_counter() - start
    return BenchReport(size, trials, iterations, fast_total / trials, bregman_total / trials)


def reference_sharpness(frames: np.ndarray, cfg: PipelineConfig = PipelineConfig()) -> tuple[float, float]:
    """Global sharpness of the low-rank reference and of the temporal mean."""
    reference, _ = low_rank_reference(np.asarray(frames, dtype=np.float64), cfg)
    return sharpness(reference, cfg.L), sharpness(temporal_mean(frames), cfg.L)
