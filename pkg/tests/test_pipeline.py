import contextlib
import json
from types import SimpleNamespace

import numpy as np
import pytest

from turbmend import cli, parallel
from turbmend.cli import main
from turbmend.config import PipelineConfig, turbulence_preset
from turbmend.exceptions import UsageError
from turbmend.file_management import load_frames, read_image, read_manifest, write_frames, write_image
from turbmend.metrics import psnr, ssim, temporal_mean
from turbmend.pipeline import (
    BenchReport,
    bench_solvers,
    evaluate,
    reference_sharpness,
    restore,
    restore_frames,
    simulate,
)
from turbmend.simulate import degrade

from .conftest import edge_image, smooth_image

QUICK = PipelineConfig(
    registration_levels=1,
    registration_max_iter=5,
    invert_iters=5,
    nltv_patch=3,
    nltv_window=5,
    nltv_k=4,
    middle_loop=1,
    inner_loop=2,
    rof_iters=5,
    L=5,
    deconv_alternations=1,
)


@pytest.fixture
def frames():
    truth = smooth_image(32, 32)
    return np.stack([truth, np.roll(truth, 1, axis=1), truth, np.roll(truth, -1, axis=0)])


def test_restore_writes_every_stage(tmp_path, frames):
    result = restore_frames(frames, QUICK, tmp_path / "out")
    for name in ("temporal_mean.png", "reference.png", "enhanced_reference.png", "fused_Z.png", "restored_L.png"):
        assert (result.out_dir / name).is_file()
    stages = [json.loads(line)["stage"] for line in (result.out_dir / "run_log.jsonl").read_text().splitlines()]
    assert stages == ["rpca", "enhance_reference", "fuse", "deconvolve"]
    assert result.restored.shape == (32, 32)
    assert 0.0 <= result.restored.min() and result.restored.max() <= 1.0


def test_out_loop_reruns_low_rank_step(tmp_path, frames):
    result = restore_frames(frames, QUICK._replace(out_loop=2), tmp_path / "out")
    stages = [json.loads(line)["stage"] for line in (result.out_dir / "run_log.jsonl").read_text().splitlines()]
    assert stages == ["rpca", "enhance_reference", "rpca", "enhance_reference", "fuse", "deconvolve"]


def test_restore_is_deterministic(tmp_path, frames):
    first = restore_frames(frames, QUICK, tmp_path / "a")
    second = restore_frames(frames, QUICK, tmp_path / "b")
    assert np.array_equal(first.restored, second.restored)


def test_known_psf_and_debug_artifacts(tmp_path, frames):
    result = restore_frames(frames, QUICK, tmp_path / "out", psf_radius=1.0, debug_artifacts=True)
    records = [json.loads(line) for line in (result.out_dir / "run_log.jsonl").read_text().splitlines()]
    assert records[-1]["mode"] == "nonblind"
    assert len(list((result.out_dir / "fields").glob("pullback_*.bin"))) == 4
    assert (result.out_dir / "nltv_graph.bin").is_file()
    assert (result.out_dir / "reference_index.png").is_file()


def test_restore_reads_frame_directory(tmp_path, frames):
    write_frames(tmp_path / "frames", frames)
    config = tmp_path / "quick.toml"
    config.write_text("\n".join(f"{k} = {v}" for k, v in QUICK._asdict().items()
                                if k in ("registration_levels", "middle_loop", "inner_loop", "nltv_window", "L")))
    result = restore(tmp_path / "frames", config, tmp_path / "out")
    assert result.fused.shape == (32, 32)


def test_simulate_writes_sequence_and_manifest(tmp_path):
    write_image(tmp_path / "truth.png", smooth_image(48, 48))
    paths = simulate(tmp_path / "truth.png", turbulence_preset("weak", n_frames=3, d_g=16), tmp_path / "sim",
                     preset="weak", write_fields=True)
    assert len(paths) == 3
    manifest = read_manifest(tmp_path / "sim" / "manifest.toml")
    assert manifest["preset"] == "weak"
    assert manifest["n_frames"] == 3
    assert manifest["height"] == manifest["width"] == 48
    assert len(list((tmp_path / "sim" / "fields").iterdir())) == 3
    assert load_frames(tmp_path / "sim" / "frames").shape == (3, 48, 48)


def test_evaluate_rows(tmp_path):
    truth = np.full((16, 16), 100 / 255)
    write_image(tmp_path / "truth.png", truth)
    write_image(tmp_path / "same.png", truth)
    write_image(tmp_path / "off.png", truth + 10 / 255)
    rows = evaluate([tmp_path / "same.png", tmp_path / "off.png"], tmp_path / "truth.png")
    assert rows[0].psnr == float("inf")
    assert rows[0].ssim == pytest.approx(1.0)
    assert rows[1].psnr == pytest.approx(28.13, abs=0.01)
    assert rows[1].csv().startswith("off.png,28.13")


def test_bench_report_lines():
    report = bench_solvers(size=16, trials=1, iterations=3)
    header, row = report.lines()
    assert header.split(",")[0] == "size"
    assert row.startswith("16,1,3,")
    assert BenchReport(240, 1, 50, 0.7, 1.0).reduction == pytest.approx(30.0)


def test_reference_sharpness(frames):
    reference, mean = reference_sharpness(frames, QUICK)
    assert reference > 0 and mean > 0


def test_zero_turbulence_round_trip_keeps_truth(tmp_path):
    write_image(tmp_path / "truth.png", edge_image(64) * 0.5 + smooth_image(64, 64) * 0.5)
    simulate(tmp_path / "truth.png", turbulence_preset("identity", n_frames=4), tmp_path / "sim", preset="identity")
    result = restore(tmp_path / "sim" / "frames", PipelineConfig(), tmp_path / "out")
    truth = read_image(tmp_path / "sim" / "truth.png")
    assert ssim(result.restored, truth) > 0.99


@pytest.mark.slow
def test_strong_preset_reference_is_sharper_than_mean():
    truth = edge_image(256) * 0.6 + smooth_image(256, 256) * 0.4
    sequence = degrade(truth, turbulence_preset("strong", n_frames=40))
    reference, mean = reference_sharpness(sequence.frames, PipelineConfig())
    assert reference >= mean


def test_cli_evaluate(tmp_path, capsys):
    write_image(tmp_path / "truth.png", edge_image(16))
    write_image(tmp_path / "copy.png", edge_image(16))
    assert main(["evaluate", str(tmp_path / "copy.png"), str(tmp_path / "truth.png")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "name,psnr,ssim"
    assert lines[1].startswith("copy.png,inf,1.0")


def test_cli_simulate_identity(tmp_path):
    write_image(tmp_path / "truth.png", smooth_image(32, 32))
    code = main(["simulate", str(tmp_path / "truth.png"), "--preset", "identity", "--frames", "2",
                 "--out", str(tmp_path / "sim")])
    assert code == 0
    assert len(list((tmp_path / "sim" / "frames").iterdir())) == 2


def test_cli_reports_usage_errors(tmp_path):
    assert main(["restore", str(tmp_path / "missing")]) == 2
    (tmp_path / "bad.toml").write_text("nonsense = 1\n")
    write_frames(tmp_path / "frames", np.zeros((2, 8, 8)))
    assert main(["restore", str(tmp_path / "frames"), "--config", str(tmp_path / "bad.toml")]) == 2


def _record_thread_limits(monkeypatch, tmp_path):
    seen = []

    def fake_limits(limits=None):
        seen.append(limits)
        return contextlib.nullcontext()

    monkeypatch.setattr(parallel, "_max_workers", None)
    monkeypatch.setattr(cli, "threadpool_limits", fake_limits)
    monkeypatch.setattr(cli, "restore", lambda *args, **kwargs: SimpleNamespace(out_dir=tmp_path))
    return seen


def test_cli_threads_after_subcommand(tmp_path, monkeypatch):
    limits = _record_thread_limits(monkeypatch, tmp_path)
    write_frames(tmp_path / "frames", np.zeros((2, 8, 8)))
    assert main(["restore", str(tmp_path / "frames"), "--threads", "1"]) == 0
    assert limits == [1, 1]
    assert parallel.get_max_workers() == 1


def test_cli_config_threads_reach_native_pools(tmp_path, monkeypatch):
    limits = _record_thread_limits(monkeypatch, tmp_path)
    (tmp_path / "cfg.toml").write_text("threads = 2\n")
    write_frames(tmp_path / "frames", np.zeros((2, 8, 8)))
    assert main(["restore", str(tmp_path / "frames"), "--config", str(tmp_path / "cfg.toml")]) == 0
    assert limits == [None, 2]
    assert parallel.get_max_workers() == 2


def test_too_few_frames_in_memory():
    with pytest.raises(UsageError):
        restore_frames(np.zeros((1, 8, 8)), QUICK)


@pytest.mark.slow
@pytest.mark.parametrize("preset", ["weak", "strong"])
def test_restoration_beats_temporal_mean(tmp_path, preset):
    truth = edge_image(256) * 0.6 + smooth_image(256, 256) * 0.4
    sequence = degrade(truth, turbulence_preset(preset, n_frames=40))
    mean = temporal_mean(sequence.frames)
    result = restore_frames(sequence.frames, PipelineConfig(), tmp_path / "out")
    assert ssim(result.restored, truth) > ssim(mean, truth)
    assert psnr(result.restored * 255, truth * 255) > psnr(mean * 255, truth * 255)
    if preset == "weak":
        assert ssim(result.enhanced, truth) >= ssim(mean, truth)


@pytest.mark.slow
def test_fast_solver_beats_split_bregman():
    assert bench_solvers(size=240, trials=3, iterations=50).ratio <= 0.85
