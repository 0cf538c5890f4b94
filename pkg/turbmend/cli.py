import argparse
import logging
import sys
from pathlib import Path

from rich.console import Console
from threadpoolctl import threadpool_limits

from . import parallel
from .config import load_config, turbulence_preset
from .exceptions import TurbmendError
from .logs import configure_logging
from .pipeline import bench_solvers, evaluate, restore, simulate

console = Console(stderr=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="turbmend", description="Restore a sharp image from turbulence-degraded frames.")
    parser.add_argument("--threads", type=int, default=None, help="cap on worker threads (default: one per CPU)")
    # accepted after the subcommand too; SUPPRESS keeps the top-level value when absent
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="cap on worker threads")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for debug logs, -vv adds solver diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("restore", parents=[common], help="run the full restoration pipeline on a frame directory")
    p.add_argument("frames", type=Path, help="directory of PNG/PGM frames")
    p.add_argument("--config", type=Path, default=None, help="flat TOML file with PipelineConfig keys")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--psf-radius", type=float, default=None, help="known disc PSF radius; deconvolve non-blind")
    p.add_argument("--debug-artifacts", action="store_true", help="also write fields, graph and k* map")

    p = sub.add_parser("simulate", parents=[common], help="simulate a turbulent sequence from a sharp image")
    p.add_argument("image", type=Path)
    p.add_argument("--preset", default="weak", choices=["identity", "weak", "strong"])
    p.add_argument("--out", type=Path, default=Path("simulated"))
    p.add_argument("--frames", type=int, default=None, dest="n_frames")
    p.add_argument("--seed", type=int, default=None, dest="rng_seed")
    p.add_argument("--sigma-d2", type=float, default=None)
    p.add_argument("--d-g", type=int, default=None)
    p.add_argument("--sigma-n2", type=float, default=None)
    p.add_argument("--disc-radius", type=float, default=None)
    p.add_argument("--write-fields", action="store_true")

    p = sub.add_parser("evaluate", parents=[common], help="print name,psnr,ssim rows against a ground truth")
    p.add_argument("images", type=Path, nargs="+")
    p.add_argument("truth", type=Path)

    p = sub.add_parser("bench", parents=[common], help="time the fast mixed-ROF solver against split Bregman")
    p.add_argument("--size", type=int, default=240)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    return parser


def run(args: argparse.Namespace) -> None:
    if args.command == "restore":
        cfg = load_config(args.config, threads=args.threads)
        limit = cfg.threads or None
        parallel.set_max_workers(limit)
        with threadpool_limits(limits=limit):
            result = restore(args.frames, cfg, args.out, progress=True, psf_radius=args.psf_radius,
                             debug_artifacts=args.debug_artifacts)
        print(result.out_dir / "restored_L.png")
    elif args.command == "simulate":
        turbulence = turbulence_preset(
            args.preset,
            n_frames=args.n_frames,
            rng_seed=args.rng_seed,
            sigma_d2=args.sigma_d2,
            d_g=args.d_g,
            sigma_n2=args.sigma_n2,
            disc_radius=args.disc_radius,
        )
        paths = simulate(args.image, turbulence, args.out, preset=args.preset, write_fields=args.write_fields, progress=True)
        print(paths[0].parent)
    elif args.command == "evaluate":
        print("name,psnr,ssim")
        for row in evaluate(args.images, args.truth):
            print(row.csv())
    elif args.command == "bench":
        report = bench_solvers(args.size, args.trials, args.iterations, args.seed, progress=True)
        for line in report.lines():
            print(line)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(logging.DEBUG if args.verbose else logging.INFO)
    if args.verbose < 2:
        logging.getLogger("turbmend.diagnostics").setLevel(logging.INFO)
    parallel.set_max_workers(args.threads)
    try:
        with threadpool_limits(limits=args.threads):
            run(args)
    except TurbmendError as e:
        console.print(f"[red]error:[/red] {e}")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
