"""
Command-line surface.

    python cli.py [--config overrides.json] [--seed N] <command> [options]

Exit codes: 0 success, 1 validation error or failed check, 2 I/O error.
"""
import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from config import GRID_PRESET, SEED, configure_logging, validate_config
from utils.ablation import AblationFlags
from utils.benchmark import BenchmarkConfig, build_benchmark, run_ablation
from utils.bev_pillars import GridConfig
from utils.descriptor_head import GemConfig
from utils.ego_motion import RansacConfig
from utils.errors import RadarPRError, ValidationError
from utils.evaluation import build_database, recall_at_n, write_recall_csv
from utils.mining import EvalProtocol
from utils.model import ModelConfig, encode_window, forward, fuse_maps, load_model, save_model
from utils.preprocess import Window, preprocess_sequence, refine_frames, save_preprocessed
from utils.radar_io import Pose, load_sequence
from utils.settings import apply_overrides, load_overrides
from utils.stpdfa import DeformConfig
from utils.storage import load_database
from utils.synth_sim import (
    WorldConfig,
    generate_sequence,
    generate_world,
    loop_trajectory,
    respawn_agents,
    save_simulation,
    straight_trajectory,
)
from utils.training import TrainConfig, TrainingData, train

logger = logging.getLogger(__name__)


class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with exit code 1 instead of exiting."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise CliUsageError(message)


@dataclass(frozen=True)
class Settings:
    model: ModelConfig
    train: TrainConfig
    protocol: EvalProtocol
    world: WorldConfig
    benchmark: BenchmarkConfig
    seed: int


def build_settings(config_path: Optional[str], seed: Optional[int], flags: Optional[str] = None) -> Settings:
    """Typed records with --config overrides, --seed and --flags applied."""
    overrides = load_overrides(config_path)
    seed = SEED if seed is None else seed
    ransac = apply_overrides(RansacConfig(seed=seed), overrides.get("ransac"))
    grid = apply_overrides(GridConfig.preset(GRID_PRESET), overrides.get("grid"))
    deform = apply_overrides(DeformConfig(), overrides.get("deform"))
    gem = apply_overrides(GemConfig(), overrides.get("gem"))
    model = ModelConfig(grid=grid, deform=deform, gem=gem, ransac=ransac, seed=seed)
    model = apply_overrides(model, overrides.get("model"))
    if flags is not None:
        model = replace(model, flags=AblationFlags.parse(flags))
    return Settings(
        model=model,
        train=apply_overrides(TrainConfig(seed=seed), overrides.get("train")),
        protocol=apply_overrides(EvalProtocol(), overrides.get("eval")),
        world=apply_overrides(WorldConfig(seed=seed), overrides.get("world")),
        benchmark=apply_overrides(BenchmarkConfig(seed=seed), overrides.get("benchmark")),
        seed=seed,
    )


def _sequence_id(manifest_path: str) -> str:
    return os.path.basename(os.path.dirname(os.path.abspath(manifest_path)))


def load_windows(manifests: Sequence[str], model: ModelConfig) -> List[Window]:
    windows: List[Window] = []
    for path in manifests:
        sequence = load_sequence(path)
        cut, _ = preprocess_sequence(sequence, model.ransac, model.flags, model.window, _sequence_id(path))
        windows.extend(cut)
    return windows


def cmd_simulate(args, settings: Settings) -> int:
    world_config = settings.world
    if args.agents is not None:
        world_config = replace(world_config, n_dynamic_agents=args.agents)
    if args.dynamic_fraction is not None:
        world_config = replace(world_config, dynamic_fraction=args.dynamic_fraction)
    world = generate_world(world_config)
    rng = np.random.default_rng([settings.seed, 7])

    for traversal in range(args.traversals):
        traversal_world = world if traversal == 0 else respawn_agents(world, world_config, settings.seed + traversal)
        if args.loop:
            trajectory = loop_trajectory((0.0, args.radius), args.radius, args.speed, world_config.frame_rate)
        else:
            lateral = rng.uniform(-args.lateral_jitter, args.lateral_jitter) if traversal else 0.0
            trajectory = straight_trajectory(Pose(0.0, lateral, 0.0, 0.0), args.speed, args.frames,
                                             world_config.frame_rate)
        sequence, frames = generate_sequence(traversal_world, trajectory, world_config, stream=traversal)
        manifest = save_simulation(sequence, frames, os.path.join(args.out, f"traversal_{traversal}"))
        print(manifest)
    return 0


def cmd_preprocess(args, settings: Settings) -> int:
    sequence = load_sequence(args.sequence)
    refined, estimates = refine_frames(sequence.scans, settings.model.ransac, settings.model.flags)
    manifest = save_preprocessed(sequence, refined, estimates, args.out)
    fallbacks = sum(1 for e in estimates if e.fallback)
    print(f"{manifest}: {len(refined)} frames, {fallbacks} fallbacks")
    return 0


def cmd_train(args, settings: Settings) -> int:
    model = settings.model
    train_config = settings.train if args.epochs is None else replace(settings.train, epochs=args.epochs)
    data = TrainingData(load_windows(args.database, model), load_windows(args.queries, model))
    result = train(
        data, train_config, model,
        protocol=settings.protocol,
        loss_csv=args.loss_csv,
        checkpoint_dir=args.checkpoints,
        progress=args.progress,
    )
    save_model(result.params, model, args.out)
    final = result.epoch_means[-1] if result.epoch_means else float("nan")
    print(f"{args.out}: {len(result.epoch_means)} epochs, final mean loss {final:.6f}")
    return 0


def cmd_embed(args, settings: Settings) -> int:
    params, model = load_model(args.model)
    windows = load_windows(args.sequences, model)
    database = build_database(windows, params, model, args.out, progress=args.progress)
    print(f"{args.out}: {len(database)} descriptors of dim {database.dim}")
    return 0


def cmd_eval(args, settings: Settings) -> int:
    result = recall_at_n(load_database(args.queries), load_database(args.refs), settings.protocol)
    write_recall_csv(result, args.out)
    summary = ", ".join(f"R@{n}={r:.4f}" for n, r in result.recall.items())
    print(f"{summary} ({result.evaluated} evaluated, {result.excluded} excluded)")
    return 0


def cmd_gradcheck(args, settings: Settings) -> int:
    from utils.gradcheck import run_suite

    results = run_suite(settings.seed, include_pipeline=not args.skip_pipeline)
    for result in results:
        status = "ok" if result.passed else "FAIL"
        print(f"{result.name:24s} {result.max_rel_error:.3e}  tol {result.tolerance:.0e}  {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} gradient check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args, settings: Settings) -> int:
    bench_config = settings.benchmark
    if args.places is not None:
        bench_config = replace(bench_config, n_places=args.places)
    if args.dynamic_fraction is not None:
        bench_config = replace(bench_config, dynamic_fraction=args.dynamic_fraction)
    train_config = settings.train if args.epochs is None else replace(settings.train, epochs=args.epochs)
    model = replace(settings.model, window=min(settings.model.window, bench_config.window))
    benchmark = build_benchmark(bench_config)
    table = run_ablation(benchmark, model, train_config, args.seeds or [settings.seed],
                         protocol=settings.protocol, csv_path=args.out)
    print(table.to_string(index=False))
    return 0


def cmd_plot(args, settings: Settings) -> int:
    from utils.plotting import plot_csv

    print(plot_csv(args.csv, args.out, args.kind))
    return 0


def cmd_visualize(args, settings: Settings) -> int:
    from utils.visualization import render_bev_png, render_retrieval_png

    params, model = load_model(args.model)
    windows = load_windows([args.sequence], model)
    anchor = windows[-1].anchor if args.frame is None else args.frame
    by_anchor = {w.anchor: w for w in windows}
    if anchor not in by_anchor:
        raise ValidationError(f"frame {anchor} has no full window of {model.window} frames")
    window = by_anchor[anchor]

    maps = encode_window(window, params, model)
    print(render_bev_png(maps[-1], os.path.join(args.out, f"bev_frame_{anchor:06d}.png")))
    print(render_bev_png(fuse_maps(maps, params, model), os.path.join(args.out, f"fused_frame_{anchor:06d}.png")))

    if args.database:
        if not args.references:
            raise ValidationError("--database needs --references to draw retrieved frames")
        database = load_database(args.database)
        reference_windows = {w.anchor: w for w in load_windows([args.references], model)}
        results = database.nearest(forward(window, params, model).values, args.top_n)
        retrieved, successes = [], []
        for row in results:
            reference = reference_windows.get(row["frame_index"])
            if reference is None:
                logger.warning("Retrieved frame %s is not in %s", row["frame_index"], args.references)
                continue
            retrieved.append(encode_window(reference, params, model)[-1])
            pose = Pose.from_dict(row["pose"]) if row.get("pose") else None
            distance = window.pose.planar_distance(pose) if window.pose and pose else math.inf
            successes.append(distance <= settings.protocol.positive_radius)
        print(render_retrieval_png(maps[-1], retrieved, successes,
                                   os.path.join(args.out, f"retrieval_frame_{anchor:06d}.png")))
    return 0


def cmd_serve(args, settings: Settings) -> int:
    from app import create_app

    app = create_app(args.database, args.artifacts, args.api_key)
    app.run(host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON overrides file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed")
    common.add_argument("--log-level", default=argparse.SUPPRESS)

    parser = _Parser(prog="cli.py", description="Radar place recognition toolkit", parents=[common])
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name: str, handler, help_text: str):
        sub = commands.add_parser(name, help=help_text, parents=[common])
        sub.set_defaults(handler=handler)
        return sub

    sub = command("simulate", cmd_simulate, "render synthetic sequences")
    sub.add_argument("--out", required=True)
    sub.add_argument("--frames", type=int, default=50)
    sub.add_argument("--speed", type=float, default=8.0)
    sub.add_argument("--traversals", type=int, default=1)
    sub.add_argument("--loop", action="store_true")
    sub.add_argument("--radius", type=float, default=20.0)
    sub.add_argument("--lateral-jitter", type=float, default=0.5)
    sub.add_argument("--agents", type=int)
    sub.add_argument("--dynamic-fraction", type=float)

    sub = command("preprocess", cmd_preprocess, "estimate ego-velocity and remove dynamic points")
    sub.add_argument("--sequence", required=True, help="manifest.json")
    sub.add_argument("--out", required=True)
    sub.add_argument("--flags", help='enabled components, e.g. "dpr,fa" or "all"')

    sub = command("train", cmd_train, "train descriptor parameters")
    sub.add_argument("--database", nargs="+", required=True, help="database sequence manifests")
    sub.add_argument("--queries", nargs="+", required=True, help="training query sequence manifests")
    sub.add_argument("--out", required=True, help="parameter file")
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--loss-csv")
    sub.add_argument("--checkpoints")
    sub.add_argument("--flags")
    sub.add_argument("--progress", action="store_true")

    sub = command("embed", cmd_embed, "build a descriptor database")
    sub.add_argument("--model", required=True)
    sub.add_argument("--sequences", nargs="+", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--progress", action="store_true")

    sub = command("eval", cmd_eval, "Recall@N of query against reference databases")
    sub.add_argument("--queries", required=True)
    sub.add_argument("--refs", required=True)
    sub.add_argument("--out", required=True)

    sub = command("gradcheck", cmd_gradcheck, "finite-difference gradient checks")
    sub.add_argument("--skip-pipeline", action="store_true")

    sub = command("ablate", cmd_ablate, "component ablation on the synthetic benchmark")
    sub.add_argument("--out", required=True)
    sub.add_argument("--places", type=int)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--dynamic-fraction", type=float)
    sub.add_argument("--seeds", type=int, nargs="+")

    sub = command("plot", cmd_plot, "render a loss, recall or ablation CSV to SVG")
    sub.add_argument("--csv", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--kind", choices=["auto", "loss", "recall", "ablation"], default="auto")

    sub = command("visualize", cmd_visualize, "BEV and retrieval images of one frame")
    sub.add_argument("--model", required=True)
    sub.add_argument("--sequence", required=True)
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--frame", type=int)
    sub.add_argument("--database")
    sub.add_argument("--references", help="manifest of the sequence the database was built from")
    sub.add_argument("--top-n", type=int, default=5)

    sub = command("serve", cmd_serve, "run the retrieval service")
    sub.add_argument("--database")
    sub.add_argument("--artifacts")
    sub.add_argument("--api-key")
    sub.add_argument("--host", default="127.0.0.1")
    sub.add_argument("--port", type=int, default=5000)
    return parser


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliUsageError:
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)

    configure_logging(getattr(args, "log_level", None))
    try:
        validate_config()
        settings = build_settings(getattr(args, "config", None), getattr(args, "seed", None),
                                  getattr(args, "flags", None))
        return args.handler(args, settings)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RadarPRError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(cli_main())
