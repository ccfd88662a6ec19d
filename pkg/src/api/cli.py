"""Command-line entry point.

Subcommands: run, screen, train, stability, synth, skeleton. Flags
override the JSON config file. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 numerical failure.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from dotenv import load_dotenv
from pydantic import ValidationError

from api.schemas import PipelineConfig
from common.errors import ConfigError, DataError, ExoNodesError
from common.logging_utils import setup_logging
from ml_models.nfivae_model import save_checkpoint
from services.dataset_service import SubjectDataset, write_dataset
from services.pipeline_service import (
    CHECKPOINT_FILE,
    LATENTS_FILE,
    obtain_dataset,
    resolve_networks,
    run_pipeline,
    run_screening,
    run_skeleton,
    run_stability,
    run_training,
)
from services.screening_service import CandidateSet
from simulator.scm_simulator import Mechanism, generate_five_node_scm

LOGGER = logging.getLogger(__name__)

SCM_FILE = "scm.json"


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Path to JSON config")
    parser.add_argument("--dataset", help="Dataset directory (labels.csv + sub_<id>.csv)")
    parser.add_argument("--output", help="Output directory")
    parser.add_argument("--seed", type=int, help="Base seed for tests and NF-iVAE")
    parser.add_argument("--workers", type=int, help="Worker processes")
    parser.add_argument("--alpha", type=float, help="KS screening threshold")
    parser.add_argument("--cci-threshold", type=float, help="CCI selection threshold")
    parser.add_argument("--null-method", choices=["spectral", "gamma"])
    parser.add_argument("--n-null-draws", type=int)
    parser.add_argument("--study-network", help="Network holding the in-study nodes")
    parser.add_argument("--candidate-networks", nargs="+", metavar="NETWORK",
                        help="Networks the candidate pool is drawn from")
    parser.add_argument("--fdr", action="store_true", default=None,
                        help="Benjamini-Hochberg adjust the KS p-values")
    parser.add_argument("--epochs", type=int, help="NF-iVAE training epochs")
    parser.add_argument("--latent-dim", type=int,
                        help="NF-iVAE latent size for train/stability (default: screened candidate count)")
    parser.add_argument("--factorized-prior", action="store_true", default=None,
                        help="Zero and freeze T_NN (factorized exponential-family prior)")
    parser.add_argument("--n-runs", type=int, help="Stability runs")
    parser.add_argument("--k", type=int, help="Top-k size for stability")
    parser.add_argument("--no-stability", action="store_true", help="Skip the stability stage")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exonodes")
    parser.add_argument("--log-level", default=None, help="Logging level (default INFO)")
    commands = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("run", "Full pipeline: screening, NF-iVAE, CCI selection, stability, skeletons"),
        ("screen", "Candidate screening only"),
        ("train", "Train the NF-iVAE on the in-study nodes"),
        ("stability", "Top-k CCI frequency across retrained runs"),
        ("skeleton", "PC skeleton on the reference subject"),
    ]:
        sub = commands.add_parser(name, help=help_text)
        _add_config_flags(sub)
        if name == "skeleton":
            sub.add_argument("--nodes", nargs="+", help="Nodes to search (default: in-study nodes)")

    synth = commands.add_parser("synth", help="Write the five-node fixture dataset")
    synth.add_argument("--output", required=True, help="Dataset directory to write")
    synth.add_argument("--subjects", type=int, default=40)
    synth.add_argument("--samples", type=int, default=500)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--mechanism", choices=[m.value for m in Mechanism],
                       default=Mechanism.LINEAR_GAUSSIAN.value)
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Built-in defaults, then EXONODES_WORKERS when no config file is given, then flags"""
    if args.config and not args.config.is_file():
        raise ConfigError(f"config file {args.config} not found")
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    data = cfg.model_dump()

    env_workers = os.getenv("EXONODES_WORKERS")
    if env_workers and args.workers is None and not args.config:
        try:
            data["workers"] = int(env_workers)
        except ValueError:
            raise ConfigError(f"EXONODES_WORKERS must be an integer, got {env_workers!r}") from None

    for flag, key in [("alpha", "alpha"), ("cci_threshold", "cci_threshold"),
                      ("null_method", "null_method"), ("n_null_draws", "n_null_draws"),
                      ("workers", "workers"), ("fdr", "fdr")]:
        value = getattr(args, flag)
        if value is not None:
            data[key] = value
    if args.seed is not None:
        data["seed"] = args.seed
        data["nfivae"]["seed"] = args.seed
    if args.dataset is not None:
        data["paths"]["dataset"] = args.dataset
    if args.output is not None:
        data["paths"]["output"] = args.output
    if args.study_network is not None:
        data["networks"]["study"] = args.study_network
    if args.candidate_networks is not None:
        data["networks"]["candidates"] = args.candidate_networks
    for flag, key in [("epochs", "epochs"), ("latent_dim", "latent_dim"),
                      ("factorized_prior", "factorized_prior")]:
        value = getattr(args, flag)
        if value is not None:
            data["nfivae"][key] = value
    if args.n_runs is not None:
        data["stability"]["n_runs"] = args.n_runs
    if args.k is not None:
        data["stability"]["k"] = args.k
    if args.no_stability:
        data["stability"]["enabled"] = False
    return PipelineConfig.model_validate(data)


def _output_dir(cfg: PipelineConfig) -> Path:
    path = Path(cfg.paths.output)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cmd_run(cfg: PipelineConfig, args: argparse.Namespace) -> str:
    report = run_pipeline(cfg)
    return "selected: " + (",".join(report.selected) or "-")


def _cmd_screen(cfg: PipelineConfig, args: argparse.Namespace) -> str:
    candidates = run_screening(obtain_dataset(cfg), cfg)
    candidates.to_frame().to_csv(_output_dir(cfg) / "candidates.csv", index=False)
    return "candidates: " + (",".join(candidates.nodes) or "-")


def _screen_for_size(dataset: SubjectDataset, cfg: PipelineConfig,
                     args: argparse.Namespace) -> Optional[CandidateSet]:
    """Screened candidates sizing the NF-iVAE, or None when --latent-dim is given"""
    if args.latent_dim is not None:
        return None
    candidates = run_screening(dataset, cfg)
    if not candidates.candidates:
        raise ConfigError("screening admitted no candidates; pass --latent-dim to train anyway")
    return candidates


def _cmd_train(cfg: PipelineConfig, args: argparse.Namespace) -> str:
    dataset = obtain_dataset(cfg)
    trained, latents = run_training(dataset, cfg, _screen_for_size(dataset, cfg, args))
    out = _output_dir(cfg)
    save_checkpoint(trained.model, out / CHECKPOINT_FILE)
    latents.to_frame().to_csv(out / LATENTS_FILE, index=False, float_format="%.17g")
    trained.log.to_csv(out / "training_log.csv", index=False)
    final = trained.log["total"].iloc[-1] if len(trained.log) else float("nan")
    return f"trained: epochs={len(trained.log)} final_loss={final:.6f}"


def _cmd_stability(cfg: PipelineConfig, args: argparse.Namespace) -> str:
    dataset = obtain_dataset(cfg)
    report = run_stability(dataset, cfg, candidates=_screen_for_size(dataset, cfg, args))
    out = _output_dir(cfg)
    report.to_frame().to_csv(out / "stability.csv", index=False)
    report.write_plot_data(out / "stability_plot.dat")
    top = report.ranking()[:report.k]
    return "stable top-k: " + ",".join(f"{n}={report.frequencies[n]:.2f}" for n in top)


def _cmd_skeleton(cfg: PipelineConfig, args: argparse.Namespace) -> str:
    dataset = obtain_dataset(cfg)
    nodes = args.nodes or resolve_networks(dataset, cfg)[0]
    skeleton = run_skeleton(dataset, list(nodes), cfg)
    skeleton.write(_output_dir(cfg) / "skeleton.txt")
    return f"edges: {len(skeleton.edges)}"


def _cmd_synth(args: argparse.Namespace) -> str:
    dataset, spec = generate_five_node_scm(n_subjects=args.subjects, n_samples=args.samples,
                                           mechanism=args.mechanism, seed=args.seed)
    write_dataset(dataset, args.output)
    spec.save(Path(args.output) / SCM_FILE)
    return f"wrote {dataset.n_subjects} subjects to {args.output}"


COMMANDS = {
    "run": _cmd_run,
    "screen": _cmd_screen,
    "train": _cmd_train,
    "stability": _cmd_stability,
    "skeleton": _cmd_skeleton,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level or os.getenv("EXONODES_LOG_LEVEL", "INFO"), stream=sys.stderr)

    try:
        if args.command == "synth":
            summary = _cmd_synth(args)
        else:
            cfg = resolve_config(args)
            summary = COMMANDS[args.command](cfg, args)
    except ValidationError as exc:
        LOGGER.error("Invalid configuration", extra={"errors": exc.error_count()})
        print(exc, file=sys.stderr)
        return ConfigError.exit_code
    except ExoNodesError as exc:
        LOGGER.error(str(exc), extra={"error": type(exc).__name__})
        return exc.exit_code
    except OSError as exc:
        LOGGER.error("I/O failure", extra={"path": exc.filename, "reason": exc.strerror})
        return DataError.exit_code

    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
