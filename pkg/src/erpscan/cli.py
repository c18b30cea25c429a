"""Command line entry point: one subcommand per pipeline step.

Every command works on a run directory (``--out``), writes its artifacts
under fixed names and a ``manifest_<command>.json`` listing the inputs and
outputs with their digests, the derived seeds, the configuration and the
wall time.  ``--config`` accepts a configuration JSON or a manifest, so a
run can be repeated from its manifest alone.

Exit codes: 0 on success, 2 on validation errors, 1 otherwise.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__, diff, formats, pipeline, scan, sigproc, synthgen, udr
from . import evaluation as ev
from .config import ConfigError, PipelineConfig
from .labels import LabelError

log = logging.getLogger("erpscan")

VALIDATION_ERRORS = (ConfigError, formats.FormatError, synthgen.SpecificationError, sigproc.SpecificationError,
                     scan.SpecificationError, ev.SpecificationError, LabelError, udr.UndefinedScoreError,
                     diff.ShapeError)

COMMANDS = ("synth", "preprocess", "train", "sweep", "udr", "scan", "classify", "traverse", "reconstruct",
            "report", "all")


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(data, dict) and "command" in data and "config" in data:
        data = data["config"]   # a run manifest
    return PipelineConfig.from_dict(data)


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="configuration JSON or a run manifest")
    p.add_argument("--seed", type=int, default=d(None), help="top-level seed (overrides the config)")
    p.add_argument("--out", default=d("run"), help="run directory")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="erpscan", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = dict(
        synth="synthesize cohorts and preprocess them into ERP/SMPL datasets",
        preprocess="filter response report and rejection counts",
        train="train one AE or beta-VAE",
        sweep="train the beta x seed sweep and the AE",
        udr="rank the sweep with UDR and select a model",
        scan="ground SCAN on the selected beta-VAE; association and symbol samples",
        classify="cross-validated balanced accuracy of every representation",
        traverse="latent traversals of the selected model",
        reconstruct="SMPL reconstruction error against the true ERP",
        report="results table and summary",
        all="run every step in order",
    )
    cmds = {c: sub.add_parser(c, parents=[common], help=helps[c]) for c in COMMANDS}
    cmds["train"].add_argument("--mode", choices=("BVAE", "AE"), default="BVAE")
    cmds["train"].add_argument("--beta", type=float, default=1.0)
    cmds["train"].add_argument("--index", type=int, default=0, help="seed index within the beta group")
    for c in ("sweep", "all"):
        cmds[c].add_argument("--reuse", action="store_true",
                             help="keep existing checkpoints whose training config matches")
    for c in ("scan", "traverse", "reconstruct"):
        cmds[c].add_argument("--checkpoint", help="model checkpoint (default: the UDR selection)")
    cmds["reconstruct"].add_argument("--dataset", help="SMPL dataset (default: held-out SMPL)")
    cmds["reconstruct"].add_argument("--truth", help="ground-truth ERP dataset (default: held-out true ERP)")
    return parser


def _run_step(command: str, run: pipeline.Run, args) -> dict:
    if command == "train":
        images = run.read_dataset("train_erp").images
        path = pipeline.train_model(run, args.mode, args.beta, args.index, images)
        return dict(checkpoint=path.name)
    if command in ("scan", "traverse"):
        fn = pipeline.ground if command == "scan" else pipeline.traverse
        return fn(run, Path(args.checkpoint) if args.checkpoint else None)
    if command == "reconstruct":
        return pipeline.reconstruct(run, Path(args.checkpoint) if args.checkpoint else None,
                                    args.dataset, args.truth)
    return dict(pipeline.STEPS)[command](run)


def write_manifest(run: pipeline.Run, command: str, summary: dict, wall: float, extra=None) -> Path:
    manifest = dict(command=command, version=__version__, seed=run.config.seed, config=run.config.to_dict(),
                    seeds=dict(sorted(run.seeds.items())), inputs=dict(sorted(run.inputs.items())),
                    outputs=dict(sorted(run.outputs.items())), wall_time_s=round(wall, 3), summary=summary)
    if extra:
        manifest.update(extra)
    path = run.root / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, default=float) + "\n")
    return path


def execute(args) -> dict:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    config.validate()
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    reuse = getattr(args, "reuse", False)
    if args.command == "all":
        t0 = time.perf_counter()
        timings, summaries = {}, {}
        total = pipeline.Run(config, root, reuse_models=reuse)
        for name, _ in pipeline.STEPS:
            run = pipeline.Run(config, root, reuse_models=reuse)
            t = time.perf_counter()
            log.info("step %s", name)
            summaries[name] = _run_step(name, run, argparse.Namespace(checkpoint=None, dataset=None, truth=None))
            timings[name] = time.perf_counter() - t
            write_manifest(run, name, summaries[name], timings[name])
            total.seeds.update(run.seeds)
            total.outputs.update(run.outputs)
            total.inputs.update({k: v for k, v in run.inputs.items() if k not in total.outputs})
            log.info("step %s done in %.1f s", name, timings[name])
        wall = time.perf_counter() - t0
        write_manifest(total, "all", summaries["report"], wall,
                       dict(step_wall_time_s={k: round(v, 3) for k, v in timings.items()}))
        return dict(summary=summaries["report"], wall_time_s=wall)
    run = pipeline.Run(config, root, reuse_models=reuse)
    t = time.perf_counter()
    summary = _run_step(args.command, run, args)
    wall = time.perf_counter() - t
    write_manifest(run, args.command, summary, wall)
    return dict(summary=summary, wall_time_s=wall)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        result = execute(args)
    except VALIDATION_ERRORS as exc:
        print(f"erpscan {args.command}: validation error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:   # noqa: BLE001 - every other failure maps to exit code 1
        if args.verbose:
            log.exception("command failed")
        print(f"erpscan {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result["summary"], indent=2, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
