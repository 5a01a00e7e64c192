"""Command-line entry point.

Commands:

    simulate-noise   generate a synthetic corpus + noisy crowd labels
    run-pipeline     run the two-step cleaning pipeline over a work directory
    evaluate         score a labels file (or a run's outputs) against truth
    serve-review     serve the HTTP review API + UI for an interactive run
    export-report    apply logged review decisions and write the final report

All commands read an optional JSON config file (--config); explicit flags win
over config-file values. Commands that create randomness require --seed.

Exit codes: 0 success, 2 bad configuration, 3 I/O failure, 4 malformed data,
5 invalid run state (e.g. locked workdir, unresolved review items).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .data import Source, load_coco, save_coco
from .errors import ConfigError, DataFormatError, ExternalDetectorError, StateError
from .evaluation import evaluate_labels, render_table
from .noise import assign_difficulty, corrupt, make_corpus, render_images
from .pipeline import RunConfig, finalize_run, run_pipeline

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_STATE = 5


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise DataFormatError(f"{path}: config must be a JSON object")
    return raw


def _override(raw: dict, dotted: str, value) -> None:
    """Set a (possibly nested) config key when the flag was actually given."""
    if value is None:
        return
    keys = dotted.split(".")
    node = raw
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"config key {dotted}: {key} is not an object")
    node[keys[-1]] = value


def _build_run_config(args: argparse.Namespace) -> RunConfig:
    raw = _load_config_file(args.config)
    _override(raw, "seed", getattr(args, "seed", None))
    for flag, dotted in [
        ("images", "corpus.n_images"),
        ("min_instances", "corpus.min_instances"),
        ("max_instances", "corpus.max_instances"),
        ("miss_rate", "noise.miss_rate"),
        ("loc_rate", "noise.loc_rate"),
        ("bkg_rate", "noise.bkg_rate"),
        ("bib_rate", "noise.bib_rate"),
        ("x0", "loop.x0"),
        ("k", "loop.k"),
        ("g", "loop.g"),
        ("mode", "loop.mode"),
        ("selection", "loop.selection"),
        ("budget_cap", "loop.budget_cap"),
        ("gamma", "correction.gamma"),
        ("no_bib_filter", None),
        ("reviewer", "reviewer"),
        ("detector_backend", "detector_backend"),
    ]:
        if flag == "no_bib_filter":
            if getattr(args, flag, False):
                _override(raw, "correction.use_bib_filter", False)
            continue
        _override(raw, dotted, getattr(args, flag, None))
    # Corpus/noise blocks created purely by flag overrides still need their
    # seeds tied to the master seed, which resolved_* does when absent.
    if "corpus" in raw and "seed" not in raw["corpus"]:
        raw["corpus"].setdefault("seed", raw["seed"])
    if "noise" in raw and "seed" not in raw["noise"]:
        raw["noise"].setdefault("seed", raw["seed"])
    return RunConfig.from_dict(raw)


def _cmd_simulate_noise(args: argparse.Namespace) -> int:
    config = _build_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, truth = make_corpus(config.resolved_corpus())
    difficulty = assign_difficulty(truth, config.seed)
    result = corrupt(truth, config.resolved_noise(), difficulty)
    save_coco(truth.images, truth, out / "truth.json")
    save_coco(result.crowd.images, result.crowd, out / "crowd.json")
    sidecar = [
        {"label_id": label_id, "noise_type": result.noise_ledger[label_id]}
        for label_id in sorted(result.noise_ledger)
    ]
    (out / "noise_ledger.json").write_text(
        json.dumps({"entries": sidecar, "bkg_skipped": result.bkg_skipped}, sort_keys=True, indent=2)
        + "\n"
    )
    if args.render:
        count = render_images(truth, out / "images")
        print(f"rendered {count} images to {out / 'images'}")
    counts = result.counts()
    print(f"truth instances: {truth.label_count}  crowd labels: {result.crowd.label_count}")
    print("noise: " + "  ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    print(f"wrote {out / 'truth.json'}, {out / 'crowd.json'}, {out / 'noise_ledger.json'}")
    return EXIT_OK


def _cmd_run_pipeline(args: argparse.Namespace) -> int:
    config = _build_run_config(args)
    report = run_pipeline(
        config, args.workdir, resume=args.resume, stop_after=args.stop_after
    )
    if args.render:
        _, truth = load_coco(Path(args.workdir) / "truth.json", Source.EXPERT)
        render_images(truth, Path(args.workdir) / "images")
    status = report.get("status")
    if status == "complete":
        print(report["table"])
        print(f"budget: {report['budget_percent']:.2f}% of full expert relabeling")
        print(f"report: {Path(args.workdir) / 'report.json'}")
    elif status == "awaiting-review":
        print(f"{report['pending_items']} items queued for review at {report['queue']}")
        print("serve them with: boxclean serve-review --workdir", args.workdir)
    else:
        print(f"stopped after iteration {report.get('iteration')} (resume with --resume)")
    return EXIT_OK


def _cmd_evaluate(args: argparse.Namespace) -> int:
    if args.workdir is None and (args.truth is None or args.candidate is None):
        raise ConfigError("evaluate needs --workdir, or both --truth and --candidate")
    rows = []
    if args.workdir is not None:
        workdir = Path(args.workdir)
        _, truth = load_coco(workdir / "truth.json", Source.EXPERT)
        _, crowd = load_coco(workdir / "crowd.json", Source.CROWD)
        rows.append(evaluate_labels(crowd, truth, method="crowd-labels"))
        cleaned_path = workdir / "cleaned.json"
        if cleaned_path.exists():
            _, cleaned = load_coco(cleaned_path, Source.CROWD)
            rows.append(evaluate_labels(cleaned, truth, method="cleaned-labels"))
    else:
        _, truth = load_coco(args.truth, Source.EXPERT)
        _, candidate = load_coco(args.candidate, Source.CROWD)
        rows.append(evaluate_labels(candidate, truth, method=args.method))
    table = render_table(rows)
    print(table)
    if args.out:
        Path(args.out).write_text(
            json.dumps({"rows": [r.to_dict() for r in rows], "table": table}, sort_keys=True, indent=2)
            + "\n"
        )
        print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_serve_review(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.workdir, token=args.token, ui_dir=args.ui_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def _cmd_export_report(args: argparse.Namespace) -> int:
    report = finalize_run(args.workdir)
    print(report["table"])
    print(f"report: {Path(args.workdir) / 'report.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxclean",
        description="Clean noisy crowdsourced bounding boxes with targeted expert effort.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p: argparse.ArgumentParser, need_seed: bool) -> None:
        p.add_argument("--config", help="JSON config file; explicit flags override it")
        p.add_argument(
            "--seed",
            type=int,
            required=need_seed,
            help="master random seed (required: runs must be reproducible)",
        )

    sim = sub.add_parser("simulate-noise", help="generate truth + noisy crowd labels")
    add_config_flags(sim, need_seed=True)
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--images", type=int, help="number of images")
    sim.add_argument("--min-instances", dest="min_instances", type=int)
    sim.add_argument("--max-instances", dest="max_instances", type=int)
    sim.add_argument("--miss-rate", dest="miss_rate", type=float)
    sim.add_argument("--loc-rate", dest="loc_rate", type=float)
    sim.add_argument("--bkg-rate", dest="bkg_rate", type=float)
    sim.add_argument("--bib-rate", dest="bib_rate", type=float)
    sim.add_argument("--render", action="store_true", help="write placeholder PNGs")
    sim.set_defaults(func=_cmd_simulate_noise)

    run = sub.add_parser("run-pipeline", help="run selection + correction end to end")
    add_config_flags(run, need_seed=False)  # required unless resuming; checked below
    run.add_argument("--workdir", required=True, help="run directory (created if missing)")
    run.add_argument("--images", type=int, help="corpus size when generating data")
    run.add_argument("--min-instances", dest="min_instances", type=int)
    run.add_argument("--max-instances", dest="max_instances", type=int)
    run.add_argument("--miss-rate", dest="miss_rate", type=float)
    run.add_argument("--loc-rate", dest="loc_rate", type=float)
    run.add_argument("--bkg-rate", dest="bkg_rate", type=float)
    run.add_argument("--bib-rate", dest="bib_rate", type=float)
    run.add_argument("--x0", type=int, help="expert seed-round image count")
    run.add_argument("--k", type=int, help="images selected per iteration")
    run.add_argument("--g", type=int, help="number of selection iterations")
    run.add_argument("--mode", choices=["dual", "single"], help="model arms to use")
    run.add_argument("--selection", choices=["active", "random"])
    run.add_argument("--budget-cap", dest="budget_cap", type=float)
    run.add_argument("--gamma", type=float, help="merged-box containment threshold")
    run.add_argument("--no-bib-filter", dest="no_bib_filter", action="store_true")
    run.add_argument("--reviewer", choices=["oracle", "interactive"])
    run.add_argument("--detector-backend", dest="detector_backend")
    run.add_argument("--resume", action="store_true", help="continue from checkpoints")
    run.add_argument("--stop-after", dest="stop_after", type=int)
    run.add_argument("--render", action="store_true", help="write placeholder PNGs")
    run.set_defaults(func=_cmd_run_pipeline)

    ev = sub.add_parser("evaluate", help="score labels against ground truth")
    ev.add_argument("--workdir", help="run directory (scores crowd + cleaned sets)")
    ev.add_argument("--truth", help="ground-truth labels JSON")
    ev.add_argument("--candidate", help="candidate labels JSON")
    ev.add_argument("--method", default="labels", help="row name for the candidate")
    ev.add_argument("--out", help="also write rows as JSON")
    ev.set_defaults(func=_cmd_evaluate)

    serve = sub.add_parser("serve-review", help="serve the review API + UI")
    serve.add_argument("--workdir", required=True)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8787)
    serve.add_argument("--token", help="shared token clients must send (X-Review-Token)")
    serve.add_argument("--ui-dir", dest="ui_dir", help="built UI directory to serve at /")
    serve.set_defaults(func=_cmd_serve_review)

    export = sub.add_parser("export-report", help="finalize an interactive run")
    export.add_argument("--workdir", required=True)
    export.set_defaults(func=_cmd_export_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run-pipeline" and args.seed is None and not args.resume:
        if not (args.config and "seed" in _load_config_file(args.config)):
            parser.error("run-pipeline requires --seed (or a config file with one)")
    if args.command == "run-pipeline" and args.resume and args.seed is None:
        # Resume reads the stored config; pull the seed from it for the match check.
        config_path = Path(args.workdir) / "config.json"
        if not config_path.exists():
            print(f"error: {args.workdir}: nothing to resume", file=sys.stderr)
            return EXIT_STATE
        args.seed = json.loads(config_path.read_text())["seed"]
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except ExternalDetectorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
