"""Command line entry point for the joint speech and accent recognition toolkit."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import pipeline
from errors import EXIT_OK, EXIT_USAGE, JointAccentError
from event_log import configure_logging, log_event
from run_config import load_run_config
from schemas import RunConfig

logger = logging.getLogger("jointaccent")


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _method(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--method", choices=pipeline.METHODS, required=True, help="mono-joint or multi-joint")


def build_decode_parser(subparsers) -> None:
    parser = subparsers.add_parser("decode", help="Beam Viterbi decode of the evaluation split")
    _method(parser)
    parser.add_argument("--beam", type=float, help="Log-likelihood beam (overrides decoder.beam)")
    parser.add_argument("--max-active", type=int, help="Active token cap (overrides decoder.max_active)")
    parser.add_argument("--split", choices=("dev", "test"), help="Split to decode (overrides decoder.split)")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="jointaccent", description=__doc__)
    parser.add_argument("--config", type=Path, help="TOML run configuration merged over the defaults")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.FIELD=VALUE",
        help="Override one config value; repeatable",
    )
    parser.add_argument("--output-dir", help="Workspace directory (overrides output_dir)")
    parser.add_argument("--force", action="store_true", help="Overwrite existing outputs")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    subparsers = parser.add_subparsers(title="commands", required=True, dest="command", parser_class=_ArgumentParser)

    subparsers.add_parser("synth", help="Generate the synthetic multi-accent corpus")
    subparsers.add_parser("prep-lexicon", help="Write base, training, mono and multi decode lexicons")
    lm = subparsers.add_parser("train-lm", help="Train Witten-Bell trigram LMs")
    lm.add_argument("--mode", choices=pipeline.METHODS, action="append", help="LM mode; default is every configured mode")
    audit = subparsers.add_parser("audit-lm", help="Count cross-accent n-grams in a tagged ARPA file")
    audit.add_argument("--arpa", type=Path, help="ARPA file; default is the workspace multi LM")
    am = subparsers.add_parser("train-am", help="Flat start and Viterbi-train the HMM-GMM acoustic model")
    am.add_argument("--components", type=int, help="Gaussians per state (power of two)")
    build_decode_parser(subparsers)
    decide = subparsers.add_parser("decide-accent", help="Count accent identifiers in decoder output")
    _method(decide)
    decide.add_argument("--granularity", choices=("word", "phone"), help="Voting unit (overrides decision.granularity)")
    for name, text in (
        ("score", "WER and accent accuracy per accent"),
        ("confusion", "Accent confusion matrix"),
        ("word-accent", "Rank words by accent accuracy"),
    ):
        _method(subparsers.add_parser(name, help=text))
    subparsers.add_parser("stats", help="Corpus statistics per split")
    subparsers.add_parser("run-all", help="Full chain for both methods plus the comparison report")
    subparsers.add_parser("sweep-density", help="Retrain and evaluate across the density sweep")
    subparsers.add_parser("sweep-shift", help="Accent separability sweep over corpus.shift_sweep")
    return parser


def _config(options: argparse.Namespace) -> RunConfig:
    overrides = list(options.overrides)
    if options.output_dir:
        overrides.append(f"output_dir='{options.output_dir}'")
    if options.command == "decode":
        for field, value in (("beam", options.beam), ("max_active", options.max_active)):
            if value is not None:
                overrides.append(f"decoder.{field}={value}")
        if options.split:
            overrides.append(f'decoder.split="{options.split}"')
    if options.command == "decide-accent" and options.granularity:
        overrides.append(f'decision.granularity="{options.granularity}"')
    return load_run_config(options.config, overrides)


def dispatch(options: argparse.Namespace, config: RunConfig) -> None:
    force = options.force
    match options.command:
        case "synth":
            pipeline.synth(config, force=force)
        case "prep-lexicon":
            pipeline.prep_lexicon(config, force=force)
        case "train-lm":
            pipeline.train_lm(config, options.mode, force=force)
        case "audit-lm":
            audit = pipeline.audit_lm(config, options.arpa, force=force)
            print(f"cross-accent n-grams: {audit.count}")
        case "train-am":
            pipeline.train_am(config, options.components, force=force)
        case "decode":
            pipeline.run_decode(config, options.method, force=force)
        case "decide-accent":
            pipeline.decide_accent(config, options.method, force=force)
        case "score":
            report = pipeline.score(config, options.method, force=force)
            print(f"{options.method}: WER {report.wer.pooled.wer} ACC {report.acc.pooled.accuracy}")
        case "confusion":
            pipeline.confusion_report(config, options.method, force=force)
        case "word-accent":
            pipeline.word_accent_report(config, options.method, force=force)
        case "stats":
            pipeline.stats(config, force=force)
        case "run-all":
            pipeline.run_all(config, force=force)
            print((pipeline.Workspace.for_config(config).reports / "comparison.txt").read_text(encoding="utf-8"))
        case "sweep-density":
            pipeline.sweep_density(config, force=force)
        case "sweep-shift":
            pipeline.sweep_shift(config, force=force)


def main(args=None) -> int:
    options = build_parser().parse_args(args)
    level = logging.DEBUG if options.verbose else logging.INFO
    try:
        config = _config(options)
        configure_logging(pipeline.Workspace.for_config(config).logs, level)
        log_event(logger, "command_start", command=options.command, output_dir=config.output_dir)
        dispatch(options, config)
    except JointAccentError as exc:
        logger.error("%s failed: %s", options.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    log_event(logger, "command_done", command=options.command)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
