"""Command-line entry point: ingest, split, build, recommend, evaluate."""

from __future__ import annotations

import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import baselines, evaluation, report as report_mod
from .activity import (
    build_windowed_activity,
    load_snapshot,
    quantize_to_block_start,
    save_snapshot,
    SnapshotFormatError,
    temporal_activity,
)
from .config import ALL_METHODS, ExperimentConfig, load_config_file
from .corpus import (
    ConfigurationError,
    SplitError,
    chronological_split,
    load_manifest,
    manifest_payload,
    save_manifest,
    select_candidates,
    split_from_manifest,
)
from .diffusion import DEGREE_MODES, build_graph, rank_users, score_question
from .evaluation import UnknownMethodError, prepare_experiment, run_experiment
from .ingest import (
    CorpusFormatError,
    DumpParseError,
    ParseStats,
    build_corpus,
    load_corpus,
    parse_posts,
    save_corpus,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_IO = 2
EXIT_USAGE = 3


class QuestionNotFoundError(KeyError):
    """Requested question id is not present in the corpus."""


def _parse_time(value: str) -> int:
    try:
        return int(value)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(value)
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse timestamp {value!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _config_from(ctx: click.Context, config_file: str | None, **flags) -> ExperimentConfig:
    """Merge precedence: command-line flags > config file > defaults."""
    values: dict = {}
    if config_file:
        values.update(load_config_file(config_file))
    for name, value in flags.items():
        source = ctx.get_parameter_source(name)
        if source is not None and source.name == "COMMANDLINE":
            values[name] = value
        elif name not in values and value is not None:
            values.setdefault(name, value)
    values = {k: v for k, v in values.items() if v is not None}
    return ExperimentConfig(**values)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def cli(verbose: bool) -> None:
    """Temporal bipartite-graph expert recommendation pipeline."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@click.argument("dump_path", type=click.Path(dir_okay=False))
@click.option("-o", "--out-corpus", required=True, type=click.Path(dir_okay=False))
@click.option("--site", default=None, help="Site name stored in the corpus file.")
def ingest(dump_path: str, out_corpus: str, site: str | None) -> None:
    """Parse a Posts.xml dump into the internal corpus file."""
    site_name = site or Path(dump_path).stem.replace(".stackexchange.com", "")
    stats = ParseStats()
    with open(dump_path, "rb") as handle:
        corpus = build_corpus(parse_posts(handle, stats=stats), site_name=site_name)
    save_corpus(corpus, out_corpus)
    evaluable = len(corpus.evaluable_question_ids())
    answerers = {a.owner_user_id for a in corpus.answers.values()}
    counts = corpus.build_counts
    click.echo(f"site: {site_name}")
    click.echo(f"rows seen: {stats.rows_seen} (rejected {stats.rejected_rows}, "
               f"other post types {stats.skipped_other_type})")
    click.echo(f"questions: {len(corpus.questions)} "
               f"({evaluable} with owner-attributed accepted answers)")
    click.echo(f"answers: {len(corpus.answers)} (dropped {counts.total_dropped_answers()}: "
               f"{counts.answers_missing_parent} missing parent, "
               f"{counts.answers_without_owner} without owner, "
               f"{counts.answers_before_question} dated before question)")
    click.echo(f"answerers: {len(answerers)}")
    click.echo(f"tags: {len(corpus.distinct_tags())}")
    click.echo(f"accepted references cleared: {counts.accepted_refs_cleared}")
    click.echo(f"corpus written to {out_corpus}")


@cli.command()
@click.argument("corpus_path", type=click.Path(dir_okay=False))
@click.option("-o", "--out-manifest", required=True, type=click.Path(dir_okay=False))
@click.option("--ratios", default="0.7,0.1,0.2", show_default=True,
              help="Comma-separated train,validation,test fractions.")
@click.option("--min-answers", default=5, show_default=True, type=int)
def split(corpus_path: str, out_manifest: str, ratios: str, min_answers: int) -> None:
    """Write the chronological split manifest with the candidate-user set."""
    try:
        parts = tuple(float(r) for r in ratios.split(","))
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse ratios {ratios!r}") from exc
    corpus = load_corpus(corpus_path)
    dataset_split = chronological_split(corpus, parts)
    candidates = select_candidates(dataset_split, corpus, min_answers)
    config = ExperimentConfig(site_name=corpus.site_name, min_answers=min_answers, ratios=parts)
    payload = manifest_payload(
        dataset_split,
        candidates,
        min_answers,
        site_name=corpus.site_name,
        config_fingerprint=config.fingerprint(),
    )
    save_manifest(out_manifest, payload)
    click.echo(f"train/validation/test questions: {len(dataset_split.train_questions)}/"
               f"{len(dataset_split.validation_questions)}/{len(dataset_split.test_questions)}")
    click.echo(f"candidates (>= {min_answers} training answers): {len(candidates)}")
    click.echo(f"manifest written to {out_manifest}")


@cli.command()
@click.argument("corpus_path", type=click.Path(dir_okay=False))
@click.argument("manifest_path", type=click.Path(dir_okay=False))
@click.option("-o", "--out-snapshot", required=True, type=click.Path(dir_okay=False))
@click.option("--window-days", default=30.0, show_default=True, type=float)
@click.option("--at", "at_time", default=None,
              help="Reference time (ISO-8601 or epoch seconds); defaults to the "
                   "block of the latest test question.")
def build(corpus_path: str, manifest_path: str, out_snapshot: str,
          window_days: float, at_time: str | None) -> None:
    """Build the windowed activity snapshot used for scoring."""
    corpus = load_corpus(corpus_path)
    dataset_split, candidates, _ = split_from_manifest(load_manifest(manifest_path))
    window = int(round(window_days * 86400))
    config = ExperimentConfig(site_name=corpus.site_name, window_seconds=window)
    ctx = prepare_experiment(corpus, dataset_split, config, candidates=candidates)
    if at_time is not None:
        reference = quantize_to_block_start(_parse_time(at_time), ctx.origin, window)
        from .corpus import training_records  # local import avoids cycle at module load

        records = training_records(dataset_split, corpus, candidates,
                                   ctx.user_index, ctx.tag_index)
        usable = [r for r in records if r.answer_time < reference]
        windowed = build_windowed_activity(
            usable, window, reference, ctx.windowed.shape, ctx.origin
        )
    else:
        windowed = ctx.windowed
    save_snapshot(windowed, out_snapshot)
    click.echo(f"windows: {len(windowed.windows)} (max ordinal {windowed.window_count})")
    click.echo(f"users x tags: {windowed.shape[0]} x {windowed.shape[1]}")
    click.echo(f"snapshot written to {out_snapshot}")


@cli.command()
@click.argument("corpus_path", type=click.Path(dir_okay=False))
@click.argument("manifest_path", type=click.Path(dir_okay=False))
@click.option("--question-id", type=int, default=None)
@click.option("--tags", "tags_csv", default=None, help="Comma-separated tag list.")
@click.option("--at", "at_time", default=None, help="Query time for --tags mode.")
@click.option("--top", default=10, show_default=True, type=int)
@click.option("--window-days", default=30.0, show_default=True, type=float)
@click.option("--degree-mode", type=click.Choice(DEGREE_MODES), default="weighted",
              show_default=True)
def recommend(corpus_path: str, manifest_path: str, question_id: int | None,
              tags_csv: str | None, at_time: str | None, top: int,
              window_days: float, degree_mode: str) -> None:
    """Print the top ranked candidate answerers for a question or tag list."""
    if (question_id is None) == (tags_csv is None):
        raise ConfigurationError("provide exactly one of --question-id or --tags")
    corpus = load_corpus(corpus_path)
    dataset_split, candidates, _ = split_from_manifest(load_manifest(manifest_path))
    window = int(round(window_days * 86400))
    config = ExperimentConfig(site_name=corpus.site_name, window_seconds=window,
                              degree_mode=degree_mode)
    ctx = prepare_experiment(corpus, dataset_split, config, candidates=candidates)

    if question_id is not None:
        if question_id not in corpus.questions:
            raise QuestionNotFoundError(f"question {question_id} not in corpus")
        question = corpus.questions[question_id]
        tags = list(question.tags)
        query_time = quantize_to_block_start(question.creation_date, ctx.origin, window)
    else:
        tags = [t.strip().lower() for t in tags_csv.split(",") if t.strip()]
        if at_time is not None:
            query_time = quantize_to_block_start(_parse_time(at_time), ctx.origin, window)
        else:
            latest = max(a.creation_date for a in corpus.answers.values())
            query_time = quantize_to_block_start(latest, ctx.origin, window) + window
    query_time = min(query_time, ctx.windowed.reference_time)

    tag_indices = [ctx.tag_index.to_index[t] for t in tags if t in ctx.tag_index]
    unknown = [t for t in tags if t not in ctx.tag_index]
    if unknown:
        click.echo(f"warning: unknown tags ignored: {', '.join(unknown)}", err=True)
    graph = build_graph(temporal_activity(ctx.windowed, query_time), degree_mode)
    if tag_indices:
        scores = score_question(graph, tag_indices)
    else:
        click.echo("warning: no known tags; ranking is the deterministic tie-break "
                   "order only", err=True)
        scores = np.zeros(len(ctx.user_index))
    ranking = rank_users(scores, ctx.user_index, question_id)
    block = datetime.fromtimestamp(query_time, tz=timezone.utc).strftime("%Y-%m-%d")
    click.echo(f"query block: {block}    candidates: {len(ctx.user_index)}")
    for position, (user_id, score) in enumerate(ranking.top(top), start=1):
        click.echo(f"{position:>4}  user {user_id:<10} score {score:.6f}")


@cli.command()
@click.argument("corpus_path", type=click.Path(dir_okay=False))
@click.argument("manifest_path", type=click.Path(dir_okay=False))
@click.option("--method", "method_name", default="t-bger", show_default=True,
              help=f"One of {', '.join(ALL_METHODS)} or 'all'.")
@click.option("-o", "--outdir", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_file", default=None, type=click.Path(dir_okay=False),
              help="JSON file with ExperimentConfig fields (flags take precedence).")
@click.option("--window-days", default=30.0, show_default=True, type=float)
@click.option("--min-answers", default=None, type=int,
              help="Candidate threshold; defaults to the manifest value.")
@click.option("--cold-start", is_flag=True,
              help="Use min_answers=1 candidates (cold-start protocol).")
@click.option("--cold-threshold", default=10, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--trials", default=50, show_default=True, type=int,
              help="Permutation trials for the vote-score baseline.")
@click.option("--degree-mode", type=click.Choice(DEGREE_MODES), default="weighted",
              show_default=True)
@click.option("--mf-tune/--no-mf-tune", default=True, show_default=True,
              help="Select MF hyperparameters by validation MRR.")
@click.option("--snapshot", "snapshot_path", default=None, type=click.Path(dir_okay=False),
              help="Reuse a windowed-activity snapshot built by 'build'.")
@click.option("--figures/--no-figures", default=True, show_default=True)
@click.option("--per-question-csv", is_flag=True)
@click.pass_context
def evaluate(click_ctx: click.Context, corpus_path: str, manifest_path: str,
             method_name: str, outdir: str, config_file: str | None,
             window_days: float, min_answers: int | None, cold_start: bool,
             cold_threshold: int, seed: int, trials: int, degree_mode: str,
             mf_tune: bool, snapshot_path: str | None, figures: bool,
             per_question_csv: bool) -> None:
    """Evaluate one method (or all) on the test partition and write reports."""
    corpus = load_corpus(corpus_path)
    manifest = load_manifest(manifest_path)
    dataset_split, manifest_candidates, manifest_min_answers = split_from_manifest(manifest)

    methods = list(ALL_METHODS) if method_name == "all" else [method_name]
    for m in methods:
        if m not in ALL_METHODS:
            raise UnknownMethodError(
                f"unknown method {m!r}; expected one of {ALL_METHODS} or 'all'"
            )

    effective_min = 1 if cold_start else (
        min_answers if min_answers is not None else manifest_min_answers
    )
    config = _config_from(
        click_ctx, config_file,
        site_name=corpus.site_name,
        window_seconds=int(round(window_days * 86400)),
        min_answers=effective_min,
        cold_threshold=cold_threshold,
        seed=seed,
        score_trials=trials,
        degree_mode=degree_mode,
        mf_tune=mf_tune,
    )
    config = config.with_overrides(min_answers=effective_min)

    if config.min_answers == manifest_min_answers:
        candidates = manifest_candidates
    else:
        logger.info("recomputing candidates for min_answers=%d", config.min_answers)
        candidates = select_candidates(dataset_split, corpus, config.min_answers)

    windowed = None
    if snapshot_path is not None:
        windowed = load_snapshot(snapshot_path)
    ctx = prepare_experiment(corpus, dataset_split, config, candidates=candidates,
                             windowed=windowed)

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for m in methods:
        method_config = config.with_overrides(method=m)
        rep = run_experiment(corpus, dataset_split, m, method_config, context=ctx)
        reports.append(rep)
        report_mod.save_report_json(rep, out / f"report_{m}.json")
        (out / f"report_{m}.txt").write_text(report_mod.report_to_text(rep), encoding="utf-8")
        if per_question_csv:
            report_mod.save_per_question_csv(rep, out / f"questions_{m}.csv")
    summary = report_mod.comparison_text(reports)
    (out / "comparison.txt").write_text(summary, encoding="utf-8")
    if figures:
        report_mod.render_report_figures(reports, out)
    click.echo(summary, nl=False)
    click.echo(f"reports written to {out}")


def main(argv: list[str] | None = None) -> int:
    """Entry point with the documented exit-code mapping."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return EXIT_OK
    except click.exceptions.Exit as exc:  # --help and friends
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return EXIT_USAGE
    except (ConfigurationError, SplitError, UnknownMethodError, QuestionNotFoundError,
            evaluation.MetricError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    except (DumpParseError, CorpusFormatError, SnapshotFormatError,
            json.JSONDecodeError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_IO
    except click.Abort:
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - last-resort guard
        logger.exception("internal error")
        click.echo(f"internal error: {exc}", err=True)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
