from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

from accent_decision import AccentDecision
from decoder import DecodeResult
from errors import MissingGoldError, PipelineRuntimeError
from event_log import log_event
from lexicon_forge import SEPARATOR, AccentId, strip_tags
from schemas import (
    AccuracyReport,
    AccuracyRow,
    ConfusionMatrix,
    CorpusStatsReport,
    DensitySweepRow,
    EvaluationReport,
    ShiftSweepRow,
    SplitStats,
    WerCounts,
    WerReport,
    WordAccentStats,
    WordRanking,
)
from synth_corpus import Corpus

logger = logging.getLogger(__name__)

CONSISTENCY_TOLERANCE = 0.01


def _code(accent: AccentId | str) -> str:
    return accent.code if isinstance(accent, AccentId) else accent


def _percent(numerator: int, denominator: int) -> Optional[float]:
    return 100.0 * numerator / denominator if denominator else None


# WER


@dataclass(frozen=True)
class EditOp:
    kind: str  # "match", "sub", "del", "ins"
    ref_index: Optional[int]
    hyp_index: Optional[int]


def align_words(reference: Sequence[str], hypothesis: Sequence[str]) -> list[EditOp]:
    """Minimum edit distance alignment with unit costs."""
    n, m = len(reference), len(hypothesis)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = i
    for j in range(1, m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diagonal = cost[i - 1][j - 1] + (reference[i - 1] != hypothesis[j - 1])
            cost[i][j] = min(diagonal, cost[i - 1][j] + 1, cost[i][j - 1] + 1)

    ops: list[EditOp] = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i][j] == cost[i - 1][j - 1] + (reference[i - 1] != hypothesis[j - 1]):
            kind = "match" if reference[i - 1] == hypothesis[j - 1] else "sub"
            ops.append(EditOp(kind, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and cost[i][j] == cost[i - 1][j] + 1:
            ops.append(EditOp("del", i - 1, None))
            i -= 1
        else:
            ops.append(EditOp("ins", None, j - 1))
            j -= 1
    ops.reverse()
    return ops


def _scoring_tokens(words: Sequence[str]) -> list[str]:
    tokens = [strip_tags(w) for w in words]
    tagged = [t for t in tokens if SEPARATOR in t]
    if tagged:
        raise PipelineRuntimeError(f"Scored tokens still carry accent tags: {tagged[:5]}")
    return tokens


def wer(reference: Sequence[str], hypothesis: Sequence[str]) -> tuple[int, int, int, int]:
    ops = align_words(_scoring_tokens(reference), _scoring_tokens(hypothesis))
    tally = Counter(op.kind for op in ops)
    return tally["sub"], tally["del"], tally["ins"], len(reference)


def _wer_counts(s: int, d: int, i: int, n: int) -> WerCounts:
    return WerCounts(substitutions=s, deletions=d, insertions=i, reference_words=n, wer=_percent(s + d + i, n))


def wer_report(
    results: Iterable[DecodeResult],
    references: Mapping[str, Sequence[str]],
    gold: Mapping[str, AccentId | str],
) -> WerReport:
    per_accent: dict[str, list[int]] = defaultdict(lambda: [0, 0, 0, 0])
    missing = []
    for result in results:
        if result.utterance_id not in references or result.utterance_id not in gold:
            missing.append(result.utterance_id)
            continue
        counts = wer(references[result.utterance_id], result.words)
        row = per_accent[_code(gold[result.utterance_id])]
        for k, value in enumerate(counts):
            row[k] += value
    if missing:
        raise MissingGoldError(missing)

    pooled = [sum(row[k] for row in per_accent.values()) for k in range(4)]
    rows = {code: _wer_counts(*row) for code, row in sorted(per_accent.items())}
    defined = [r.wer for r in rows.values() if r.wer is not None]
    return WerReport(
        per_accent=rows,
        pooled=_wer_counts(*pooled),
        mean_of_means=sum(defined) / len(defined) if defined else None,
    )


# Accent accuracy


def _scored(
    decisions: Iterable[AccentDecision],
    gold: Mapping[str, AccentId | str],
    excluded: Iterable[str],
) -> list[tuple[AccentDecision, str]]:
    decisions = list(decisions)
    missing = [d.utterance_id for d in decisions if d.utterance_id not in gold]
    if missing:
        raise MissingGoldError(missing)
    skip = set(excluded)
    return [(d, _code(gold[d.utterance_id])) for d in decisions if _code(gold[d.utterance_id]) not in skip]


def accent_accuracy(
    decisions: Iterable[AccentDecision],
    gold: Mapping[str, AccentId | str],
    excluded: Iterable[str] = (),
) -> AccuracyReport:
    excluded = sorted(set(excluded))
    scored = _scored(decisions, gold, excluded)
    tallies: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    for decision, truth in scored:
        tallies[truth][0] += decision.accent == truth
        tallies[truth][1] += 1
    rows = {
        code: AccuracyRow(correct=c, total=t, accuracy=_percent(c, t)) for code, (c, t) in sorted(tallies.items())
    }
    correct = sum(r.correct for r in rows.values())
    total = sum(r.total for r in rows.values())
    defined = [r.accuracy for r in rows.values() if r.accuracy is not None]
    return AccuracyReport(
        per_accent=rows,
        pooled=AccuracyRow(correct=correct, total=total, accuracy=_percent(correct, total)),
        mean_of_means=sum(defined) / len(defined) if defined else None,
        excluded_accents=excluded,
        undecidable=sum(d.undecidable for d, _ in scored),
        tied=sum(d.tied for d, _ in scored),
    )


def confusion(
    decisions: Iterable[AccentDecision],
    gold: Mapping[str, AccentId | str],
    labels: Sequence[str] | None = None,
    excluded: Iterable[str] = (),
) -> ConfusionMatrix:
    scored = _scored(decisions, gold, excluded)
    if labels is None:
        labels = sorted({truth for _, truth in scored} | {d.accent for d, _ in scored if d.accent is not None})
    labels = list(labels)
    index = {code: k for k, code in enumerate(labels)}
    counts = [[0] * len(labels) for _ in labels]
    undecided = [0] * len(labels)
    totals = [0] * len(labels)
    for decision, truth in scored:
        if truth not in index:
            continue
        row = index[truth]
        totals[row] += 1
        if decision.accent is None or decision.accent not in index:
            undecided[row] += 1
        else:
            counts[row][index[decision.accent]] += 1
    return ConfusionMatrix(
        labels=labels,
        matrix=[[_percent(c, totals[r]) for c in counts[r]] for r in range(len(labels))],
        undecided=[_percent(undecided[r], totals[r]) for r in range(len(labels))],
        row_totals=totals,
    )


def check_consistency(matrix: ConfusionMatrix, accuracy: AccuracyReport) -> None:
    """Rows (with the undecided column) sum to 100 and the diagonal equals per-accent accuracy."""
    for r, code in enumerate(matrix.labels):
        if not matrix.row_totals[r]:
            continue
        row_sum = sum(v or 0.0 for v in matrix.matrix[r]) + (matrix.undecided[r] or 0.0)
        if abs(row_sum - 100.0) > CONSISTENCY_TOLERANCE:
            raise PipelineRuntimeError(f"Confusion row {code} sums to {row_sum:.4f}")
        expected = accuracy.per_accent[code].accuracy if code in accuracy.per_accent else None
        if expected is None or abs((matrix.matrix[r][r] or 0.0) - expected) > CONSISTENCY_TOLERANCE:
            raise PipelineRuntimeError(f"Confusion diagonal for {code} disagrees with accuracy {expected}")


# Word-level accent ranking


def word_accent_ranking(
    results: Iterable[DecodeResult],
    references: Mapping[str, Sequence[str]],
    gold: Mapping[str, AccentId | str],
    min_count: int = 20,
    top_k: int = 10,
    excluded: Iterable[str] = (),
) -> WordRanking:
    skip = set(excluded)
    occurrences: Counter = Counter()
    correct: Counter = Counter()
    for result in results:
        truth = gold.get(result.utterance_id)
        reference = references.get(result.utterance_id)
        if truth is None or reference is None:
            raise MissingGoldError([result.utterance_id])
        truth = _code(truth)
        if truth in skip:
            continue
        ref_tokens = _scoring_tokens(reference)
        for op in align_words(ref_tokens, _scoring_tokens(result.words)):
            if op.kind != "match":
                continue
            word = ref_tokens[op.ref_index]
            occurrences[word] += 1
            correct[word] += result.word_accents[op.hyp_index] == truth

    stats = [
        WordAccentStats(
            word=word,
            occurrences=count,
            correct=correct[word],
            accuracy=correct[word] / count,
            length=len(word),
        )
        for word, count in occurrences.items()
        if count >= min_count
    ]
    if not stats:
        log_event(logger, "word_ranking_empty", level=logging.WARNING, min_count=min_count, words_seen=len(occurrences))
    top = sorted(stats, key=lambda s: (-s.accuracy, -s.occurrences, s.word))[:top_k]
    bottom = sorted(stats, key=lambda s: (s.accuracy, -s.occurrences, s.word))[:top_k]
    return WordRanking(
        min_count=min_count,
        eligible_words=len(stats),
        top=top,
        bottom=bottom,
        top_average_length=sum(s.length for s in top) / len(top) if top else None,
        bottom_average_length=sum(s.length for s in bottom) / len(bottom) if bottom else None,
    )


def purity_rate(results: Iterable[DecodeResult]) -> Optional[float]:
    """Fraction of decodes with at least one word whose words all carry the same accent."""
    voiced = [r for r in results if r.words]
    if not voiced:
        return None
    pure = sum(1 for r in voiced if len(set(r.word_accents)) == 1)
    return pure / len(voiced)


# Corpus statistics


def corpus_stats(corpus: Corpus) -> CorpusStatsReport:
    splits = {}
    for name, part in corpus.splits.items():
        seconds = [part.features[utt].seconds for utt in part.ids()]
        words = [len(part.transcripts[utt]) for utt in part.ids()]
        count = len(seconds)
        histogram = [0] * (int(math.floor(max(seconds))) + 1 if seconds else 0)
        for value in seconds:
            histogram[int(math.floor(value))] += 1
        splits[name] = SplitStats(
            utterances=count,
            hours=sum(seconds) / 3600.0,
            average_words=sum(words) / count if count else 0.0,
            average_seconds=sum(seconds) / count if count else 0.0,
            histogram=histogram,
        )
    return CorpusStatsReport(splits=splits)


def evaluate(
    method: str,
    results: Sequence[DecodeResult],
    decisions: Sequence[AccentDecision],
    references: Mapping[str, Sequence[str]],
    gold: Mapping[str, AccentId | str],
    *,
    accents: Sequence[str] | None = None,
    excluded: Iterable[str] = (),
    min_count: int = 20,
    top_k: int = 10,
    corpus: Corpus | None = None,
) -> EvaluationReport:
    excluded = list(excluded)
    accuracy = accent_accuracy(decisions, gold, excluded)
    labels = [a for a in accents if a not in set(excluded)] if accents is not None else None
    matrix = confusion(decisions, gold, labels, excluded)
    check_consistency(matrix, accuracy)
    return EvaluationReport(
        method=method,
        wer=wer_report(results, references, gold),
        acc=accuracy,
        confusion=matrix,
        word_ranking=word_accent_ranking(results, references, gold, min_count, top_k, excluded),
        corpus_stats=corpus_stats(corpus) if corpus is not None else None,
        purity_rate=purity_rate(results),
    )


# Text tables


def _fmt(value: Optional[float], digits: int = 2) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(cell)) for cell in column) for column in zip(header, *rows)]
    lines = ["  ".join(str(cell).rjust(w) for cell, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(str(cell).rjust(w) for cell, w in zip(row, widths)) for row in rows)
    return "\n".join(lines)


def render_corpus_stats(report: CorpusStatsReport) -> str:
    rows = [
        [name, str(s.utterances), _fmt(s.hours), _fmt(s.average_words), _fmt(s.average_seconds)]
        for name, s in report.splits.items()
    ]
    table = _table(["split", "utts", "hours", "words/utt", "sec/utt"], rows)
    histograms = [
        f"{name} length histogram (1 s bins): {' '.join(str(c) for c in s.histogram)}"
        for name, s in report.splits.items()
    ]
    return "\n".join([table, *histograms])


def render_method_rows(reports: Mapping[str, EvaluationReport], accents: Sequence[str]) -> str:
    """Average first, then one column per accent, for WER and accuracy of every method."""
    header = ["method", "metric", "AVE", *accents]
    rows = []
    for method, report in reports.items():
        wer_cells = [_fmt(report.wer.per_accent[a].wer) if a in report.wer.per_accent else "-" for a in accents]
        acc_cells = [_fmt(report.acc.per_accent[a].accuracy) if a in report.acc.per_accent else "-" for a in accents]
        rows.append([method, "WER%", _fmt(report.wer.pooled.wer), *wer_cells])
        rows.append([method, "ACC%", _fmt(report.acc.pooled.accuracy), *acc_cells])
    return _table(header, rows)


def render_confusion(matrix: ConfusionMatrix) -> str:
    header = ["true\\pred", *matrix.labels, "undecided", "n"]
    rows = [
        [code, *(_fmt(v) for v in matrix.matrix[r]), _fmt(matrix.undecided[r]), str(matrix.row_totals[r])]
        for r, code in enumerate(matrix.labels)
    ]
    return _table(header, rows)


def render_word_ranking(ranking: WordRanking) -> str:
    def block(title: str, items: Sequence[WordAccentStats], average: Optional[float]) -> str:
        rows = [[s.word, str(s.occurrences), _fmt(100.0 * s.accuracy), str(s.length)] for s in items]
        rows.append(["Ave. length", "", "", _fmt(average, 1)])
        return f"{title}\n" + _table(["word", "count", "ACC%", "len"], rows)

    return "\n\n".join(
        [
            block(f"Highest accent accuracy (min count {ranking.min_count})", ranking.top, ranking.top_average_length),
            block(f"Lowest accent accuracy (min count {ranking.min_count})", ranking.bottom, ranking.bottom_average_length),
        ]
    )


def render_density_sweep(rows: Sequence[DensitySweepRow]) -> str:
    return _table(
        ["comp/state", "#densities", "method", "WER%", "ACC%"],
        [[str(r.components_per_state), str(r.total_densities), r.method, _fmt(r.wer), _fmt(r.acc)] for r in rows],
    )


def render_shift_sweep(rows: Sequence[ShiftSweepRow]) -> str:
    return _table(
        ["accent_shift", "oracle frame ACC%", "method", "WER%", "ACC%"],
        [
            [_fmt(r.accent_shift, 1), _fmt(100.0 * r.oracle_frame_accuracy), r.method, _fmt(r.wer), _fmt(r.acc)]
            for r in rows
        ],
    )
