from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from accent_decision import AccentDecision, Granularity, decide_batch, read_decisions, write_decisions
from acoustic_model import (
    AcousticModel,
    IterationStats,
    flat_start,
    load_model,
    save_model,
    train_for_components,
)
from decoder import DecodeResult, decode_batch, graph_spec, read_decode_results, write_decode_results
from errors import InputValidationError, OutputExistsError
from eval_suite import (
    accent_accuracy,
    confusion,
    corpus_stats,
    evaluate,
    render_confusion,
    render_corpus_stats,
    render_density_sweep,
    render_method_rows,
    render_shift_sweep,
    render_word_ranking,
    word_accent_ranking,
)
from event_log import log_event
from lexicon_forge import (
    SILENCE_UNIT,
    AccentId,
    Lexicon,
    LexiconKind,
    build_base_lexicon,
    build_mono_decode_lexicon,
    build_multi_decode_lexicon,
    build_training_lexicon,
    read_accent_inventory,
    read_lexicon,
    resolve_accents,
    tag_word,
    write_accent_inventory,
    write_lexicon,
)
from ngram_lm import CrossAccentAudit, LmMode, NGramModel, audit_cross_accent, perplexity, read_arpa, train_trigram, write_arpa
from schemas import ComparisonReport, DensitySweepRow, EvaluationReport, RunConfig, ShiftSweepRow
from synth_corpus import Corpus, generate, generate_with_truth, load_corpus, oracle_frame_accent_accuracy, save_corpus, spec_from_settings

logger = logging.getLogger(__name__)

METHODS = ("mono", "multi")
_LEXICON_FILES = {
    LexiconKind.BASE: "lexicon_base.txt",
    LexiconKind.TRAINING: "lexicon_train.txt",
    LexiconKind.MONO_DECODE: "lexicon_mono.txt",
    LexiconKind.MULTI_DECODE: "lexicon_multi.txt",
}


@dataclass(frozen=True)
class Workspace:
    root: Path

    @classmethod
    def for_config(cls, config: RunConfig) -> Workspace:
        return cls(Path(config.output_dir))

    def _dir(self, name: str) -> Path:
        path = self.root / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    @property
    def corpus(self) -> Path:
        return self.root / "corpus"

    @property
    def lang(self) -> Path:
        return self._dir("lang")

    @property
    def lm(self) -> Path:
        return self._dir("lm")

    @property
    def am(self) -> Path:
        return self._dir("am")

    @property
    def decode(self) -> Path:
        return self._dir("decode")

    @property
    def reports(self) -> Path:
        return self._dir("reports")

    @property
    def logs(self) -> Path:
        return self._dir("logs")

    def lexicon_path(self, kind: LexiconKind) -> Path:
        return self.lang / _LEXICON_FILES[kind]

    def arpa_path(self, mode: str) -> Path:
        return self.lm / f"{mode}.arpa"

    def model_path(self, components: int | None = None) -> Path:
        return self.am / ("model.json" if components is None else f"model_c{components}.json")

    def decode_path(self, method: str, tag: str = "") -> Path:
        return self.decode / f"{method}{tag}.jsonl"

    def decisions_path(self, method: str) -> Path:
        return self.reports / f"decisions_{method}.tsv"


def _guard_output(paths: Sequence[Path], force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise OutputExistsError(f"Refusing to overwrite {', '.join(existing)} (pass --force)")


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise InputValidationError(f"Missing input {path}; run `{produced_by}` first")
    return path


def _write_json(path: Path, payload) -> None:
    if hasattr(payload, "model_dump"):
        payload = payload.model_dump(mode="json")
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def training_accents(config: RunConfig) -> list[AccentId]:
    return resolve_accents(config.corpus.accents)


# Corpus


def synth(config: RunConfig, *, force: bool = False) -> Path:
    workspace = Workspace.for_config(config)
    _guard_output([workspace.corpus / "train" / "feats.bin"], force)
    corpus = generate(spec_from_settings(config.corpus, config.seed, config.lexicon.alphabet))
    save_corpus(corpus, workspace.corpus)
    log_event(logger, "synth_done", path=str(workspace.corpus), utterances={k: len(v) for k, v in corpus.splits.items()})
    return workspace.corpus


def load_run_corpus(config: RunConfig) -> Corpus:
    if config.corpus.path:
        return load_corpus(config.corpus.path, config.corpus.frame_shift_seconds)
    workspace = Workspace.for_config(config)
    _require(workspace.corpus, "synth")
    return load_corpus(workspace.corpus, config.corpus.frame_shift_seconds)


def stats(config: RunConfig, *, force: bool = False) -> Path:
    workspace = Workspace.for_config(config)
    target = workspace.reports / "corpus_stats.json"
    _guard_output([target], force)
    report = corpus_stats(load_run_corpus(config))
    _write_json(target, report)
    (workspace.reports / "corpus_stats.txt").write_text(render_corpus_stats(report) + "\n", encoding="utf-8")
    return target


# Lexicons and LMs


def corpus_vocabulary(corpus: Corpus) -> list[str]:
    return sorted({w for part in corpus.splits.values() for words in part.transcripts.values() for w in words})


def prep_lexicon(config: RunConfig, *, force: bool = False) -> dict[str, Path]:
    workspace = Workspace.for_config(config)
    paths = {kind.value: workspace.lexicon_path(kind) for kind in LexiconKind}
    _guard_output(list(paths.values()), force)
    vocab = corpus_vocabulary(load_run_corpus(config))
    accents = training_accents(config)
    alphabet = config.lexicon.alphabet
    write_lexicon(build_base_lexicon(vocab, alphabet), paths[LexiconKind.BASE.value])
    write_lexicon(build_training_lexicon(vocab, accents, alphabet), paths[LexiconKind.TRAINING.value])
    write_lexicon(build_mono_decode_lexicon(vocab, accents, alphabet), paths[LexiconKind.MONO_DECODE.value])
    write_lexicon(build_multi_decode_lexicon(vocab, accents, alphabet), paths[LexiconKind.MULTI_DECODE.value])
    write_accent_inventory(accents, workspace.lang / "accents.tsv")
    log_event(logger, "lexicons_written", words=len(vocab), accents=[a.code for a in accents])
    return paths


def load_lexicon(config: RunConfig, kind: LexiconKind) -> Lexicon:
    workspace = Workspace.for_config(config)
    path = _require(workspace.lexicon_path(kind), "prep-lexicon")
    accents = read_accent_inventory(_require(workspace.lang / "accents.tsv", "prep-lexicon"))
    return read_lexicon(path, kind, accents)


def train_lm(config: RunConfig, modes: Sequence[str] | None = None, *, force: bool = False) -> dict[str, Path]:
    workspace = Workspace.for_config(config)
    modes = list(modes or config.lm.modes)
    targets = {mode: workspace.arpa_path(mode) for mode in modes}
    _guard_output(list(targets.values()), force)
    corpus = load_run_corpus(config)
    vocabulary = load_lexicon(config, LexiconKind.BASE).words()
    for mode in modes:
        model = train_trigram(corpus.text_corpus("train"), mode, config.lm, vocabulary=vocabulary, workers=config.threads)
        targets[mode].write_text(write_arpa(model), encoding="utf-8")
        summary = {"mode": mode, "ngrams": [len(t) for t in model.tables]}
        if "dev" in corpus.splits:
            dev = corpus.text_corpus("dev").utterances
            if LmMode(mode) is LmMode.MULTI:
                sentences = [[tag_word(w, u.accent) for w in u.words] for u in dev]
            else:
                sentences = [list(u.words) for u in dev]
            summary["dev_perplexity"] = perplexity(model, sentences)
        if LmMode(mode) is LmMode.MULTI:
            summary["cross_accent_ngrams"] = audit_cross_accent(model).count
        _write_json(workspace.lm / f"{mode}_summary.json", summary)
        log_event(logger, "lm_trained", **summary)
    return targets


def load_lm(config: RunConfig, mode: str) -> NGramModel:
    path = _require(Workspace.for_config(config).arpa_path(mode), f"train-lm --mode {mode}")
    return read_arpa(path.read_text(encoding="utf-8"))


def audit_lm(config: RunConfig, arpa: str | Path | None = None, *, force: bool = False) -> CrossAccentAudit:
    workspace = Workspace.for_config(config)
    path = Path(arpa) if arpa else workspace.arpa_path("multi")
    audit = audit_cross_accent(read_arpa(_require(path, "train-lm --mode multi").read_text(encoding="utf-8")))
    target = workspace.reports / "lm_audit.json"
    _guard_output([target], force)
    _write_json(target, {"arpa": str(path), "count": audit.count, "offenders": [" ".join(n) for n in audit.offenders[:100]]})
    log_event(logger, "lm_audit", arpa=str(path), cross_accent_ngrams=audit.count)
    return audit


# Acoustic model


def training_transcript(lexicon: Lexicon, words: Sequence[str], accent: AccentId) -> list[str]:
    units = [SILENCE_UNIT]
    for word in words:
        units.extend(lexicon.pronunciations(tag_word(word, accent))[0].phones)
    units.append(SILENCE_UNIT)
    return units


def train_am(
    config: RunConfig,
    components: int | None = None,
    *,
    force: bool = False,
    corpus: Corpus | None = None,
) -> tuple[AcousticModel, Path]:
    workspace = Workspace.for_config(config)
    target = workspace.model_path(components)
    _guard_output([target], force)
    components = components or config.am.components
    corpus = corpus or load_run_corpus(config)
    lexicon = load_lexicon(config, LexiconKind.TRAINING)
    train = corpus.split("train")
    data = [
        (train.features[utt], training_transcript(lexicon, train.transcripts[utt], train.accents[utt]))
        for utt in train.ids()
    ]
    model = flat_start(
        [*lexicon.units(), SILENCE_UNIT],
        config.am,
        dim=config.corpus.feature_dim,
        features=(train.features[utt] for utt in train.ids()),
    )
    history: list[IterationStats] = []
    model = train_for_components(
        model, data, components, config.am.iterations_per_level, config.am, workers=config.threads, history=history
    )
    save_model(model, target)
    _write_json(
        target.with_suffix(".history.json"),
        [{"iteration": h.iteration, "components_per_state": h.components_per_state, "log_likelihood": h.log_likelihood} for h in history],
    )
    log_event(logger, "am_trained", path=str(target), total_densities=model.total_densities)
    return model, target


# Decoding and scoring


def _decode_lexicon_kind(method: str) -> LexiconKind:
    return LexiconKind.MULTI_DECODE if method == "multi" else LexiconKind.MONO_DECODE


def run_decode(
    config: RunConfig,
    method: str,
    *,
    force: bool = False,
    model: AcousticModel | None = None,
    corpus: Corpus | None = None,
    tag: str = "",
) -> list[DecodeResult]:
    workspace = Workspace.for_config(config)
    target = workspace.decode_path(method, tag)
    _guard_output([target], force)
    model = model or load_model(_require(workspace.model_path(), "train-am"))
    corpus = corpus or load_run_corpus(config)
    spec = graph_spec(load_lexicon(config, _decode_lexicon_kind(method)), load_lm(config, method), config.decoder)
    part = corpus.split(config.decoder.split)
    features = [part.features[utt] for utt in part.ids()]
    results = decode_batch(
        model, spec, features, config.decoder.beam, config.decoder.max_active, workers=config.threads
    )
    write_decode_results(results, target)
    return results


def decide_accent(
    config: RunConfig,
    method: str,
    *,
    force: bool = False,
    results: Sequence[DecodeResult] | None = None,
) -> list[AccentDecision]:
    workspace = Workspace.for_config(config)
    target = workspace.decisions_path(method)
    _guard_output([target], force)
    if results is None:
        results = read_decode_results(_require(workspace.decode_path(method), f"decode --method {method}"))
    decisions = decide_batch(results, Granularity(config.decision.granularity))
    write_decisions(decisions, target)
    return decisions


def _gold(corpus: Corpus, split: str) -> tuple[dict[str, tuple[str, ...]], dict[str, str]]:
    part = corpus.split(split)
    return dict(part.transcripts), {utt: accent.code for utt, accent in part.accents.items()}


def _load_decisions(config: RunConfig, method: str) -> list[AccentDecision]:
    path = Workspace.for_config(config).decisions_path(method)
    return read_decisions(_require(path, f"decide-accent --method {method}"))


def score(
    config: RunConfig,
    method: str,
    *,
    force: bool = False,
    corpus: Corpus | None = None,
    results: Sequence[DecodeResult] | None = None,
    decisions: Sequence[AccentDecision] | None = None,
) -> EvaluationReport:
    workspace = Workspace.for_config(config)
    target = workspace.reports / f"score_{method}.json"
    _guard_output([target], force)
    corpus = corpus or load_run_corpus(config)
    if results is None:
        results = read_decode_results(_require(workspace.decode_path(method), f"decode --method {method}"))
    decisions = decisions if decisions is not None else _load_decisions(config, method)
    references, gold = _gold(corpus, config.decoder.split)
    report = evaluate(
        method,
        results,
        decisions,
        references,
        gold,
        accents=config.corpus.accents,
        excluded=config.decision.excluded_accents,
        min_count=config.decision.min_count,
        top_k=config.decision.top_k,
        corpus=corpus,
    )
    _write_json(target, report)
    (workspace.reports / f"score_{method}.txt").write_text(
        render_method_rows({method: report}, config.corpus.accents) + "\n", encoding="utf-8"
    )
    log_event(
        logger,
        "scored",
        method=method,
        wer=report.wer.pooled.wer,
        acc=report.acc.pooled.accuracy,
        purity_rate=report.purity_rate,
    )
    return report


def confusion_report(config: RunConfig, method: str, *, force: bool = False) -> Path:
    workspace = Workspace.for_config(config)
    target = workspace.reports / f"confusion_{method}.json"
    _guard_output([target], force)
    _, gold = _gold(load_run_corpus(config), config.decoder.split)
    excluded = config.decision.excluded_accents
    labels = [a for a in config.corpus.accents if a not in excluded]
    decisions = _load_decisions(config, method)
    matrix = confusion(decisions, gold, labels, excluded)
    _write_json(target, {"confusion": matrix.model_dump(), "acc": accent_accuracy(decisions, gold, excluded).model_dump()})
    (workspace.reports / f"confusion_{method}.txt").write_text(render_confusion(matrix) + "\n", encoding="utf-8")
    return target


def word_accent_report(config: RunConfig, method: str, *, force: bool = False) -> Path:
    workspace = Workspace.for_config(config)
    target = workspace.reports / f"word_accent_{method}.json"
    _guard_output([target], force)
    references, gold = _gold(load_run_corpus(config), config.decoder.split)
    results = read_decode_results(_require(workspace.decode_path(method), f"decode --method {method}"))
    ranking = word_accent_ranking(
        results,
        references,
        gold,
        config.decision.min_count,
        config.decision.top_k,
        config.decision.excluded_accents,
    )
    _write_json(target, ranking)
    (workspace.reports / f"word_accent_{method}.txt").write_text(render_word_ranking(ranking) + "\n", encoding="utf-8")
    return target


# Experiments


def _evaluate_methods(
    config: RunConfig,
    corpus: Corpus,
    model: AcousticModel,
    *,
    force: bool,
    tag: str = "",
) -> dict[str, EvaluationReport]:
    reports = {}
    references, gold = _gold(corpus, config.decoder.split)
    for method in config.lm.modes:
        results = run_decode(config, method, force=force, model=model, corpus=corpus, tag=tag)
        decisions = decide_batch(results, Granularity(config.decision.granularity))
        reports[method] = evaluate(
            method,
            results,
            decisions,
            references,
            gold,
            accents=config.corpus.accents,
            excluded=config.decision.excluded_accents,
            min_count=config.decision.min_count,
            top_k=config.decision.top_k,
        )
    return reports


def sweep_density(
    config: RunConfig,
    *,
    force: bool = False,
    corpus: Corpus | None = None,
    trained: Mapping[int, AcousticModel] | None = None,
) -> list[DensitySweepRow]:
    """Trains and scores one model per density; models in trained are reused as they are."""
    workspace = Workspace.for_config(config)
    target = workspace.reports / "density_sweep.json"
    _guard_output([target], force)
    corpus = corpus or load_run_corpus(config)
    rows = []
    for components in config.am.density_sweep:
        if trained and components in trained:
            model = trained[components]
            log_event(logger, "density_model_reused", components_per_state=components)
        else:
            model, _ = train_am(config, components, force=True, corpus=corpus)
        reports = _evaluate_methods(config, corpus, model, force=True, tag=f"_c{components}")
        for method, report in reports.items():
            rows.append(
                DensitySweepRow(
                    components_per_state=components,
                    total_densities=model.total_densities,
                    method=method,
                    wer=report.wer.pooled.wer,
                    acc=report.acc.pooled.accuracy,
                )
            )
    _write_json(target, [r.model_dump() for r in rows])
    (workspace.reports / "density_sweep.txt").write_text(render_density_sweep(rows) + "\n", encoding="utf-8")
    return rows


def sweep_shift(config: RunConfig, *, force: bool = False) -> list[ShiftSweepRow]:
    workspace = Workspace.for_config(config)
    target = workspace.reports / "shift_sweep.json"
    _guard_output([target], force)
    rows = []
    for shift in config.corpus.shift_sweep:
        sub_config = config.model_copy(
            update={
                "corpus": config.corpus.model_copy(update={"accent_shift": shift, "path": None}),
                "output_dir": str(workspace.root / "sweeps" / f"shift_{shift:g}"),
            }
        )
        spec = spec_from_settings(sub_config.corpus, sub_config.seed, sub_config.lexicon.alphabet)
        corpus, truth = generate_with_truth(spec)
        save_corpus(corpus, Workspace.for_config(sub_config).corpus)
        oracle = oracle_frame_accent_accuracy(spec, corpus, truth, sub_config.decoder.split)
        prep_lexicon(sub_config, force=True)
        train_lm(sub_config, force=True)
        model, _ = train_am(sub_config, force=True, corpus=corpus)
        for method, report in _evaluate_methods(sub_config, corpus, model, force=True).items():
            rows.append(
                ShiftSweepRow(
                    accent_shift=shift,
                    oracle_frame_accuracy=oracle,
                    method=method,
                    wer=report.wer.pooled.wer,
                    acc=report.acc.pooled.accuracy,
                )
            )
        log_event(logger, "shift_point_done", accent_shift=shift, oracle_frame_accuracy=round(oracle, 4))
    _write_json(target, [r.model_dump() for r in rows])
    (workspace.reports / "shift_sweep.txt").write_text(render_shift_sweep(rows) + "\n", encoding="utf-8")
    return rows


def run_all(config: RunConfig, *, force: bool = False) -> ComparisonReport:
    workspace = Workspace.for_config(config)
    target = workspace.reports / "comparison.json"
    _guard_output([target], force)
    if not config.corpus.path:
        synth(config, force=force)
    corpus = load_run_corpus(config)
    prep_lexicon(config, force=force)
    train_lm(config, force=force)
    model, _ = train_am(config, force=force, corpus=corpus)

    reports = {}
    for method in config.lm.modes:
        results = run_decode(config, method, force=force, model=model, corpus=corpus)
        decisions = decide_accent(config, method, force=force, results=results)
        reports[method] = score(config, method, force=force, corpus=corpus, results=results, decisions=decisions)
        matrix = reports[method].confusion
        (workspace.reports / f"confusion_{method}.txt").write_text(render_confusion(matrix) + "\n", encoding="utf-8")
        (workspace.reports / f"word_accent_{method}.txt").write_text(
            render_word_ranking(reports[method].word_ranking) + "\n", encoding="utf-8"
        )

    density = sweep_density(config, force=force, corpus=corpus, trained={config.am.components: model})
    stats_report = corpus_stats(corpus)
    comparison = ComparisonReport(
        accents=config.corpus.accents,
        methods=reports,
        corpus_stats=stats_report,
        density_sweep=density,
    )
    _write_json(target, comparison)
    purity = "\n".join(
        f"{method} purity rate: {'-' if r.purity_rate is None else f'{100.0 * r.purity_rate:.2f}%'}"
        for method, r in reports.items()
    )
    text = "\n\n".join(
        [
            render_corpus_stats(stats_report),
            render_method_rows(reports, config.corpus.accents),
            purity,
            render_density_sweep(density),
        ]
    )
    (workspace.reports / "comparison.txt").write_text(text + "\n", encoding="utf-8")
    log_event(logger, "run_all_done", report=str(target))
    return comparison
