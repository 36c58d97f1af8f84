from __future__ import annotations

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class JointAccentError(Exception):
    exit_code = EXIT_RUNTIME


class InputValidationError(JointAccentError):
    exit_code = EXIT_VALIDATION


class PipelineRuntimeError(JointAccentError):
    exit_code = EXIT_RUNTIME


class ConfigError(InputValidationError):
    pass


class OutputExistsError(InputValidationError):
    pass


# lexicon_forge


class InvalidWordError(InputValidationError):
    def __init__(self, word: str, reason: str, character: str | None = None) -> None:
        self.word = word
        self.character = character
        super().__init__(f"Invalid word {word!r}: {reason}")


class DoubleTaggingError(InputValidationError):
    pass


class GraphemeParseError(InputValidationError):
    pass


class LexiconValidationError(InputValidationError):
    pass


# ngram_lm


class EmptyCorpusError(InputValidationError):
    pass


class ArpaFormatError(InputValidationError):
    def __init__(self, line_no: int, message: str) -> None:
        self.line_no = line_no
        super().__init__(f"ARPA line {line_no}: {message}")


class AuditNotApplicableError(InputValidationError):
    pass


# acoustic_model


class DuplicateUnitError(InputValidationError):
    pass


class DimensionMismatchError(InputValidationError):
    pass


class FeatureArchiveError(InputValidationError):
    pass


class AlignmentInfeasibleError(PipelineRuntimeError):
    pass


class EmMonotonicityError(PipelineRuntimeError):
    pass


# decoder


class GraphMismatchError(InputValidationError):
    pass


class EmptyFeaturesError(InputValidationError):
    pass


class ExhaustiveGuardError(InputValidationError):
    pass


class ScoreMismatchError(InputValidationError):
    pass


class NoPathError(PipelineRuntimeError):
    def __init__(self, utterance_id: str, frame: int, active_tokens: int, beam: float) -> None:
        self.utterance_id = utterance_id
        self.frame = frame
        self.active_tokens = active_tokens
        self.beam = beam
        super().__init__(
            f"No surviving path for {utterance_id!r} at frame {frame} "
            f"({active_tokens} active tokens, beam={beam})"
        )


# accent_decision / eval_suite


class EmptyVoteError(InputValidationError):
    pass


class UndecidableAccentError(InputValidationError):
    def __init__(self, utterance_id: str) -> None:
        self.utterance_id = utterance_id
        super().__init__(f"Utterance {utterance_id!r} decoded to silence only; accent is undecidable")


class MissingGoldError(InputValidationError):
    def __init__(self, utterance_ids: list[str]) -> None:
        self.utterance_ids = sorted(utterance_ids)
        preview = ", ".join(self.utterance_ids[:10])
        more = "" if len(self.utterance_ids) <= 10 else f" (+{len(self.utterance_ids) - 10} more)"
        super().__init__(f"Missing gold accent for: {preview}{more}")


# synth_corpus


class CorpusValidationError(InputValidationError):
    def __init__(self, message: str, utterance_ids: list[str] | None = None) -> None:
        self.utterance_ids = sorted(utterance_ids or [])
        if self.utterance_ids:
            message = f"{message}: {', '.join(self.utterance_ids)}"
        super().__init__(message)
