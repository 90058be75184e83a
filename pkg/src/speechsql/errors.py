"""Exception types raised across the package."""


class SpeechSQLError(Exception):
    """Base class; the CLI maps these to exit code 2."""


# features
class InputTooShort(SpeechSQLError):
    pass


class EmptyInput(SpeechSQLError):
    pass


class FeatureFormatError(SpeechSQLError):
    pass


# dataset / schema
class MalformedSchema(SpeechSQLError):
    pass


class DuplicateDbId(SpeechSQLError):
    pass


class EmptyTranscript(SpeechSQLError):
    pass


class MalformedManifest(SpeechSQLError):
    pass


# semql
class UnknownSymbol(SpeechSQLError):
    pass


class EmptyGrammar(SpeechSQLError):
    pass


class UnsupportedSQL(SpeechSQLError):
    pass


class UnknownColumn(SpeechSQLError):
    pass


class UnknownTable(SpeechSQLError):
    pass


class IncompleteDerivation(SpeechSQLError):
    pass


class IllegalAction(SpeechSQLError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


# model
class ShapeMismatch(SpeechSQLError):
    pass


class EmptyNodeName(SpeechSQLError):
    pass


class EmptyEmbedding(SpeechSQLError):
    pass


class CompleteDerivation(SpeechSQLError):
    pass


class MaxStepsExceeded(SpeechSQLError):
    pass


# training
class BatchTooSmall(SpeechSQLError):
    pass


class EmptyExamples(SpeechSQLError):
    pass


class MissingTranscripts(SpeechSQLError):
    pass


class GoldActionMasked(SpeechSQLError):
    pass


class UnknownComponent(SpeechSQLError):
    pass


# eval
class EmptyReference(SpeechSQLError):
    pass


class CheckpointMismatch(SpeechSQLError):
    pass
