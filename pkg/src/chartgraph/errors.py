"""Exception hierarchy shared by all chartgraph modules."""


class ChartGraphError(Exception):
    """Base class for all chartgraph errors."""


class MalformedInput(ChartGraphError):
    """Input bytes are not syntactically valid (e.g. broken JSON)."""


class SchemaViolation(ChartGraphError):
    """Input parsed but violates a structural invariant; message names the field."""


class EmptyAnnotation(ChartGraphError):
    """Graph construction requires at least one chart object."""


class NoCandidate(ChartGraphError):
    """Nearest-object query over an empty candidate set."""


class InvalidDistance(ChartGraphError):
    """Edge coefficient requested for a negative or non-finite distance."""


class ShapeMismatch(ChartGraphError):
    """Matrix shapes inconsistent with the operation's contract."""


class NonFiniteInput(ChartGraphError):
    """A feature matrix contains NaN or infinity."""


class MissingEmbedding(ChartGraphError):
    """External embedding table has no entry for a requested text."""


class ZeroLengthText(ChartGraphError):
    """Cannot embed an empty string."""


class MissingLabelNode(ChartGraphError):
    """Textual graph lacks a label node for an object that needs one."""


class UnknownObjectId(ChartGraphError):
    """Alignment index references an object id with no feature row."""


class TapeMismatch(ChartGraphError):
    """Backward pass invoked with a gradient that does not match its tape."""


class IndexOutOfVocab(ChartGraphError):
    """Token id outside the vocabulary."""


class LengthMismatch(ChartGraphError):
    """Parallel lists of different lengths."""


class DivergedLoss(ChartGraphError):
    """Training hit a non-finite loss."""
