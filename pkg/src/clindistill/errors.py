"""Exception taxonomy shared across the pipeline.

Exit-code mapping used by the CLI: usage=1, data=2, teacher=3, training=4.
"""


class ClinDistillError(Exception):
    """Base class for all pipeline errors."""


class ParseError(ClinDistillError):
    """Malformed input (carries line number context where applicable)."""


class SchemaError(ClinDistillError):
    """Structurally valid input violating a domain invariant."""


class SizeError(ClinDistillError):
    """Input too small/large for the requested operation."""


class TemplateError(ClinDistillError):
    """Prompt template rendered with unfilled slots."""


class OrderingError(ClinDistillError):
    """Lab rationale requested before the note rationale exists."""


class TeacherError(ClinDistillError):
    """Teacher call failed after retries (carries attempt count)."""


class TrainingError(ClinDistillError):
    """Phase contract violation or unusable training input."""
