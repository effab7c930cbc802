from django.core.exceptions import ValidationError


class DiagnosisError(ValidationError):
    """Base error of the engine. ``code`` names the failure kind, ``params``
    carries the details (line numbers, identifiers, ...)."""

    default_code = 'invalid'

    def __init__(self, message, code=None, params=None):
        super().__init__(message, code=code or self.default_code, params=params or {})

    @property
    def text(self):
        """The message with its params interpolated."""
        return self.messages[0]

    def __str__(self):
        return self.text


class TelemetryError(DiagnosisError):
    default_code = 'invalid_record'


class IngestionError(DiagnosisError):
    default_code = 'malformed_line'


class ForecasterError(DiagnosisError):
    default_code = 'insufficient_history'


class TemplateError(DiagnosisError):
    default_code = 'invalid_template'


class BackendError(DiagnosisError):
    default_code = 'backend_failure'


class StructuredReplyError(DiagnosisError):
    default_code = 'parse_failure'


class EvaluationError(DiagnosisError):
    default_code = 'empty_input'


class ConfigurationError(DiagnosisError):
    default_code = 'invalid_config'


def flatten_detail(detail):
    """Render a DRF error detail (dict/list nesting) as one line."""
    if isinstance(detail, dict):
        return '; '.join(f'{key}: {flatten_detail(value)}' for key, value in detail.items())
    if isinstance(detail, (list, tuple)):
        return ', '.join(flatten_detail(item) for item in detail)
    return str(detail)
