"""Exception hierarchy. Validation problems exit the CLI with code 1, I/O with 2."""


class UselabError(Exception):
    pass


class ValidationError(UselabError, ValueError):
    pass


class AudioFormatError(ValidationError):
    pass


class ManifestError(ValidationError):
    pass


class UndefinedCorrelationError(ValidationError):
    pass
