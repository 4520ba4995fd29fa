"""Exception hierarchy shared by all modules."""


class PupilFieldError(Exception):
    """Base class for all errors raised by pupilfield."""


class InputParseError(PupilFieldError):
    """A file or argument could not be parsed into a valid object."""


class DomainError(PupilFieldError, ValueError):
    """A model precondition was violated (message names the precondition)."""


class AfocalSystemError(DomainError):
    pass


class FocusAtInfinityError(DomainError):
    pass


class MisalignedConfigError(DomainError):
    """Microlens image pitch is not an integer number of pixels."""


class AlignmentError(DomainError):
    """No pixel-aligned MLA exists within the allowed perturbation."""

    def __init__(self, message, closest_d_mli=None):
        super().__init__(message)
        self.closest_d_mli = closest_d_mli
