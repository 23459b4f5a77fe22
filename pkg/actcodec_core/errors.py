"""
Exception hierarchy shared by every codec module.

Each class carries the exit code the command-line front end returns for it:
0 ok, 1 I/O, 2 validation / format, 3 numeric.
"""


class CodecError(Exception):
    exit_code = 2


class ValidationError(CodecError):
    """Bad shapes, dimension mismatches, bad configs or unknown layer ids."""


class FormatError(CodecError):
    """A file or stream does not match its documented binary format."""


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class UnsupportedDtype(FormatError):
    pass


class Truncated(FormatError):
    pass


class NonFinite(FormatError):
    pass


class CorruptStream(FormatError):
    """Bit payload that cannot be decoded with the given codebook."""


class NumericError(CodecError):
    exit_code = 3


class NonConvergence(NumericError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class BracketError(NumericError):
    pass


class DegenerateSpectrum(NumericError):
    pass
