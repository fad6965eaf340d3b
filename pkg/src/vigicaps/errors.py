"""Exception hierarchy shared by every vigicaps module.

`VigilanceError` is the domain-error root; the CLI maps it to exit code 4.
I/O-flavoured failures (`FormatError`, `ChannelMismatch`) also derive from
`IOFormatError` so the CLI can report them with exit code 3.
"""


class VigilanceError(ValueError):
    """Base class for domain errors raised by the pipeline."""


class IOFormatError(VigilanceError):
    """A file exists but cannot be interpreted."""


# dataio
class ZeroTotalDuration(VigilanceError):
    pass


class InvalidConfig(VigilanceError):
    pass


class FormatError(IOFormatError):
    pass


class ChannelMismatch(IOFormatError):
    pass


# preprocess
class NonIntegerDecimation(VigilanceError):
    pass


class WrongSampleRate(VigilanceError):
    pass


# features
class TooShort(VigilanceError):
    pass


class DimensionMismatch(VigilanceError):
    pass


# autodiff / model
class ShapeMismatch(VigilanceError):
    pass


class DoubleBackward(VigilanceError):
    pass


class NonScalarOutput(VigilanceError):
    pass


# training
class EmptyBatch(VigilanceError):
    pass


class ZeroVariance(VigilanceError):
    pass


class TooFewSamples(VigilanceError):
    pass


class TooFewParticipants(VigilanceError):
    pass


# analysis
class DegenerateGroups(VigilanceError):
    pass
