"""Exception hierarchy shared across the toolkit."""


class TripletVoiceError(Exception):
    """Base class for every error raised by this package."""


# audio
class MalformedContainer(TripletVoiceError):
    pass


class UnsupportedEncoding(TripletVoiceError):
    pass


class EmptyAudio(TripletVoiceError):
    pass


# spectrogram
class ClipTooShort(TripletVoiceError):
    pass


class OutOfRange(TripletVoiceError):
    pass


# dataset
class ParseError(TripletVoiceError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicatePath(TripletVoiceError):
    pass


class TooFewSpeakers(TripletVoiceError):
    pass


# net
class WidthTooSmall(TripletVoiceError):
    pass


class ShapeMismatch(TripletVoiceError):
    pass


class NoCachedActivations(TripletVoiceError):
    pass


class NonFiniteEmbedding(TripletVoiceError):
    pass


class BadMagic(TripletVoiceError):
    pass


class VersionMismatch(TripletVoiceError):
    pass


class TruncatedFile(TripletVoiceError):
    pass


# triplet
class DimensionMismatch(TripletVoiceError):
    pass


class DegenerateBatch(TripletVoiceError):
    pass


class NonFiniteLoss(TripletVoiceError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}


# quality / forensic
class EmptySet(TripletVoiceError):
    pass


class SingleSpeaker(TripletVoiceError):
    pass


class ZeroOAD(TripletVoiceError):
    pass


class InsufficientPopulation(TripletVoiceError):
    pass


class EmptyPopulation(TripletVoiceError):
    pass


class DegenerateCalibration(TripletVoiceError):
    pass


# evaluation
class EmptyClass(TripletVoiceError):
    pass


class TooFewScores(TripletVoiceError):
    pass


class DegenerateVariance(TripletVoiceError):
    pass
