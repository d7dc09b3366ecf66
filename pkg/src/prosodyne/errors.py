"""Exception types raised across the package."""


class ProsodyneError(Exception):
    """Base class. ``tag`` names the feature, stage or file that failed, if known."""

    def __init__(self, message: str = "", tag: str | None = None):
        super().__init__(message)
        self.tag = tag

    def __str__(self):
        msg = super().__str__()
        return f"[{self.tag}] {msg}" if self.tag else msg


def retag(exc: ProsodyneError, tag: str) -> ProsodyneError:
    """Return a copy of ``exc`` carrying ``tag`` (outer tags are prepended)."""
    tag = f"{tag}/{exc.tag}" if exc.tag else tag
    return type(exc)(Exception.__str__(exc), tag=tag)


# dsp
class UnsupportedFormat(ProsodyneError): pass
class EmptyAudio(ProsodyneError): pass
class AudioTooShort(ProsodyneError): pass
class InvalidConfig(ProsodyneError): pass

# prosody
class NoVoicedFrames(ProsodyneError): pass
class NoPhones(ProsodyneError): pass
class AllSilent(ProsodyneError): pass
class EmptyList(ProsodyneError): pass
class ParseError(ProsodyneError): pass

# conditioning / model
class ZeroVector(ProsodyneError): pass
class DimensionMismatch(ProsodyneError): pass
class InvalidLength(ProsodyneError): pass
class InvalidSpec(ProsodyneError): pass
class DivergedLoss(ProsodyneError): pass

# evaluation
class EmptySequence(ProsodyneError): pass
class InvalidPath(ProsodyneError): pass
class NoVoicedOverlap(ProsodyneError): pass

# cli
class ManifestError(ProsodyneError): pass
class JoinError(ProsodyneError): pass
