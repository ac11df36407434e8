"""Exception hierarchy shared by every chunkcat module."""


class ChunkcatError(Exception):
    """Base class for all chunkcat errors."""


class FormatError(ChunkcatError):
    """Container file is corrupt, truncated or not a container file."""


class SpecError(ChunkcatError, ValueError):
    """A configuration or dataset description violates an invariant."""


class ObjectExistsError(ChunkcatError, KeyError):
    pass


class ObjectNotFoundError(ChunkcatError, KeyError):
    pass


class DuplicateChunkError(ChunkcatError, KeyError):
    pass


class RegionError(ChunkcatError, IndexError):
    """Requested row range falls outside the dataset extent."""


class CollectiveError(ChunkcatError):
    """A collective operation failed on one or more ranks."""


class CollectiveTimeout(CollectiveError):
    """Not every rank entered a collective operation before the deadline."""


class OverlapError(CollectiveError, ValueError):
    """Write requests from different ranks overlap."""


class CorpusValidationError(ChunkcatError):
    """A generated corpus misses its statistical targets."""


class SchemaMismatchError(CorpusValidationError):
    """Input files do not share an identical object schema."""


class ConcatError(ChunkcatError):
    """A concatenation run failed; ``report`` holds what was measured so far."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
