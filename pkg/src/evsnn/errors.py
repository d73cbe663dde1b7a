"""Exception types raised across the pipeline.

Everything inherits from PipelineError so callers (and the CLI) can treat
bad inputs or configs uniformly; anything else escaping is a genuine bug.
"""


class PipelineError(Exception):
    pass


# --- event file parsing ---

class MalformedHeader(PipelineError):
    pass


class TruncatedRecord(PipelineError):
    pass


class OutOfBoundsEvent(PipelineError):
    pass


class MalformedLine(PipelineError):
    pass


class NonMonotonicTimestamp(PipelineError):
    pass


# --- dataset layout / generation ---

class MissingSplit(PipelineError):
    pass


class EmptyClassDirectory(PipelineError):
    pass


class InvalidSpec(PipelineError):
    pass


# --- preprocessing ---

class EmptyInput(PipelineError):
    pass


class DegenerateWindow(PipelineError):
    pass


class InvalidConfig(PipelineError):
    pass


# --- network / training ---

class ShapeMismatch(PipelineError):
    pass


# --- chip emulation / mapping ---

class WeightOverflow(PipelineError):
    pass


class Infeasible(PipelineError):
    pass
