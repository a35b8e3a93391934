"""Exception types shared across the package."""


class SdnLabError(Exception):
    """Base class for all errors raised by sdnlab."""


class ScenarioError(SdnLabError):
    """A scenario or topology document failed to parse or validate.

    ``location`` is a human-readable pointer into the document, e.g.
    ``"line 4, column 12"`` or ``"links[2].capacity_mbps"``.
    """

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        if location:
            message = f"{message} (at {location})"
        super().__init__(message)


class DuplicateIdError(ScenarioError):
    pass


class DanglingEndpointError(ScenarioError):
    pass


class UnknownNodeError(SdnLabError):
    pass


class UnknownLinkError(SdnLabError):
    pass


class InvalidPathError(SdnLabError):
    pass


class UnroutedFlowError(SdnLabError):
    pass


class DirectiveError(SdnLabError):
    """A controller emitted a directive the simulator cannot apply."""


class SimulationError(SdnLabError):
    pass


class SliceSpaceError(SdnLabError):
    """An address falls outside the space a slice or proxy is allowed to use."""


class IsolationError(SdnLabError):
    """A tenant attempted to reach traffic that belongs to another slice."""


class BlockExhaustedError(SdnLabError):
    """No physical address block is left for a new slice in some domain."""


class ReplayMismatchError(SdnLabError):
    pass
