"""
Exception hierarchy shared by every msloc module.

DataError subclasses are problems with inputs or data (CLI exit code 3);
anything else reaching the CLI is unexpected (exit code 1).
"""


class MslocError(Exception):
    """Root of all msloc errors."""


class DataError(MslocError):
    """Bad input data, bad files, or a request the data cannot satisfy."""


# geom

class InvalidPose(DataError):
    pass


class NonPositiveDepth(DataError):
    pass


class TooFewCorrespondences(DataError):
    pass


class NoConsensus(DataError):
    pass


class DivergedOptimization(MslocError):
    pass


# features / vocabulary

class FamilyMismatch(DataError):
    pass


class EmptyVocabulary(DataError):
    pass


# graph

class UnknownNode(DataError):
    pass


class NonPositiveDefiniteInformation(DataError):
    pass


class InvalidLink(DataError):
    pass


class DisconnectedGraph(MslocError):
    def __init__(self, unreached, result=None):
        self.unreached = sorted(unreached)
        self.result = result
        super().__init__(f"{len(self.unreached)} nodes not connected to the anchor")


# registration

class RejectedLowInliers(MslocError):
    def __init__(self, stage: str, inliers: int = 0, detail: str = ""):
        self.stage = stage
        self.inliers = inliers
        self.detail = detail
        super().__init__(f"registration rejected at {stage} ({inliers} inliers){': ' + detail if detail else ''}")


# slam

class AnchorNotFound(MslocError):
    def __init__(self, session_id: int):
        self.session_id = session_id
        super().__init__(f"session {session_id} never closed a loop with a prior session")


# synthworld / io / eval

class InvalidParams(DataError):
    pass


class SchemaVersionError(DataError):
    pass


class MissingLogs(DataError):
    pass
