"""Exception hierarchy shared by every layer of the engine."""


class BranchStoreError(Exception):
    """Base class for all engine errors."""


class StoreError(BranchStoreError):
    """Backend I/O failure."""


class ChunkNotFoundError(StoreError, KeyError):
    def __init__(self, chunk_id):
        super().__init__(f"chunk not found: {chunk_id}")
        self.chunk_id = chunk_id

    def __str__(self):
        return self.args[0]


class CorruptChunkError(StoreError):
    """Stored bytes no longer hash to the id they are filed under."""

    def __init__(self, chunk_id, reason="digest mismatch"):
        super().__init__(f"corrupt chunk {chunk_id}: {reason}")
        self.chunk_id = chunk_id
        self.reason = reason


class ChunkTooLargeError(StoreError):
    pass


class OversizeEntryError(BranchStoreError, ValueError):
    pass


class DuplicateKeyError(BranchStoreError, ValueError):
    pass


class UnknownRefError(BranchStoreError, LookupError):
    pass


class BranchExistsError(BranchStoreError):
    pass


class ConcurrentUpdateError(BranchStoreError):
    """A branch head moved between read and compare-and-swap."""


class NoCommonAncestorError(BranchStoreError):
    pass


class ConfigMismatchError(BranchStoreError):
    pass


class StoreLockedError(BranchStoreError):
    pass


class VerificationError(BranchStoreError):
    def __init__(self, report):
        super().__init__(f"verification failed at {report.bad_chunk}: {report.reason}")
        self.report = report
