from kvann.storage.docstore import DocumentStore
from kvann.storage.kvstore import (
    ContractViolation,
    OrderedStore,
    Patch,
    PatchKind,
    SnapshotError,
    replay,
)
from kvann.storage import terms

__all__ = [
    "ContractViolation",
    "DocumentStore",
    "OrderedStore",
    "Patch",
    "PatchKind",
    "SnapshotError",
    "replay",
    "terms",
]
