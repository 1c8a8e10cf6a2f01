"""Bridge between PyTorch state dicts and the checkpoint container format."""

from .bridge import (
    SOURCE_FORMAT,
    BridgeManifest,
    SkippedEntry,
    default_manifest_path,
    export_to_container,
    import_from_container,
)
from .container import BridgeError, read_container, write_container

__version__ = "1.0.0"

__all__ = [
    "SOURCE_FORMAT",
    "BridgeError",
    "BridgeManifest",
    "SkippedEntry",
    "default_manifest_path",
    "export_to_container",
    "import_from_container",
    "read_container",
    "write_container",
    "__version__",
]
