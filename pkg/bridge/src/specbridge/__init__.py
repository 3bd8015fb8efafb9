"""Bridge between torch-ecosystem checkpoints and the tensor interchange format."""

from .bridge import BridgeError, ExportManifest, export_checkpoint, import_merged
from .interchange import BridgeFormatError, read_tensors, write_tensors

__version__ = "0.1.0"
