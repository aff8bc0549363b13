"""Batch text-to-embedding export producing CGME corpus files."""
__version__ = "0.1.0"

from .cgme import CgmeRecord, write_cgme
from .encoders import HashEncoder, TransformerEncoder, load_encoder
from .errors import EncoderLoadError, ExportError
from .export import ExportJob, ExportReport, export, export_response_set

__all__ = [
    "CgmeRecord", "write_cgme",
    "HashEncoder", "TransformerEncoder", "load_encoder",
    "EncoderLoadError", "ExportError",
    "ExportJob", "ExportReport", "export", "export_response_set",
    "__version__",
]
