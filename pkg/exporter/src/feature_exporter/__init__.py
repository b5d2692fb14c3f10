"""Offline feature extraction for retrieval training data.

Encodes image directories and caption tables into binary embedding
stores plus JSON-lines triplet manifests, the exact file contracts the
training engine consumes.
"""

from .encoders import HashedProjectionEncoder, get_encoder
from .export import ExportJob, ExportReport, export_images, export_texts, list_images
from .manifest import (DEFAULT_SEPARATOR, ManifestResult, build_manifest,
                       check_references, load_captions, write_captions,
                       write_manifest)
from .stores import ExportError, ids_path, read_ids, read_store, write_store

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_SEPARATOR",
    "ExportError",
    "ExportJob",
    "ExportReport",
    "HashedProjectionEncoder",
    "ManifestResult",
    "build_manifest",
    "check_references",
    "export_images",
    "export_texts",
    "get_encoder",
    "ids_path",
    "list_images",
    "load_captions",
    "read_ids",
    "read_store",
    "write_captions",
    "write_manifest",
    "write_store",
]
