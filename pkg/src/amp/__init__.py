"""Media provenance: signed manifests, a transparency ledger, a manifest
database and a playback verifier, plus an audio watermark fallback."""

from .errors import AmpError
from .manifest import ManifestContainer, ManifestCore, TypedDigest, compute_manifest_id

__version__ = "0.1.0"

__all__ = ["AmpError", "ManifestContainer", "ManifestCore", "TypedDigest", "compute_manifest_id", "__version__"]
