"""
Schema version constants for reproducibility.

See docs/DATA_CONTRACT.md for the file formats they version.
"""

LABEL_FORMAT_VERSION = "v1"
MANIFEST_SCHEMA_VERSION = "v1"
SNAPSHOT_SCHEMA_VERSION = "v1"
PIPELINE_STATE_SCHEMA_VERSION = "v1"
ADAPTER_PROTOCOL_VERSION = "v1"
