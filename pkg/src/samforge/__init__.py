"""Statistical shape and appearance modeling for landmark-annotated
multi-channel body scans."""

__version__ = "0.1.0"
