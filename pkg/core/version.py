# core/version.py
VERSION = "1.0.0"  # Semantic versioning, recorded in checkpoint sidecars
VERSION_CODE = 1 # Integer version code
