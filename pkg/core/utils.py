# core/utils.py
import hashlib
import os
import re
import sys
from pathlib import Path
from typing import Iterable, Optional, Tuple, Union

import platformdirs

# --- Define constants for platformdirs ---
APP_NAME = "CovidCT-CLI"
APP_AUTHOR = "CovidCT"
WORKDIR_ENV = "COVIDCT_WORKDIR"

PathLike = Union[str, os.PathLike]

_INT_STEM = re.compile(r"^\d+$")


def get_app_path(resource_path: str = '') -> str:
    """
    Get the absolute path to a read-only bundled resource (README_APP.txt).

    Handles both script execution and PyInstaller frozen bundles: when frozen,
    resources live under sys._MEIPASS, otherwise under the project root
    (the parent of core/).
    """
    if getattr(sys, 'frozen', False) and hasattr(sys, '_MEIPASS'):
        base_path = sys._MEIPASS
    else:
        base_path = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    return os.path.join(base_path, resource_path) if resource_path else base_path


def resolve_work_dir(cli_value: Optional[PathLike] = None,
                     config_value: Optional[PathLike] = None) -> Path:
    """
    Resolve the run's work directory.

    Precedence: --work-dir flag > COVIDCT_WORKDIR env var > config paths.work_dir
    > platformdirs user data dir. The directory is created if missing.
    """
    if cli_value:
        work_dir = Path(cli_value)
    elif os.environ.get(WORKDIR_ENV):
        work_dir = Path(os.environ[WORKDIR_ENV])
    elif config_value:
        work_dir = Path(config_value)
    else:
        work_dir = Path(platformdirs.user_data_dir(APP_NAME, APP_AUTHOR)) / "runs"
    work_dir.mkdir(parents=True, exist_ok=True)
    return work_dir.resolve()


def numeric_sort_key(path: PathLike) -> Tuple[int, int, str]:
    """Sort key putting integer-stemmed files first, in numeric order ("2" < "3" < "10")."""
    stem = Path(path).stem
    if _INT_STEM.match(stem):
        return (0, int(stem), stem)
    return (1, 0, stem)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (Python's hash() is salted per process)."""
    joined = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(joined.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def sha256_file(path: PathLike) -> str:
    """Hex sha256 of a file's bytes"""
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()


def fingerprint(items: Iterable[str]) -> str:
    """Short order-sensitive fingerprint of a sequence of strings (scan ids, labels)"""
    h = hashlib.sha256()
    for item in items:
        h.update(item.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()[:16]


def ensure_dir(path: PathLike) -> Path:
    """Create a directory (and parents) and return it as a Path"""
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
