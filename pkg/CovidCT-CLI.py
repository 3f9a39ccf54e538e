# CovidCT-CLI.py

import sys

# --- Path setup so `core` resolves when run as a script or frozen bundle ---
try:
    from core.utils import get_app_path
except ImportError:
    print("Fatal: Could not find core.utils. Path setup failed.", file=sys.stderr)
    sys.exit(1)

if getattr(sys, 'frozen', False) and get_app_path() not in sys.path:
    sys.path.insert(0, get_app_path())
# --- End path setup ---

from core.cli import main


def check_python_version():
    if sys.version_info < (3, 11):
        print("Error: CovidCT-CLI requires Python 3.11 or higher.", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    check_python_version()
    sys.exit(main())
