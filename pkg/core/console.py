# core/console.py
import sys
from typing import Iterable, Optional

import tqdm
from colorama import Fore, Style, init

# Initialize Colorama for the whole application run
init(autoreset=True)

QUIET, NORMAL, VERBOSE = 0, 1, 2

_verbosity = NORMAL


def set_verbosity(level: int):
    """Set console verbosity: 0 quiet, 1 normal, 2 verbose"""
    global _verbosity
    _verbosity = max(QUIET, min(VERBOSE, int(level)))


def get_verbosity() -> int:
    return _verbosity


def info(message: str):
    if _verbosity >= NORMAL:
        print(f"{Fore.CYAN}{message}{Style.RESET_ALL}")


def success(message: str):
    if _verbosity >= NORMAL:
        print(f"{Fore.GREEN}✓ {message}{Style.RESET_ALL}")


def debug(message: str):
    if _verbosity >= VERBOSE:
        print(f"{Style.DIM}{Fore.WHITE}{message}{Style.RESET_ALL}")


def warn(message: str):
    print(f"{Fore.YELLOW}Warning: {message}{Style.RESET_ALL}", file=sys.stderr)


def error(message: str):
    print(f"{Fore.RED}{message}{Style.RESET_ALL}", file=sys.stderr)


def table(text: str):
    """Print a pre-rendered table (reports, dataset summary)"""
    if _verbosity >= NORMAL:
        print(f"{Fore.WHITE}{text}{Style.RESET_ALL}")


def progress(iterable: Optional[Iterable] = None, total: Optional[int] = None,
             desc: str = "Progress", unit: str = "it"):
    """Single-line red tqdm bar; silent at verbosity 0"""
    return tqdm.tqdm(iterable, total=total, desc=Fore.RED + desc + Fore.RESET,
                     unit=unit, colour='red', leave=False,
                     disable=_verbosity < NORMAL)
