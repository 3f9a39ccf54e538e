# core/errors.py
from typing import Iterable, Optional


class CovidCTError(Exception):
    """Base exception for every pipeline error"""

    @property
    def name(self) -> str:
        return type(self).__name__


# --- core_data ---
class NoSlices(CovidCTError):
    """Scan directory holds no slice images"""

class InconsistentShape(CovidCTError):
    """Slices (or masks) of one scan disagree in shape"""

class MissingMask(CovidCTError):
    """A required lung/infection mask is absent"""

class ManifestParseError(CovidCTError):
    """A manifest or prediction row could not be parsed"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)

class DuplicateId(ManifestParseError):
    """Two manifest rows share a scan_id"""

class BadSplit(ManifestParseError):
    """Unknown split token in a manifest row"""

class MissingManifest(CovidCTError):
    """Manifest file does not exist"""

class MissingPath(CovidCTError):
    """A configured input path does not exist"""

class IoError(CovidCTError):
    """Output location is not writable"""


# --- synthetic ---
class GeometryError(CovidCTError):
    """Phantom geometry could not be placed"""


# --- preprocessing ---
class MissingModel(CovidCTError):
    """Learned slice filter requested without a model"""

class EmptyVolume(CovidCTError):
    """Volume has zero slices"""


# --- networks ---
class ConfigError(CovidCTError):
    """Invalid configuration"""

class WeightLoadError(CovidCTError):
    """Pretrained checkpoint does not fit the architecture"""

class MissingWeights(CovidCTError):
    """Pretrained weights requested but no file found"""

class NumericalError(CovidCTError):
    """A forward pass produced non-finite values"""

    def __init__(self, message: str, layer: str = ""):
        self.layer = layer
        super().__init__(message)


# --- training ---
class RangeError(CovidCTError):
    """Epoch outside the schedule"""

class EmptySplit(CovidCTError):
    """A required data split has no entries"""

class DivergedError(CovidCTError):
    """Training loss became non-finite"""

    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")


# --- inference ---
class ShapeError(CovidCTError):
    """Volume shape does not match the model input"""

class EmptyEnsemble(CovidCTError):
    """Ensemble called with no models"""


# --- evaluation ---
class MissingPrediction(CovidCTError):
    """Labeled scans in the split have no prediction"""

    def __init__(self, scan_ids: Iterable[str]):
        self.scan_ids = sorted(scan_ids)
        shown = ", ".join(self.scan_ids[:10])
        more = f" (+{len(self.scan_ids) - 10} more)" if len(self.scan_ids) > 10 else ""
        super().__init__(f"no prediction for: {shown}{more}")

class DuplicatePrediction(CovidCTError):
    """A scan has more than one prediction"""

    def __init__(self, scan_ids: Iterable[str]):
        self.scan_ids = sorted(scan_ids)
        super().__init__(f"duplicate predictions for: {', '.join(self.scan_ids)}")
