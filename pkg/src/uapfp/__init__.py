"""Black-box ownership verification of neural classifiers via UAP fingerprints."""

from .encoder import ContrastiveEncoder
from .fingerprint import BlackBox, ProbeSelector
from .nn import DenseClassifier
from .uap import UAPGenerator

__version__ = "0.1.0"

__all__ = ["BlackBox", "ContrastiveEncoder", "DenseClassifier", "ProbeSelector", "UAPGenerator", "__version__"]
