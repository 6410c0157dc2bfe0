"""MyoTracker: lightweight joint point tracking for echo-like sequences.

The package bundles a small numpy-backed autodiff engine, the tracking
network itself, a synthetic speckle-sequence generator with exact ground
truth, a training loop, and the downstream strain / trajectory metrics.
"""

__version__ = "0.1.0"

from .model import ModelConfig, MyoTracker, count_parameters

__all__ = ["ModelConfig", "MyoTracker", "count_parameters", "__version__"]
