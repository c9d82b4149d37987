"""Flow records to RGB images to CNN+LSTM DoS/DDoS classifiers."""
from flowpix.labels import CLASS_NAMES, ClassLabel

__version__ = "0.1.0"
__all__ = ["CLASS_NAMES", "ClassLabel", "__version__"]
