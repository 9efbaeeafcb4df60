"""Multi-label thoracic disease classification on chest radiographs."""

__version__ = "0.1.0"
