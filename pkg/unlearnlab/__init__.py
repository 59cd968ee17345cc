"""
unlearnlab - Labor für Machine Unlearning mit Dimensional Alignment.

Kompakte MLP-Engine, synthetische Daten, Unlearning-Methoden und
Feature-Metriken; die Pipelines liegen in ``unlearnlab.harness``.
"""

from unlearnlab.errors import LabError, ConfigInvalid

__version__ = "1.0.0"

__all__ = ["LabError", "ConfigInvalid", "__version__"]
