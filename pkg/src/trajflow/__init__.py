"""K-shot conditional flow matching for multi-agent trajectory forecasting."""
from .core import AgentRecord, Normalizer, Scene
from .estimators import FlowForecaster, IMLEForecaster

__all__ = ["AgentRecord", "Normalizer", "Scene", "FlowForecaster", "IMLEForecaster"]
__version__ = "0.1.0"
