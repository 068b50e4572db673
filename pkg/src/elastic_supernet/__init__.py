"""Nested elastic transformer supernet: curriculum adaptation, NSGA-II submodel
search and a budget-conditioned router, in plain numpy."""
from .backbone import BackboneSpec, ElasticParams, SubmodelConfig, build_submodel, forward, macs, max_macs
from .config import RunConfig
from .errors import ConfigError, DataFormatError, NumericalError, SearchError
from .pipeline import run_pipeline
from .router import RouterParams, RouterSettings, route, routed_config
from .search import ParetoArchive, SearchSettings, evolve, nearest_pareto

__version__ = "0.1.0"

__all__ = [
    "BackboneSpec", "ElasticParams", "SubmodelConfig", "build_submodel", "forward", "macs", "max_macs",
    "RunConfig", "ConfigError", "DataFormatError", "NumericalError", "SearchError", "run_pipeline",
    "RouterParams", "RouterSettings", "route", "routed_config",
    "ParetoArchive", "SearchSettings", "evolve", "nearest_pareto",
]
