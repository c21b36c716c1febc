"""Deterministic simulator for decentralized collaborative recommenders.

Clients train local neural recommenders, exchange gradients with
server-assigned neighbors, and optionally host poisoning adversaries
(target-item promotion) and user-level aggregation defenses.
"""

from decrecsim.errors import ConfigError, ContractError, EmptyDatasetError, ParseError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "EmptyDatasetError",
    "ParseError",
    "__version__",
]
