"""Federated LSTM volatility classification on a numpy core.

Submodules: ``data`` (prices, features, labels, partitions), ``model`` (LSTM,
BPTT, Adam), ``consensus`` (mixing matrices and one-shot checks),
``federation`` (FedAvg rounds and baselines), ``privacy`` (clip and noise),
``config``/``scenarios``/``cli`` (experiment plumbing).
"""
from .errors import ConfigError, FedVolError, VerificationError

__version__ = "0.1.0"

__all__ = ["ConfigError", "FedVolError", "VerificationError", "__version__"]
