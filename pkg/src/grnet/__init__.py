"""Deep networks on Grassmann manifolds.

Layers with exact matrix-backprop gradients, Riemannian SGD for the FRMap
weights, synthetic subspace data and a CLI (``grnet``).
"""
__version__ = "0.1.0"

from grnet.linalg import BACKEND  # noqa: E402
from grnet.net import BlockSpec, Model, NetworkConfig, build, forward, backward, loss  # noqa: E402
from grnet.data import SubspaceDataset, gen_synthetic  # noqa: E402

__all__ = [
    "BACKEND",
    "BlockSpec",
    "Model",
    "NetworkConfig",
    "SubspaceDataset",
    "backward",
    "build",
    "forward",
    "gen_synthetic",
    "loss",
]
