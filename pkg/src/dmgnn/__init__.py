"""Multi-domain dialogue management with structured GNN policies and imitation learning."""

__version__ = "0.1.0"
