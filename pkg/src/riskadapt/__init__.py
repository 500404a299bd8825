"""Language-guided task decomposition with constrained MPC and bi-level parameter adaptation."""

__version__ = "0.1.0"
