"""polysnap: box-prompted polygon annotation with iterative refinement."""

__version__ = "0.1.0"
