"""cellkit: on-demand cells of heterogeneous nodes with automated skill placement."""

__version__ = "0.1.0"
