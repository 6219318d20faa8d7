"""Training-free pruning engine: gradient-aware importance metrics,
comparison-group and N:M masking, an OBS-theory verification kernel, and a
deterministic desk-scale language model for end-to-end validation."""

from gradprune.container import Container, ContainerFormatError, TensorRecord, read_container, write_container

__all__ = [
    "Container",
    "ContainerFormatError",
    "TensorRecord",
    "read_container",
    "write_container",
]

__version__ = "0.1.0"
