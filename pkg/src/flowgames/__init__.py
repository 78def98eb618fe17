"""Expected and adversarial flow networks on tree-structured environments."""

__version__ = "0.1.0"
