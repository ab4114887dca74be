"""scenefuse: multi-sensor tracking fusion on a two-layer dynamic scene graph."""

__version__ = "0.1.0"
