"""sewkit: desk-scale sewing-pattern reconstruction toolkit."""

__version__ = "0.1.0"
