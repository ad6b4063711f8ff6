"""Structure-aware editing of facial detail maps.

Displacement / wrinkle-line rasters, a joint latent model over both, and
editing operations exposed as a library, a CLI, and an HTTP service.
"""

__version__ = "0.1.0"
