"""meshfield: train a mesh-lattice neural field, bake it into a textured
polygon asset, and render it with a deterministic deferred rasterizer."""

__version__ = "0.1.0"

from .config import RunConfig, StageConfig, load_config  # noqa: F401
