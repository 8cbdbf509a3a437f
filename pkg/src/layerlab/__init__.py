"""layerlab: layer-dynamics experiments on small tabular in-context-learning transformers."""

__version__ = "0.1.0"
