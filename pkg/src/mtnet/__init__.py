"""Meta-learned layerwise metric and subspace (T-nets and MT-nets) in numpy."""

__version__ = "0.1.0"
