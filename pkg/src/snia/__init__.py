"""Single-node injection, label-specificity attacks on GNN node classifiers."""
__version__ = "0.1.0"
