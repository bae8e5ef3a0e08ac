"""FIDO saliency: Bernoulli dropout masks optimised against a classifier with infilled counterfactuals."""

__version__ = "0.1.0"
