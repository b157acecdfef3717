"""Class-contrastive back-propagation explanations for image classifiers."""

__version__ = "0.1.0"
