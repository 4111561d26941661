"""Multi-view, topic-conditioned report generation with factored attention
and factored word embeddings, trained end to end with handwritten exact
gradients."""

__version__ = "0.1.0"
