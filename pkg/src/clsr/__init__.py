"""Sequential recommender that separates long-term and short-term user interests with contrastive self-supervision."""

__version__ = "0.1.0"
