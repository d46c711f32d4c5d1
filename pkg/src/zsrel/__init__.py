"""Zero-shot relation classification over knowledge-graph and rule-guided
relation embeddings."""

__version__ = "0.1.0"
