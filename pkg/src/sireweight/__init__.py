"""Self-influence data filtering and microbatch reweighting for toy LM pre-training."""

__version__ = "0.1.0"
