"""Anchored message passing on text-rich graphs.

A tiny decoder-only transformer doubles as the aggregation operator of a
graph network: node texts are compressed into summary vectors, propagated
between neighbors over synchronous rounds (the target's raw text re-fed at
every round), and the final summaries feed generative prediction through a
KV cache.
"""

__version__ = "0.1.0"
