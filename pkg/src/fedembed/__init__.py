"""fedembed: decentralised embedding learning over private multi-domain data.

Clients train local models on non-shared labelled feature data; a central
server iteratively aggregates their embedding-network updates (optionally
under white-noise privacy) into one generalisable global embedding, while
per-client classification heads and distillation experts stay local. Includes
baselines, a synthetic multi-domain data pipeline, retrieval metrics, and a
networked mode bit-equivalent to in-process simulation.
"""

__version__ = "0.1.0"
