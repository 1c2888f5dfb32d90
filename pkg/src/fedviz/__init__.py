"""fedviz: privacy-preserving decentralized chart composition.

Client nodes hold disjoint raw datasets; the coordinator composes global
chart data from encrypted per-client visual features, either exactly
(pairwise-masked secure sums) or approximately (a federated prediction
model). Raw records never leave a client.
"""

__version__ = "0.1.0"
