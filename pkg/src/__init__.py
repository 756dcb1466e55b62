"""hypergraph-ssl: semi-supervised multi-task hypergraph learning on gridded layers."""

__version__ = "0.1.0"
