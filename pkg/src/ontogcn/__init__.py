"""Ontology-aware label classification with label-graph GCNs and level-transfer layers."""

__version__ = "0.1.0"
