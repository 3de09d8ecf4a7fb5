"""Semantic-graph embedding toolkit: heterogeneous KG data model, embedding
pretraining, relation-aware attention GNN, balanced subgraph partitioning,
link-prediction training, and a MAP@K evaluation harness with synthetic
graphs carrying planted ground truth."""

__version__ = "0.1.0"
