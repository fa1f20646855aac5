"""Bandit neighbor samplers for variance-reduced GNN training."""
