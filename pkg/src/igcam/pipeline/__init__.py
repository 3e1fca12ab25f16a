"""Synthetic data, staged training, inference, evaluation and ablation."""
