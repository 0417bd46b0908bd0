//! Synthetic data, training, evaluation.
