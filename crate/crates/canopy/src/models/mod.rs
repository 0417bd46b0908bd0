//! Regression architectures.
