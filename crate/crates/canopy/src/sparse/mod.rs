//! Sparse voxel tensor engine.
