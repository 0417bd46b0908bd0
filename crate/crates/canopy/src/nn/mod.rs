//! Autodiff core, layers, loss, optimizer.
