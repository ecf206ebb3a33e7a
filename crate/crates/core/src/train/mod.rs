//! Training orchestration.
