//! Hierarchical heterogeneous graph learning for regional on-road carbon
//! emission estimation.

pub mod autodiff;
pub mod graph;
pub mod egat;
pub mod data;
pub mod model;
pub mod pipeline;
