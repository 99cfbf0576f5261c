mod elementwise;
mod linalg;
mod nn;
mod shape;

pub use elementwise::{gelu, sigmoid, silu, softplus, softplus_inv};
pub use shape::{concat, permute_indices};
