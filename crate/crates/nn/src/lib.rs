//! Minimal double-precision neural-network toolkit: a reverse-mode tape,
//! LSTM and attention kernels, Adam, and a checkpoint container.

pub mod container;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod param;

pub use container::{Container, ContainerError};
pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use param::{Gradients, Matrix, Param, ParamId, ParamSet};

/// Sinusoidal position table (`len × width`): even columns carry
/// `sin(pos / 10000^(2i/width))`, odd columns the matching cosine.
pub fn sinusoidal_table(len: usize, width: usize) -> Matrix {
    Matrix::from_shape_fn((len, width), |(pos, j)| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / width as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
