//! DISTANA: lattices of weight-shared recurrent prediction kernels for
//! spatio-temporal forecasting, with the wave generators, training loop and
//! closed-loop evaluation harness used to study them.

pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod field;
pub mod gradcheck;
pub mod mesh;
pub mod model;
pub mod optim;
pub mod tape;
pub mod store;
pub mod tensor;
pub mod training;
pub mod wavegen;

pub use baselines::BaselineKind;
pub use checkpoint::Checkpoint;
pub use error::{Error, ErrorClass, Result};
pub use field::Field;
pub use mesh::{BorderMode, Direction, MeshTopology};
pub use model::{Distana, Lattice, LatticeState, ModelConfig, PkConfig, Variant};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use training::{TrainConfig, Trainer};
pub use evaluation::{EvalProtocol, ResultRow, Rollout};
