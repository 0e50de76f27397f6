//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Networks train in
//! `f32`; gradient checks run the same code in `f64`.
//!
//! ```
//! use pcomplete_tensor::{Tape64, Tensor};
//!
//! let mut tape = Tape64::new();
//! let x = tape.input(Tensor::from_vec(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
//! ```

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError, ManifestEntry};
pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, grad_check, GradCheckOptions, GradCheckReport};
pub use optim::AdamState;
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32<'p> = Tape<'p, f32>;
pub type Tape64<'p> = Tape<'p, f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Adam32 = AdamState<f32>;
