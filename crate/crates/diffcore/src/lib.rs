//! Dense tensors with a recorded computation tape and reverse-mode gradients.
//!
//! Every op is a method on [`Tape`] that validates shapes, computes its
//! output eagerly and appends a node. [`Tape::backward`] then walks the nodes
//! in reverse and accumulates vector-Jacobian products. Broadcasting is
//! limited to `matrix + row-vector` in [`Tape::add`]; every other op expects
//! explicit, matching shapes.
//!
//! ```
//! use diffcore::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let w = tape.param(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
//! let sq = tape.square(w).unwrap();
//! let loss = tape.sum_all(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

mod backward;
mod error;
pub mod gradcheck;
mod ops;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use backward::Gradients;
pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, ParamCheck, REL_ERROR_FLOOR};
pub use ops::{LN_EPS, MASK_FILL, POS_EPS};
pub use params::{Binding, ModelParams};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Scalar `elu(x) + 1 + POS_EPS`, matching [`Tape::pos`].
pub fn pos<T: Scalar>(x: T) -> T {
    ops::pos(x)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    ops::sigmoid(x)
}
