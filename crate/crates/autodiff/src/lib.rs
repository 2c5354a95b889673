//! Dense tensors and a define-by-run expression graph with reverse-mode
//! differentiation that can be applied to its own output (gradients of
//! gradients).
//!
//! ```
//! use metapred_autodiff::{grad, Expr, Tensor};
//!
//! let theta = Expr::variable(Tensor::scalar(3.0));
//! let loss = theta.mul(&theta).unwrap().scale(0.5);
//! let g = grad(&loss, std::slice::from_ref(&theta), true).unwrap();
//! assert_eq!(g[0].value().item().unwrap(), 3.0);
//! let h = grad(&g[0], std::slice::from_ref(&theta), false).unwrap();
//! assert_eq!(h[0].value().item().unwrap(), 1.0);
//! ```

mod backward;
mod error;
mod expr;
pub mod nn;
pub mod oracle;
mod params;
pub mod precision;
mod tensor;

pub use backward::grad;
pub use error::{Error, Result};
pub use expr::Expr;
pub use nn::NormStats;
pub use params::{gradient, ParamExprs, ParamSet};
pub use precision::{with_precision, Precision};
pub use tensor::{numel, Tensor};
