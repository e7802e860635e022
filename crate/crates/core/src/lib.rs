pub mod error;
pub mod freqrate;
pub mod homotopy;
pub mod io;
pub mod horizon;
pub mod matfun;
pub mod model;
pub mod quad;
pub mod robust;
pub mod stochastic;

pub use error::{Error, Result};
pub use matfun::{CMatrix, RMatrix, RVector};
