//! Small numerical building blocks: quadrature, root finding, optimizers and
//! special functions.

pub mod hermite;
pub mod optimize;
pub mod quadrature;
pub mod roots;
pub mod special;

pub use hermite::GaussHermite;
pub use optimize::{golden_section_max, nelder_mead, NelderMeadOptions, NelderMeadResult};
pub use quadrature::{integrate, integrate_to_infinity};
pub use roots::brent_root;
pub use special::{bessel_k, bessel_k1, normal_cdf, normal_logpdf, normal_quantile};
