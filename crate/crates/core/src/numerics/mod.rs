//! Dense complex linear algebra, seeded randomness, a reverse-mode gradient
//! tape and a finite-difference gradient checker.

pub mod adam;
pub mod counter;
pub mod fdcheck;
pub mod linalg;
pub mod rng;
pub mod tape;

pub use adam::Adam;
pub use counter::{count_multiplies, matmul};
pub use fdcheck::{central_difference, fd_check, fd_check_with};
pub use linalg::{
    frobenius, hermitian_defect, identity, inverse, is_hermitian, pinv, pinv_default, rank,
    real_part, solve, CMat, RMat, PINV_DEFAULT_TOL,
};
pub use rng::{complex_normal, realization_rng, Rng64};
pub use tape::{GradTape, NodeId};
