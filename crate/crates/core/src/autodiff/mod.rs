//! Dense tensors with reverse-mode differentiation.

mod conv;
pub mod gradcheck;
mod tape;
mod tensor;

pub use conv::ConvGeom;
pub use gradcheck::{central_differences, finite_diff_check, finite_diff_check_coords, max_relative_error};
pub use tape::{ChannelStats, Tape, Var};
pub use tensor::{Real, Tensor};
pub(crate) use tensor::{gemm, MatLayout};
