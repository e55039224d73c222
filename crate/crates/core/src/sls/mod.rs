//! Tube verification by system level synthesis: nominal rollouts, block
//! LTV operators, the conic program and the robust feedback gain.

pub mod blocks;
pub mod nominal;
pub mod program;
pub mod socp;

pub use blocks::{extract_gain, BlockLowerTriangular};
pub use nominal::{generate_nominal, NominalTrajectory};
pub use program::{ConicProgram, SolveStatus, SolverTolerances};
pub use socp::{
    build_socp, tube_soundness_check, SlsVerifier, SoundnessReport, SystemResponse,
    VerificationResult, VerificationStatus,
};
