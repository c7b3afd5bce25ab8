//! Desk-scale data-free trajectory-distribution-matching distillation.
//!
//! Everything here runs in `f64`: gradient checks at 1e-4 relative tolerance
//! need more headroom than the `f32` tensor substrate provides. The student
//! is a one-step generator; the stage partition of the schedule decides at
//! which noise levels its output distribution is matched against the
//! teacher's diffused marginals.

pub mod distill;
pub mod fake;
pub mod schedule;
pub mod student;
pub mod teacher;

pub use distill::{distill, sample_student, tdm_gradient, DistillConfig, DistillRun, TraceRow};
pub use fake::{fit_affine_denoiser, train_fake_score, AffineDenoiser, FakeBucket, FakeScore};
pub use schedule::{denoiser_to_score, forward_corrupt, Schedule, ScheduleKind};
pub use student::{
    masked_attention_forward, masked_attention_forward_backward, AttnGrads, AttnParams,
    StudentGenerator,
};
pub use teacher::TeacherDist;
