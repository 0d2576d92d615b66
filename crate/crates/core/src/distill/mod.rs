//! Toy multi-teacher, multi-resolution distillation.

pub mod experiment;
pub mod gradcheck;
pub mod loss;
pub mod nn;
pub mod student;
pub mod teacher;
pub mod train;

pub use experiment::{mode_switch_experiment, ModeSwitchConfig, ModeSwitchReport};
pub use gradcheck::{grad_check, student_grad_check, GradCheckReport};
pub use loss::{distillation_loss, LossReport, LossWeights, Target};
pub use student::{StudentConfig, StudentModel, StudentOutput, Tap};
pub use teacher::{teacher_features, NativeRes, Teacher, TeacherKind, TeacherOutput, TeacherSpec};
pub use train::{HighResMode, LogRecord, PartitionSpec, StageSpec, TrainConfig, Trainer};
