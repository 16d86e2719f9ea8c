//! Exact-Lipschitz flows.
//!
//! One-dimensional one-layer FELU networks have Lipschitz constants that can be
//! computed exactly from `2H` breakpoint evaluations. Driving their parameters
//! from a MADE hypernetwork gives an autoregressive residual flow (ELF-AR)
//! whose log-determinant is a closed-form sum over dimensions and whose
//! inverse is a fixed-point iteration over the whole input.

pub mod data;
pub mod elf;
pub mod error;
pub mod felu;
pub mod flow;
pub mod linear;
pub mod made;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use data::{
    checkerboard_log_density, gen_checkerboard, gen_eight_gaussians, load_csv, BatchSource, DatasetKind,
    DatasetSpec, EpochSampler, Standardizer, SyntheticStream, TabularSplits,
};
pub use elf::{
    batch_lipschitz, elf_dx, elf_forward, elf_lipschitz, elf_normalized, ElfEval, ElfParams, ElfRef, LipschitzInfo,
    NormalizedElf,
};
pub use error::{ElfError, Result};
pub use flow::{
    actnorm_init, logdet_bound_check, stack_log_prob, stack_sample, ActNorm, ElfArConfig, ElfArLayer,
    FixedPointConfig, FlowStack, Layer, StackConfig,
};
pub use felu::{felu, felu_d1, felu_d2, Activation};
pub use linear::{matmul_masked, MaskedLinear};
pub use made::{made_masks, MadeHypernet};
pub use tape::{GradTape, Gradients};
pub use tensor::Tensor;
pub use train::{
    adam_step, clip_global_norm, nll_loss, train, AdamState, ClipMode, LrSchedule, StepRecord, TrainConfig,
    TrainOutcome,
};
