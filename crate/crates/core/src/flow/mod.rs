//! Invertible layers and their composition.

pub mod actnorm;
pub mod elf_ar;
pub mod stack;

pub use actnorm::{actnorm_init, ActNorm};
pub use elf_ar::{logdet_bound_check, ElfArConfig, ElfArLayer, LayerStats, LogdetBounds};
pub use stack::{
    stack_log_prob, stack_sample, FixedPointConfig, FlowStack, Layer, SampleStats, StackConfig,
    StackOutput,
};

/// `log N(z; 0, I)` for one row.
pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    let d = z.len() as f64;
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
}
