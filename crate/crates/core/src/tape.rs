//! Recorded forward passes and the gradients produced from them.

use crate::error::{ElfError, Result};
use crate::flow::actnorm::ActNormCache;
use crate::flow::elf_ar::ElfArCache;
use crate::tensor::Tensor;

#[derive(Debug)]
pub(crate) enum Saved {
    ActNorm(ActNormCache),
    ElfAr(Box<ElfArCache>),
}

#[derive(Debug)]
pub(crate) struct TapeEntry {
    pub layer: usize,
    pub saved: Saved,
}

/// Ordered record of layer applications with the activations their backward
/// passes need. Backward consumes the tape in reverse order.
#[derive(Debug, Default)]
pub struct GradTape {
    entries: Vec<TapeEntry>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub(crate) fn push(&mut self, layer: usize, saved: Saved) {
        self.entries.push(TapeEntry { layer, saved });
    }

    pub(crate) fn pop(&mut self) -> Option<TapeEntry> {
        self.entries.pop()
    }

    pub(crate) fn ensure_recorded(&self) -> Result<()> {
        if self.entries.is_empty() {
            Err(ElfError::State("backward called without a recorded forward pass".into()))
        } else {
            Ok(())
        }
    }
}

/// Parameter gradients, aligned with the owning model's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, alpha: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(alpha));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
