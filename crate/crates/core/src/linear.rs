//! Masked fully-connected layers.

use crate::error::{ElfError, Result};
use crate::tensor::{gemm, Tensor};

/// Linear layer whose effective weight is `weight ⊙ mask`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedLinear {
    pub weight: Tensor,
    pub bias: Tensor,
    mask: Tensor,
}

impl MaskedLinear {
    pub fn new(weight: Tensor, bias: Tensor, mask: Tensor) -> Result<Self> {
        if weight.rank() != 2 || mask.shape() != weight.shape() {
            return Err(ElfError::Dimension(format!(
                "weight {:?} and mask {:?} must be equal rank-2 shapes",
                weight.shape(),
                mask.shape()
            )));
        }
        if bias.shape() != [weight.rows()] {
            return Err(ElfError::Dimension(format!(
                "bias {:?} does not match {} outputs",
                bias.shape(),
                weight.rows()
            )));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(ElfError::Dimension("mask must be binary".into()));
        }
        Ok(Self { weight, bias, mask })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    fn effective_weight(&self) -> Vec<f64> {
        self.weight
            .data()
            .iter()
            .zip(self.mask.data())
            .map(|(w, m)| w * m)
            .collect()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        matmul_masked(self, input)
    }

    /// Accumulates `∂/∂weight` and `∂/∂bias` into `grad_w`/`grad_b` and returns
    /// the gradient with respect to `input`.
    pub fn backward(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
        grad_w: &mut Tensor,
        grad_b: &mut Tensor,
    ) -> Tensor {
        let (batch, n_in, n_out) = (input.rows(), self.in_dim(), self.out_dim());
        // grad_w[o,i] += Σ_b grad_out[b,o]·input[b,i], then masked
        let mut gw = vec![0.0; n_out * n_in];
        gemm(
            n_out,
            batch,
            n_in,
            grad_out.data(),
            true,
            input.data(),
            false,
            &mut gw,
            false,
        );
        for ((acc, g), m) in grad_w.data_mut().iter_mut().zip(&gw).zip(self.mask.data()) {
            *acc += g * m;
        }
        let gb = grad_b.data_mut();
        for b in 0..batch {
            for (acc, g) in gb.iter_mut().zip(grad_out.row(b)) {
                *acc += g;
            }
        }
        let mut grad_in = Tensor::zeros(&[batch, n_in]);
        gemm(
            batch,
            n_out,
            n_in,
            grad_out.data(),
            false,
            &self.effective_weight(),
            false,
            grad_in.data_mut(),
            false,
        );
        grad_in
    }
}

/// `out[b,o] = bias[o] + Σ_i weight[o,i]·mask[o,i]·input[b,i]`.
pub fn matmul_masked(layer: &MaskedLinear, input: &Tensor) -> Result<Tensor> {
    if input.rank() != 2 || input.cols() != layer.in_dim() {
        return Err(ElfError::Dimension(format!(
            "input {:?} does not match layer in-dim {}",
            input.shape(),
            layer.in_dim()
        )));
    }
    let (batch, n_out) = (input.rows(), layer.out_dim());
    let mut out = Tensor::zeros(&[batch, n_out]);
    for b in 0..batch {
        out.row_mut(b).copy_from_slice(layer.bias.data());
    }
    gemm(
        batch,
        layer.in_dim(),
        n_out,
        input.data(),
        false,
        &layer.effective_weight(),
        true,
        out.data_mut(),
        true,
    );
    Ok(out)
}
