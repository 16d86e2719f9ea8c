use crate::error::{ElfError, Result};
use crate::tensor::Tensor;

/// Elementwise affine layer `z = exp(log_scale)⊙x + shift` with data-dependent
/// initialization. Storing `log(scale)` keeps the scale positive.
#[derive(Clone, Debug, PartialEq)]
pub struct ActNorm {
    pub log_scale: Tensor,
    pub shift: Tensor,
    initialized: bool,
}

#[derive(Debug)]
pub(crate) struct ActNormCache {
    input: Tensor,
}

/// Builds an ActNorm that standardizes `batch` per dimension.
pub fn actnorm_init(batch: &Tensor) -> Result<ActNorm> {
    let mut layer = ActNorm::new(batch.cols());
    layer.initialize(batch)?;
    Ok(layer)
}

impl ActNorm {
    /// Identity layer awaiting initialization.
    pub fn new(d: usize) -> Self {
        Self {
            log_scale: Tensor::zeros(&[d]),
            shift: Tensor::zeros(&[d]),
            initialized: false,
        }
    }

    pub fn from_params(log_scale: Tensor, shift: Tensor, initialized: bool) -> Result<Self> {
        if log_scale.rank() != 1 || log_scale.shape() != shift.shape() {
            return Err(ElfError::Dimension(format!(
                "actnorm log_scale {:?} and shift {:?} must be equal vectors",
                log_scale.shape(),
                shift.shape()
            )));
        }
        Ok(Self {
            log_scale,
            shift,
            initialized,
        })
    }

    pub fn dims(&self) -> usize {
        self.log_scale.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn scale(&self) -> Vec<f64> {
        self.log_scale.data().iter().map(|v| v.exp()).collect()
    }

    /// Sets scale and shift so `batch` maps to zero mean and unit (population)
    /// standard deviation, then freezes the initialized flag.
    pub fn initialize(&mut self, batch: &Tensor) -> Result<()> {
        if batch.rank() != 2 || batch.cols() != self.dims() {
            return Err(ElfError::Dimension(format!(
                "actnorm over {} dims got batch {:?}",
                self.dims(),
                batch.shape()
            )));
        }
        if batch.rows() < 2 {
            return Err(ElfError::Data("actnorm initialization needs at least 2 rows".into()));
        }
        let mean = batch.col_means();
        let std = batch.col_stds();
        if let Some(dim) = std.iter().position(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(ElfError::ZeroVariance { dim });
        }
        for i in 0..self.dims() {
            self.log_scale.data_mut()[i] = -std[i].ln();
            self.shift.data_mut()[i] = -mean[i] / std[i];
        }
        self.initialized = true;
        Ok(())
    }

    pub fn logdet(&self) -> f64 {
        self.log_scale.sum()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let scale = self.scale();
        let mut z = x.clone();
        for b in 0..z.rows() {
            for ((v, s), t) in z.row_mut(b).iter_mut().zip(&scale).zip(self.shift.data()) {
                *v = s * *v + t;
            }
        }
        Ok(z)
    }

    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        let scale = self.scale();
        let mut x = z.clone();
        for b in 0..x.rows() {
            for ((v, s), t) in x.row_mut(b).iter_mut().zip(&scale).zip(self.shift.data()) {
                *v = (*v - t) / s;
            }
        }
        Ok(x)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.dims() {
            return Err(ElfError::Dimension(format!(
                "actnorm over {} dims got {:?}",
                self.dims(),
                x.shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn cache(&self, x: &Tensor) -> ActNormCache {
        ActNormCache { input: x.clone() }
    }

    /// Gradients for `[log_scale, shift]` given `∂/∂z` and `∂/∂logdet` per row.
    pub(crate) fn backward(
        &self,
        cache: &ActNormCache,
        grad_z: &Tensor,
        grad_logdet: &[f64],
        grads: &mut [Tensor],
    ) -> Tensor {
        let scale = self.scale();
        let x = &cache.input;
        let mut gx = grad_z.clone();
        let (gls, gsh) = grads.split_at_mut(1);
        let (gls, gsh) = (gls[0].data_mut(), gsh[0].data_mut());
        let total_gl: f64 = grad_logdet.iter().sum();
        for b in 0..x.rows() {
            let (xr, gz) = (x.row(b), grad_z.row(b));
            for i in 0..self.dims() {
                gls[i] += gz[i] * xr[i] * scale[i];
                gsh[i] += gz[i];
            }
            for (g, s) in gx.row_mut(b).iter_mut().zip(&scale) {
                *g *= s;
            }
        }
        for v in gls.iter_mut() {
            *v += total_gl;
        }
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_standardizes() {
        // mean 5, std 2 → scale 0.5, shift −2.5
        let batch = Tensor::from_rows(&[vec![3.0], vec![7.0], vec![3.0], vec![7.0]]).unwrap();
        let a = actnorm_init(&batch).unwrap();
        assert!((a.scale()[0] - 0.5).abs() < 1e-15);
        assert!((a.shift.data()[0] + 2.5).abs() < 1e-15);
        let z = a.forward(&batch).unwrap();
        assert!(z.col_means()[0].abs() < 1e-15);
        assert!((z.col_stds()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn standard_batch_is_left_alone() {
        let batch = Tensor::from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let a = actnorm_init(&batch).unwrap();
        assert_eq!(a.scale(), vec![1.0, 1.0]);
        assert_eq!(a.shift.data(), &[0.0, 0.0]);
    }

    #[test]
    fn constant_column_names_dimension() {
        let batch = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 2.0], vec![0.0, 2.0]]).unwrap();
        match actnorm_init(&batch) {
            Err(ElfError::ZeroVariance { dim }) => assert_eq!(dim, 1),
            other => panic!("expected zero-variance error, got {other:?}"),
        }
    }

    #[test]
    fn inverse_round_trips() {
        let a = ActNorm::from_params(Tensor::vector(vec![0.3, -1.2]), Tensor::vector(vec![2.0, -0.5]), true)
            .unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 4.0], vec![-3.0, 0.25]]).unwrap();
        let back = a.inverse(&a.forward(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-14);
        assert!((a.logdet() - (0.3 - 1.2)).abs() < 1e-15);
    }
}
