use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::actnorm::ActNorm;
use super::elf_ar::{ElfArConfig, ElfArLayer, LayerStats};
use super::standard_normal_log_density;
use crate::error::{ElfError, Result};
use crate::felu::Activation;
use crate::tape::{GradTape, Gradients, Saved};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    ActNorm(ActNorm),
    ElfAr(ElfArLayer),
}

impl Layer {
    fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::ActNorm(a) => vec![&a.log_scale, &a.shift],
            Layer::ElfAr(e) => e.hypernet.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::ActNorm(a) => vec![&mut a.log_scale, &mut a.shift],
            Layer::ElfAr(e) => e.hypernet.params_mut(),
        }
    }

    fn param_names(&self, idx: usize) -> Vec<String> {
        match self {
            Layer::ActNorm(_) => vec![
                format!("layer{idx}.actnorm.log_scale"),
                format!("layer{idx}.actnorm.shift"),
            ],
            Layer::ElfAr(e) => (0..e.hypernet.num_layers())
                .flat_map(|l| {
                    [
                        format!("layer{idx}.made.{l}.weight"),
                        format!("layer{idx}.made.{l}.bias"),
                    ]
                })
                .collect(),
        }
    }
}

/// Architecture of a full flow: a leading ActNorm followed by `flows`
/// repetitions of ELF-AR → ActNorm.
#[derive(Clone, Debug, PartialEq)]
pub struct StackConfig {
    pub dims: usize,
    pub flows: usize,
    pub elf_hidden: usize,
    pub hypernet_hidden: Vec<usize>,
    pub kappa: f64,
    pub activation: Activation,
    pub detach_lipschitz: bool,
}

impl StackConfig {
    pub fn layer_config(&self) -> ElfArConfig {
        ElfArConfig {
            dims: self.dims,
            elf_hidden: self.elf_hidden,
            hypernet_hidden: self.hypernet_hidden.clone(),
            kappa: self.kappa,
            activation: self.activation,
            detach_lipschitz: self.detach_lipschitz,
        }
    }
}

/// Fixed-point inversion settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPointConfig {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackOutput {
    pub z: Tensor,
    /// Total log-determinant per sample.
    pub logdet: Vec<f64>,
    /// Log-determinant contributed by each layer, per sample.
    pub layer_logdets: Vec<Vec<f64>>,
    pub stats: LayerStats,
}

/// Mean fixed-point iterations per ELF-AR layer (in stack order).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleStats {
    pub mean_iterations: Vec<f64>,
}

/// Ordered invertible layers over a standard normal base.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowStack {
    dims: usize,
    layers: Vec<Layer>,
}

impl FlowStack {
    pub fn new(dims: usize) -> Self {
        Self {
            dims,
            layers: Vec::new(),
        }
    }

    pub fn build<R: Rng + ?Sized>(config: &StackConfig, rng: &mut R) -> Result<Self> {
        let mut stack = Self::new(config.dims);
        stack.push(Layer::ActNorm(ActNorm::new(config.dims)))?;
        let layer_config = config.layer_config();
        for _ in 0..config.flows {
            stack.push(Layer::ElfAr(ElfArLayer::new(&layer_config, rng)?))?;
            stack.push(Layer::ActNorm(ActNorm::new(config.dims)))?;
        }
        Ok(stack)
    }

    pub fn push(&mut self, layer: Layer) -> Result<()> {
        let d = match &layer {
            Layer::ActNorm(a) => a.dims(),
            Layer::ElfAr(e) => e.dims(),
        };
        if d != self.dims {
            return Err(ElfError::Dimension(format!(
                "layer over {d} dims pushed onto a {}-dim stack",
                self.dims
            )));
        }
        self.layers.push(layer);
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn elf_layers(&self) -> impl Iterator<Item = &ElfArLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::ElfAr(e) => Some(e),
            Layer::ActNorm(_) => None,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.layers.iter().all(|l| match l {
            Layer::ActNorm(a) => a.is_initialized(),
            Layer::ElfAr(_) => true,
        })
    }

    /// Runs `batch` through the stack, initializing every uninitialized
    /// ActNorm on the activations it receives.
    pub fn initialize(&mut self, batch: &Tensor) -> Result<()> {
        self.check(batch)?;
        let mut h = batch.clone();
        for layer in &mut self.layers {
            match layer {
                Layer::ActNorm(a) => {
                    if !a.is_initialized() {
                        a.initialize(&h)?;
                    }
                    h = a.forward(&h)?;
                }
                Layer::ElfAr(e) => h = e.forward(&h)?.0,
            }
        }
        Ok(())
    }

    pub fn set_detach_lipschitz(&mut self, detach: bool) {
        for layer in &mut self.layers {
            if let Layer::ElfAr(e) = layer {
                e.set_detach_lipschitz(detach);
            }
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.dims {
            return Err(ElfError::Dimension(format!(
                "{}-dim flow got input {:?}",
                self.dims,
                x.shape()
            )));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor, mut tape: Option<&mut GradTape>) -> Result<StackOutput> {
        self.check(x)?;
        let batch = x.rows();
        let mut h = x.clone();
        let mut logdet = vec![0.0; batch];
        let mut layer_logdets = Vec::with_capacity(self.layers.len());
        let mut stats = LayerStats::default();
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::ActNorm(a) => {
                    if let Some(t) = tape.as_deref_mut() {
                        t.push(idx, Saved::ActNorm(a.cache(&h)));
                    }
                    h = a.forward(&h)?;
                    let ld = a.logdet();
                    logdet.iter_mut().for_each(|v| *v += ld);
                    layer_logdets.push(vec![ld; batch]);
                }
                Layer::ElfAr(e) => {
                    let out = e.run(&h, tape.is_some())?;
                    if let (Some(t), Some(cache)) = (tape.as_deref_mut(), out.cache) {
                        t.push(idx, Saved::ElfAr(Box::new(cache)));
                    }
                    h = out.y;
                    for (acc, v) in logdet.iter_mut().zip(&out.logdet) {
                        *acc += v;
                    }
                    layer_logdets.push(out.logdet);
                    stats.merge(&out.stats);
                }
            }
        }
        Ok(StackOutput {
            z: h,
            logdet,
            layer_logdets,
            stats,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<StackOutput> {
        self.run(x, None)
    }

    /// Forward pass that records what [`FlowStack::backward`] needs.
    pub fn forward_recorded(&self, x: &Tensor, tape: &mut GradTape) -> Result<StackOutput> {
        tape.clear();
        self.run(x, Some(tape))
    }

    /// Backpropagates `∂loss/∂z` and `∂loss/∂logdet` through the recorded
    /// layers, in reverse order, and returns parameter gradients.
    pub fn backward(&self, tape: &mut GradTape, grad_z: &Tensor, grad_logdet: &[f64]) -> Result<Gradients> {
        tape.ensure_recorded()?;
        let mut per_layer: Vec<Vec<Tensor>> = self
            .layers
            .iter()
            .map(|l| l.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
            .collect();
        let mut g = grad_z.clone();
        while let Some(entry) = tape.pop() {
            let grads = &mut per_layer[entry.layer];
            g = match (&self.layers[entry.layer], &entry.saved) {
                (Layer::ActNorm(a), Saved::ActNorm(c)) => a.backward(c, &g, grad_logdet, grads),
                (Layer::ElfAr(e), Saved::ElfAr(c)) => e.backward(c, &g, grad_logdet, grads),
                _ => {
                    return Err(ElfError::State(format!(
                        "tape entry does not match layer {}",
                        entry.layer
                    )))
                }
            };
        }
        Ok(Gradients {
            names: self.param_names(),
            tensors: per_layer.into_iter().flatten().collect(),
        })
    }

    pub fn log_prob(&self, x: &Tensor) -> Result<Vec<f64>> {
        let out = self.forward(x)?;
        Ok((0..x.rows())
            .map(|b| standard_normal_log_density(out.z.row(b)) + out.logdet[b])
            .collect())
    }

    /// Maps base samples back to data space, layer by layer in reverse.
    pub fn inverse(&self, z: &Tensor, fp: FixedPointConfig) -> Result<(Tensor, SampleStats)> {
        self.check(z)?;
        let mut h = z.clone();
        let mut means = Vec::new();
        for layer in self.layers.iter().rev() {
            h = match layer {
                Layer::ActNorm(a) => a.inverse(&h)?,
                Layer::ElfAr(e) => {
                    let (x, iters) = e.invert(&h, fp.max_iters, fp.tol)?;
                    let n = iters.len().max(1) as f64;
                    means.push(iters.iter().sum::<usize>() as f64 / n);
                    x
                }
            };
        }
        means.reverse();
        Ok((
            h,
            SampleStats {
                mean_iterations: means,
            },
        ))
    }

    /// Draws `n` base samples from a generator seeded with `seed`.
    pub fn base_samples(&self, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * self.dims).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::from_vec(&[n, self.dims], data).expect("shape matches by construction")
    }

    pub fn sample(&self, n: usize, seed: u64, fp: FixedPointConfig) -> Result<(Tensor, SampleStats)> {
        self.inverse(&self.base_samples(n, seed), fp)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.param_names(i))
            .collect()
    }

    /// Trainable parameter count, excluding masked-out weights.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::ActNorm(a) => 2 * a.dims(),
                Layer::ElfAr(e) => e
                    .hypernet()
                    .layers()
                    .iter()
                    .map(|ml| ml.mask().data().iter().filter(|&&m| m != 0.0).count() + ml.out_dim())
                    .sum(),
            })
            .sum()
    }
}

/// `log p(x) = log N(f(x); 0, I) + Σ layer log-dets`.
pub fn stack_log_prob(stack: &FlowStack, x: &Tensor) -> Result<Vec<f64>> {
    stack.log_prob(x)
}

pub fn stack_sample(stack: &FlowStack, n: usize, seed: u64, fp: FixedPointConfig) -> Result<Tensor> {
    Ok(stack.sample(n, seed, fp)?.0)
}
