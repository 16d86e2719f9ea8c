//! Binary checkpoint format.
//!
//! ```text
//! b"ELF1"  u32 version
//! u32 length, descriptor: UTF-8 `key=value` lines
//! repeated until EOF:
//!     u32 length, UTF-8 tensor name
//!     u32 rank, rank × u64 dims
//!     product(dims) × f64, row-major
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use elf_core::{
    ActNorm, Activation, ElfError, FlowStack, Layer, StackConfig, Standardizer, Tensor,
};

use crate::error::CliError;

pub const MAGIC: &[u8; 4] = b"ELF1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub descriptor: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad(format!("truncated checkpoint at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CliError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("string is not UTF-8"))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.descriptor.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        let desc: String = self.descriptor.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_str(&mut out, &desc);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend((t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(bad("not an ELF checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version} (this build reads {VERSION})"
            )));
        }
        let mut descriptor = Vec::new();
        for line in r.string()?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed descriptor line `{line}`")))?;
            descriptor.push((k.to_string(), v.to_string()));
        }
        let mut tensors = Vec::new();
        while !r.done() {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| bad(format!("tensor `{name}` has an impossible shape {shape:?}")))?;
            let raw = r.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data).map_err(|e| bad(e.to_string()))?));
        }
        Ok(Self { descriptor, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_bytes()).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::from_bytes(&fs::read(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?)
    }
}

/// Where a model's training data came from, needed to rebuild evaluation
/// splits.
#[derive(Clone, Debug, PartialEq)]
pub struct DataInfo {
    pub dataset: String,
    pub data_seed: u64,
    pub split: [f64; 3],
}

/// A flow plus everything needed to evaluate it in data units.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: StackConfig,
    pub stack: FlowStack,
    pub standardizer: Option<Standardizer>,
    pub data: DataInfo,
    pub seed: u64,
    pub step: u64,
}

fn parse<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T, CliError> {
    let raw = ck.get(key).ok_or_else(|| bad(format!("descriptor is missing `{key}`")))?;
    raw.parse()
        .map_err(|_| bad(format!("descriptor value `{key}={raw}` does not parse")))
}

fn list<T: std::str::FromStr>(raw: &str) -> Option<Vec<T>> {
    if raw.is_empty() {
        return Some(Vec::new());
    }
    raw.split(',').map(|s| s.trim().parse().ok()).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Model {
    /// Log-density in data units.
    pub fn log_prob(&self, x: &Tensor) -> Result<Vec<f64>, ElfError> {
        match &self.standardizer {
            Some(s) => {
                let corr = s.log_density_correction();
                Ok(self.stack.log_prob(&s.apply(x))?.into_iter().map(|v| v + corr).collect())
            }
            None => self.stack.log_prob(x),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let descriptor = vec![
            ("dims", c.dims.to_string()),
            ("flows", c.flows.to_string()),
            ("elf_hidden", c.elf_hidden.to_string()),
            ("hypernet_hidden", join(&c.hypernet_hidden)),
            // `{:?}` prints the shortest string that parses back to the same f64
            ("kappa", format!("{:?}", c.kappa)),
            ("activation", c.activation.to_string()),
            ("detach_lipschitz", c.detach_lipschitz.to_string()),
            ("actnorm_initialized", self.stack.is_initialized().to_string()),
            ("dataset", self.data.dataset.clone()),
            ("data_seed", self.data.data_seed.to_string()),
            ("split", self.data.split.iter().map(|f| format!("{f:?}")).collect::<Vec<_>>().join(",")),
            ("seed", self.seed.to_string()),
            ("step", self.step.to_string()),
        ];
        let mut tensors: Vec<(String, Tensor)> = self
            .stack
            .param_names()
            .into_iter()
            .zip(self.stack.params().into_iter().cloned())
            .collect();
        if let Some(s) = &self.standardizer {
            tensors.push(("standardize.mean".into(), Tensor::vector(s.mean.clone())));
            tensors.push(("standardize.std".into(), Tensor::vector(s.std.clone())));
        }
        Checkpoint {
            descriptor: descriptor.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CliError> {
        let hidden: String = parse(ck, "hypernet_hidden")?;
        let activation: String = parse(ck, "activation")?;
        let config = StackConfig {
            dims: parse(ck, "dims")?,
            flows: parse(ck, "flows")?,
            elf_hidden: parse(ck, "elf_hidden")?,
            hypernet_hidden: list(&hidden).ok_or_else(|| bad(format!("bad hypernet_hidden `{hidden}`")))?,
            kappa: parse(ck, "kappa")?,
            activation: activation
                .parse::<Activation>()
                .map_err(|_| bad(format!("unknown activation `{activation}`")))?,
            detach_lipschitz: parse(ck, "detach_lipschitz")?,
        };
        let split_raw: String = parse(ck, "split")?;
        let split: Vec<f64> = list(&split_raw).ok_or_else(|| bad(format!("bad split `{split_raw}`")))?;
        let split: [f64; 3] = split
            .try_into()
            .map_err(|_| bad(format!("split `{split_raw}` needs three fractions")))?;
        let initialized: bool = parse(ck, "actnorm_initialized")?;

        // the seed only affects weights that are overwritten below
        let mut stack = FlowStack::build(&config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))
            .map_err(|e| bad(e.to_string()))?;
        let names = stack.param_names();
        for (name, slot) in names.iter().zip(stack.params_mut()) {
            let t = ck
                .tensor(name)
                .ok_or_else(|| bad(format!("checkpoint is missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(bad(format!(
                    "tensor `{name}` has shape {:?}, architecture needs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        for layer in stack.layers_mut() {
            if let Layer::ActNorm(a) = layer {
                *a = ActNorm::from_params(a.log_scale.clone(), a.shift.clone(), initialized)
                    .map_err(|e| bad(e.to_string()))?;
            }
        }
        let standardizer = match (ck.tensor("standardize.mean"), ck.tensor("standardize.std")) {
            (Some(m), Some(s)) if m.len() == config.dims && s.len() == config.dims => Some(Standardizer {
                mean: m.data().to_vec(),
                std: s.data().to_vec(),
            }),
            (None, None) => None,
            _ => return Err(bad("standardization tensors are incomplete")),
        };
        Ok(Self {
            config,
            stack,
            standardizer,
            data: DataInfo {
                dataset: parse(ck, "dataset")?,
                data_seed: parse(ck, "data_seed")?,
                split,
            },
            seed: parse(ck, "seed")?,
            step: parse(ck, "step")?,
        })
    }
}
