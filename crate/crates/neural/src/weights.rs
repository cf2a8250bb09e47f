//! Versioned weights container.
//!
//! ```text
//! CALCNET-WEIGHTS 1
//! fingerprint <hex>
//! seed <u64>
//! steps <u64>
//! metadata <single-line JSON>
//! tensors <count>
//! tensor <name> <d0>x<d1>x...      (one line per tensor, in layer order)
//! end
//! <payload: every tensor as little-endian f32, same order>
//! ```

use std::io::{BufRead, Read};
use std::path::Path;

use crate::error::{NeuralError, Result};
use crate::layer::{ParamSlot, Sequential};
use crate::real::Real;
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &str = "CALCNET-WEIGHTS";
pub const WEIGHTS_VERSION: u32 = 1;

/// Anything with named trainable tensors and an architecture fingerprint.
pub trait Model<F: Real> {
    fn fingerprint(&self) -> String;
    fn slots(&mut self) -> Vec<ParamSlot<'_, F>>;
    /// Parameters and non-trainable state, in a fixed order.
    fn named_tensors(&self) -> Vec<(String, &Tensor<F>)>;
    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)>;
    fn zero_grad(&mut self);
}

impl<F: Real> Model<F> for Sequential<F> {
    fn fingerprint(&self) -> String {
        crate::spec::fingerprint(&self.specs())
    }

    fn slots(&mut self) -> Vec<ParamSlot<'_, F>> {
        Sequential::slots(self, "net")
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        Sequential::named_tensors(self, "net")
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        Sequential::named_tensors_mut(self, "net")
    }

    fn zero_grad(&mut self) {
        Sequential::zero_grad(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub fingerprint: String,
    pub seed: u64,
    pub steps: u64,
    /// Free-form JSON describing training settings.
    pub metadata: String,
    pub tensors: Vec<NamedTensor>,
}

impl NetworkWeights {
    pub fn capture<F: Real, M: Model<F>>(model: &M, seed: u64, steps: u64, metadata: String) -> Self {
        let tensors = model
            .named_tensors()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Self { fingerprint: model.fingerprint(), seed, steps, metadata, tensors }
    }

    /// Copies the stored values into `model` after checking the fingerprint
    /// and every tensor name and shape.
    pub fn apply<F: Real, M: Model<F>>(&self, model: &mut M) -> Result<()> {
        let expected = model.fingerprint();
        if expected != self.fingerprint {
            return Err(NeuralError::FingerprintMismatch { expected, found: self.fingerprint.clone() });
        }
        let targets = model.named_tensors_mut();
        if targets.len() != self.tensors.len() {
            return Err(NeuralError::Format(format!(
                "model has {} tensors, file has {}",
                targets.len(),
                self.tensors.len()
            )));
        }
        for ((name, target), stored) in targets.into_iter().zip(&self.tensors) {
            if name != stored.name || target.shape() != stored.shape.as_slice() {
                return Err(NeuralError::Format(format!(
                    "tensor `{}` {:?} does not match model tensor `{name}` {:?}",
                    stored.name,
                    stored.shape,
                    target.shape()
                )));
            }
            for (dst, &src) in target.data_mut().iter_mut().zip(&stored.values) {
                *dst = F::from_f64_lossy(src as f64);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!(
            "{WEIGHTS_MAGIC} {WEIGHTS_VERSION}\nfingerprint {}\nseed {}\nsteps {}\nmetadata {}\ntensors {}\n",
            self.fingerprint,
            self.seed,
            self.steps,
            self.metadata.replace('\n', " "),
            self.tensors.len()
        );
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {} {}\n", t.name, dims.join("x")));
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        for t in &self.tensors {
            for v in &t.values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| NeuralError::Format(msg.to_string());
        let mut reader = std::io::Cursor::new(bytes);
        let mut line = String::new();
        let mut next_line = |reader: &mut std::io::Cursor<&[u8]>| -> Result<String> {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(bad("unexpected end of header"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        let field = |l: &str, key: &str| -> Result<String> {
            l.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| NeuralError::Format(format!("expected `{key}` line, got `{l}`")))
        };

        let magic = next_line(&mut reader)?;
        let version = field(&magic, WEIGHTS_MAGIC)?;
        if version != WEIGHTS_VERSION.to_string() {
            return Err(NeuralError::Format(format!("unsupported weights version `{version}`")));
        }
        let fingerprint = field(&next_line(&mut reader)?, "fingerprint")?;
        let seed = field(&next_line(&mut reader)?, "seed")?.parse().map_err(|_| bad("bad seed"))?;
        let steps = field(&next_line(&mut reader)?, "steps")?.parse().map_err(|_| bad("bad step count"))?;
        let metadata = field(&next_line(&mut reader)?, "metadata")?;
        let count: usize =
            field(&next_line(&mut reader)?, "tensors")?.parse().map_err(|_| bad("bad tensor count"))?;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let l = next_line(&mut reader)?;
            let rest = field(&l, "tensor")?;
            let (name, dims) = rest.rsplit_once(' ').ok_or_else(|| bad("bad tensor line"))?;
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad("bad tensor shape")))
                .collect::<Result<Vec<_>>>()?;
            headers.push((name.to_string(), shape));
        }
        if next_line(&mut reader)? != "end" {
            return Err(bad("missing `end` line"));
        }
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload)?;
        let expected: usize = headers.iter().map(|(_, s)| s.iter().product::<usize>() * 4).sum();
        if payload.len() != expected {
            return Err(NeuralError::Format(format!(
                "payload has {} bytes, header declares {expected}",
                payload.len()
            )));
        }
        let mut offset = 0;
        let tensors = headers
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let values = payload[offset..offset + 4 * len]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                offset += 4 * len;
                NamedTensor { name, shape, values }
            })
            .collect();
        Ok(Self { fingerprint, seed, steps, metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }
}
