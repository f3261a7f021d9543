use rand_distr::{Distribution, Normal};

use super::spec::ModelSpec;
use super::tensor::Scalar;
use crate::rng;
use crate::{Error, Result};

/// Which part of the network a tensor belongs to. Only `Conv` tensors transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Section {
    Conv,
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub section: Section,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// All weights and biases, in a fixed order:
/// `conv{i}.weight [3,3,cin,cout]`, `conv{i}.bias [cout]` per block, then
/// `dense1`, `dense2` and `output` with weights stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    pub tensors: Vec<ParamTensor<T>>,
}

/// (name, section, shape, fan_in) for every tensor of a spec.
pub fn layout(spec: &ModelSpec) -> Vec<(String, Section, Vec<usize>, usize)> {
    let mut out = Vec::new();
    for b in 0..spec.blocks() {
        let (cin, cout) = (spec.cin_at(b), spec.conv_channels[b]);
        out.push((format!("conv{}.weight", b + 1), Section::Conv, vec![3, 3, cin, cout], 9 * cin));
        out.push((format!("conv{}.bias", b + 1), Section::Conv, vec![cout], 9 * cin));
    }
    let mut fan_in = spec.flat_dim();
    let dims = [spec.dense_units[0], spec.dense_units[1], 1];
    for (i, &units) in dims.iter().enumerate() {
        let name = if i == 2 { "output".to_string() } else { format!("dense{}", i + 1) };
        out.push((format!("{name}.weight"), Section::Dense, vec![fan_in, units], fan_in));
        out.push((format!("{name}.bias"), Section::Dense, vec![units], fan_in));
        fan_in = units;
    }
    out
}

impl<T: Scalar> Parameters<T> {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let tensors = layout(spec)
            .into_iter()
            .map(|(name, section, shape, _)| {
                let n = shape.iter().product();
                ParamTensor { name, section, shape, data: vec![T::zero(); n] }
            })
            .collect();
        Self { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor { data: vec![T::zero(); t.data.len()], ..t.clone() })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn conv_weight(&self, block: usize) -> &[T] {
        &self.tensors[2 * block].data
    }

    pub fn conv_bias(&self, block: usize) -> &[T] {
        &self.tensors[2 * block + 1].data
    }

    /// Dense layer `d` (0 = dense1, 1 = dense2, 2 = output) given `blocks` conv blocks.
    pub fn dense_weight(&self, blocks: usize, d: usize) -> &[T] {
        &self.tensors[2 * blocks + 2 * d].data
    }

    pub fn dense_bias(&self, blocks: usize, d: usize) -> &[T] {
        &self.tensors[2 * blocks + 2 * d + 1].data
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Checks names and shapes against the spec's layout.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        let want = layout(spec);
        if want.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tensors, found {}",
                want.len(),
                self.tensors.len()
            )));
        }
        for ((name, _, shape, _), t) in want.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    t.name, t.shape
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    section: t.section,
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::of(v.to_f64().unwrap_or(f64::NAN))).collect(),
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// He initialization: weights ~ N(0, 2 / fan_in), biases zero.
///
/// Each tensor draws from its own stream keyed by its name, so a tensor's
/// values depend only on (seed, name, shape).
pub fn init_params<T: Scalar>(spec: &ModelSpec, seed: u64) -> Parameters<T> {
    let tensors = layout(spec)
        .into_iter()
        .map(|(name, section, shape, fan_in)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![T::zero(); n]
            } else {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let mut r = rng::stream(seed, &format!("init/{name}"));
                (0..n).map(|_| T::of(normal.sample(&mut r))).collect()
            };
            ParamTensor { name, section, shape, data }
        })
        .collect();
    Parameters { tensors }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = ModelSpec::default();
        let a: Parameters<f32> = init_params(&spec, 11);
        assert_eq!(a, init_params(&spec, 11));
        assert_ne!(a, init_params(&spec, 12));
        for t in a.tensors.iter().filter(|t| t.name.ends_with(".bias")) {
            assert!(t.data.iter().all(|&v| v == 0.0), "{}", t.name);
        }
        a.check_against(&spec).unwrap();
        // ~330k parameters for the default spec
        assert_eq!(a.num_values(), 8 * 27 + 8 + 16 * 72 + 16 + 32 * 144 + 32 + 512 * 512 + 512 + 512 * 128 + 128 + 128 + 1);
    }

    #[test]
    fn weight_variance_matches_he() {
        // dense2.weight has 512*128 values, fan_in 512; check the first 4096
        let spec = ModelSpec::default();
        let p: Parameters<f64> = init_params(&spec, 5);
        let w = &p.get("dense2.weight").unwrap().data[..4096];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let want = 2.0 / 512.0;
        assert!((var / want - 1.0).abs() < 0.2, "var {var} vs {want}");
    }

    #[test]
    fn sections_partition_conv_and_dense() {
        let l = layout(&ModelSpec::default());
        let conv: Vec<_> = l.iter().filter(|e| e.1 == Section::Conv).map(|e| e.0.as_str()).collect();
        assert_eq!(conv, ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "conv3.weight", "conv3.bias"]);
        assert_eq!(l.last().unwrap().2, vec![1]);
    }

    #[test]
    fn f32_and_f64_init_agree() {
        let spec = ModelSpec::with_channels(8, vec![2]);
        let a: Parameters<f32> = init_params(&spec, 1);
        let b: Parameters<f64> = init_params(&spec, 1);
        assert_eq!(a, b.cast::<f32>());
    }
}
