//! JSON checkpoints for networks.
//!
//! Floats are written with the shortest decimal form that parses back to the
//! identical `f64`, so save → load is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    /// Row-major `fan_in × fan_out`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// What the network is used for, e.g. `"mechanism"`.
    pub role: String,
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<LayerRecord>,
    /// Named widths needed to rebuild the owning model (`d_a`, `d_u`, …).
    #[serde(default)]
    pub dims: BTreeMap<String, usize>,
    pub rng_seed: u64,
    pub config_digest: String,
}

impl Checkpoint {
    pub fn from_mlp(role: &str, net: &Mlp, rng_seed: u64, config_digest: &str) -> Self {
        let layers = net
            .weights()
            .iter()
            .zip(net.biases())
            .map(|(w, b)| LayerRecord {
                weight: w.data().to_vec(),
                bias: b.data().to_vec(),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            role: role.to_string(),
            layer_dims: net.layer_dims().to_vec(),
            activation: net.activation(),
            layers,
            dims: BTreeMap::new(),
            rng_seed,
            config_digest: config_digest.to_string(),
        }
    }

    pub fn with_dim(mut self, name: &str, value: usize) -> Self {
        self.dims.insert(name.to_string(), value);
        self
    }

    pub fn dim(&self, name: &str) -> Result<usize> {
        self.dims
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("checkpoint '{}' lacks dimension '{name}'", self.role)))
    }

    pub fn to_mlp(&self) -> Result<Mlp> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        if self.layer_dims.len() != self.layers.len() + 1 {
            return Err(Error::Schema(format!(
                "{} layer dims but {} layers",
                self.layer_dims.len(),
                self.layers.len()
            )));
        }
        let mut layers = Vec::new();
        for (i, rec) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = (self.layer_dims[i], self.layer_dims[i + 1]);
            let w = Tensor::from_vec(fan_in, fan_out, rec.weight.clone())
                .map_err(|e| Error::Schema(format!("layer {i} weight: {e}")))?;
            let b = Tensor::from_vec(1, fan_out, rec.bias.clone())
                .map_err(|e| Error::Schema(format!("layer {i} bias: {e}")))?;
            layers.push((w, b));
        }
        Mlp::from_layers(layers, self.activation)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::arg(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(seed in any::<u64>(), scale in -300i32..300) {
            let mut rng = RngStream::new(seed, 0);
            let mut net = Mlp::new(&[3, 4, 2], Activation::Tanh, &mut rng).unwrap();
            for p in net.params_mut() {
                for v in p.data_mut() {
                    *v *= 10f64.powi(scale) * rng.normal();
                }
            }
            let ck = Checkpoint::from_mlp("mechanism", &net, seed, "abc").with_dim("d_u", 3);
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            prop_assert_eq!(&back, &ck);
            let restored = back.to_mlp().unwrap();
            for (a, b) in restored.params().iter().zip(net.params()) {
                let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn rejects_inconsistent_layers() {
        let net = Mlp::zeros(&[2, 3], Activation::Tanh).unwrap();
        let mut ck = Checkpoint::from_mlp("predictor", &net, 0, "");
        ck.layers[0].weight.pop();
        assert!(matches!(ck.to_mlp(), Err(Error::Schema(_))));
        ck.layer_dims.push(4);
        assert!(matches!(ck.to_mlp(), Err(Error::Schema(_))));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.json");
        let net = Mlp::new(&[2, 3, 1], Activation::Relu, &mut RngStream::new(1, 1)).unwrap();
        let ck = Checkpoint::from_mlp("predictor", &net, 1, "d");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(!dir.path().join("nested/.model.json.tmp").exists());
    }
}
