//! Versioned binary container: a JSON manifest followed by flat
//! little-endian `f64` arrays.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes   "CPIGCKPT"
//! version    u32 LE
//! manifest   u64 LE length, then UTF-8 JSON
//! arrays     u64 LE count, then per array: u64 LE length, length x f64 LE
//! ```
//!
//! Networks are recorded in `manifest.networks` with their shape, activation
//! kinds, Adam step count and the index of their first array. Each network
//! owns `6 * depth` consecutive arrays: per layer weights (row-major,
//! `fan_in x fan_out`), bias, then the Adam first and second moments of both.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::mlp::{Gradients, MlpSpec, Network};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"CPIGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub spec: MlpSpec,
    pub step_count: u64,
    pub scalar: String,
    pub first_array: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub networks: BTreeMap<String, NetworkEntry>,
    /// Named free-standing arrays (codebooks, buffers).
    #[serde(default)]
    pub arrays: BTreeMap<String, usize>,
    #[serde(default)]
    pub meta: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub manifest: Manifest,
    pub arrays: Vec<Vec<f64>>,
}

impl Default for Container {
    fn default() -> Self {
        Self::new()
    }
}

impl Container {
    pub fn new() -> Self {
        Self {
            manifest: Manifest {
                format: "cpig-checkpoint".into(),
                version: FORMAT_VERSION,
                ..Manifest::default()
            },
            arrays: Vec::new(),
        }
    }

    pub fn put_array(&mut self, name: &str, data: Vec<f64>) {
        self.manifest.arrays.insert(name.to_string(), self.arrays.len());
        self.arrays.push(data);
    }

    pub fn array(&self, name: &str) -> Result<&[f64]> {
        let idx = *self
            .manifest
            .arrays
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))?;
        self.arrays
            .get(idx)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Format(format!("array `{name}` index {idx} out of range")))
    }

    pub fn put_network<T: Scalar>(&mut self, name: &str, net: &Network<T>) {
        let first_array = self.arrays.len();
        let (m, v) = net.adam_moments();
        for l in 0..net.spec().depth() {
            self.arrays.push(flatten2(&net.weights()[l]));
            self.arrays.push(flatten1(&net.biases()[l]));
            self.arrays.push(flatten2(&m.weights[l]));
            self.arrays.push(flatten1(&m.biases[l]));
            self.arrays.push(flatten2(&v.weights[l]));
            self.arrays.push(flatten1(&v.biases[l]));
        }
        self.manifest.networks.insert(
            name.to_string(),
            NetworkEntry {
                spec: net.spec().clone(),
                step_count: net.step_count(),
                scalar: T::NAME.to_string(),
                first_array,
            },
        );
    }

    pub fn network<T: Scalar>(&self, name: &str) -> Result<Network<T>> {
        let entry = self
            .manifest
            .networks
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing network `{name}`")))?;
        entry.spec.validate()?;
        let depth = entry.spec.depth();
        if entry.first_array + 6 * depth > self.arrays.len() {
            return Err(Error::Format(format!("network `{name}` arrays out of range")));
        }
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        let mut m = Gradients::zeros(&entry.spec);
        let mut v = Gradients::zeros(&entry.spec);
        for (l, w) in entry.spec.layer_widths.windows(2).enumerate() {
            let base = entry.first_array + 6 * l;
            let shape = (w[0], w[1]);
            weights.push(unflatten2(&self.arrays[base], shape, name)?);
            biases.push(unflatten1(&self.arrays[base + 1], w[1], name)?);
            m.weights[l] = unflatten2(&self.arrays[base + 2], shape, name)?;
            m.biases[l] = unflatten1(&self.arrays[base + 3], w[1], name)?;
            v.weights[l] = unflatten2(&self.arrays[base + 4], shape, name)?;
            v.biases[l] = unflatten1(&self.arrays[base + 5], w[1], name)?;
        }
        let mut net = Network::from_parts(entry.spec.clone(), weights, biases);
        net.restore_state(m, v, entry.step_count);
        Ok(net)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let manifest = serde_json::to_vec(&self.manifest)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        w.write_all(&(self.arrays.len() as u64).to_le_bytes())?;
        for a in &self.arrays {
            w.write_all(&(a.len() as u64).to_le_bytes())?;
            for x in a {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let len = read_u64(&mut r)? as usize;
        let mut manifest = vec![0u8; len];
        r.read_exact(&mut manifest)?;
        let manifest: Manifest = serde_json::from_slice(&manifest)?;
        let count = read_u64(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 20));
        let mut buf = [0u8; 8];
        for _ in 0..count {
            let n = read_u64(&mut r)? as usize;
            let mut a = Vec::with_capacity(n.min(1 << 24));
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                a.push(f64::from_le_bytes(buf));
            }
            arrays.push(a);
        }
        Ok(Self { manifest, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn flatten2<T: Scalar>(a: &Array2<T>) -> Vec<f64> {
    a.iter().map(|x| x.to_f64_lossless()).collect()
}

fn flatten1<T: Scalar>(a: &Array1<T>) -> Vec<f64> {
    a.iter().map(|x| x.to_f64_lossless()).collect()
}

fn unflatten2<T: Scalar>(data: &[f64], shape: (usize, usize), name: &str) -> Result<Array2<T>> {
    if data.len() != shape.0 * shape.1 {
        return Err(Error::Format(format!("network `{name}`: weight array has wrong length")));
    }
    Ok(Array2::from_shape_fn(shape, |(i, j)| T::lit(data[i * shape.1 + j])))
}

fn unflatten1<T: Scalar>(data: &[f64], len: usize, name: &str) -> Result<Array1<T>> {
    if data.len() != len {
        return Err(Error::Format(format!("network `{name}`: bias array has wrong length")));
    }
    Ok(Array1::from_iter(data.iter().map(|&x| T::lit(x))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{Activation, AdamConfig, OutputActivation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn network_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Gelu, OutputActivation::Tanh).unwrap();
        let mut net = Network::<f64>::new(spec, &mut rng).unwrap();
        let (_, cache) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (g, _) = net.backward(&cache, &[1.0, -1.0]).unwrap();
        net.adam_step(&g, &AdamConfig::default()).unwrap();

        let mut c = Container::new();
        c.put_network("policy", &net);
        c.put_array("codes", vec![1.0, -0.5]);
        c.manifest.meta = serde_json::json!({ "seed": 7 });
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        let back = Container::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, c);
        let restored: Network<f64> = back.network("policy").unwrap();
        assert_eq!(restored.weights(), net.weights());
        assert_eq!(restored.biases(), net.biases());
        assert_eq!(restored.adam_moments().1, net.adam_moments().1);
        assert_eq!(restored.step_count(), 1);
        assert_eq!(back.array("codes").unwrap(), &[1.0, -0.5]);
    }

    #[test]
    fn rejects_corrupted_headers() {
        let c = Container::new();
        let mut bytes = Vec::new();
        c.write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::read_from(bad.as_slice()), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[8] = 9;
        assert!(matches!(Container::read_from(bad.as_slice()), Err(Error::Format(_))));
    }
}
