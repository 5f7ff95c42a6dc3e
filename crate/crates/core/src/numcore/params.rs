use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::array::Array;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameter arrays. Names are dotted paths such as `hgat.local.w_att`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    arrays: BTreeMap<String, Array>,
}

#[derive(Serialize, Deserialize)]
struct StoredArray {
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    params: BTreeMap<String, StoredArray>,
}

/// Seeded uniform draw in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_params(rows: usize, cols: usize, fan_in: usize, seed: u64) -> Result<Array> {
    if fan_in == 0 {
        return Err(Error::invalid("fan_in must be >= 1"));
    }
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Ok(Array::from_vec(rows, cols, data))
}

/// Stable per-name seed derivation (FNV-1a) so parameter draws do not
/// depend on creation order.
pub fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.arrays.insert(name.into(), value);
    }

    /// Adds a seeded uniform-initialised parameter.
    pub fn init(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, seed: u64) -> Result<()> {
        let a = init_params(rows, cols, fan_in, name_seed(seed, name))?;
        self.insert(name, a);
        Ok(())
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array::zeros(rows, cols));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.get(name)
    }

    pub fn expect(&self, name: &str) -> &Array {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.arrays.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.arrays.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            arrays: self
                .arrays
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.arrays.extend(other.arrays);
    }

    pub fn map_values(&mut self, f: impl Fn(&str, &mut Array)) {
        for (k, v) in self.arrays.iter_mut() {
            f(k, v);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            params: self
                .arrays
                .iter()
                .map(|(k, a)| {
                    (
                        k.clone(),
                        StoredArray {
                            shape: [a.rows(), a.cols()],
                            values: a.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let mut arrays = BTreeMap::new();
        for (name, s) in ck.params {
            if s.shape[0] * s.shape[1] != s.values.len() {
                return Err(Error::invalid(format!("parameter {name}: shape does not match values")));
            }
            arrays.insert(name, Array::from_vec(s.shape[0], s.shape[1], s.values));
        }
        Ok(ParamStore { arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
