//! Binary hash codes for Fisher vectors and a multi-table bucket index.
//!
//! A small network `Λ` maps a vector to `R` real outputs whose signs form
//! the code. Training uses `tanh(Λ(v))` as a smooth stand-in for the sign.
//! The index keeps `M` tables, each keyed on `L` fixed bit positions, and a
//! query's candidates are the union of its buckets.
//!
//! ```
//! use ctesret::hashing::{build_index, candidates};
//!
//! let codes = vec![
//!     ("a".to_string(), vec![1, -1, 1, -1]),
//!     ("b".to_string(), vec![-1, -1, 1, 1]),
//! ];
//! let index = build_index(&codes, 2, 2, 7).unwrap();
//! let found = candidates(&index, &[1, -1, 1, -1]).unwrap();
//! assert!(found.contains("a"));
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashConfig {
    /// Code length `R`.
    pub bits: usize,
    /// Number of tables `M`.
    pub tables: usize,
    /// Bits per table `L`.
    pub bits_per_table: usize,
    /// Weights of the balance, saturation and decorrelation terms.
    pub eta: [f64; 3],
}

impl Default for HashConfig {
    fn default() -> Self {
        Self {
            bits: 32,
            tables: 10,
            bits_per_table: 12,
            eta: [0.4, 0.3, 0.3],
        }
    }
}

pub fn check_weights(eta: [f64; 3]) -> Result<()> {
    if eta.iter().any(|&e| !(e >= 0.0)) || (eta.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::BadWeights(eta));
    }
    Ok(())
}

/// `Λ(v) = W₂ tanh(W₁ v + b₁) + b₂` with hidden and output width `R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashNet {
    pub input_dim: usize,
    pub bits: usize,
    pub params: ParamStore,
}

impl HashNet {
    pub fn new(input_dim: usize, bits: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        nn::add_linear(&mut params, &mut rng, "hash.0", input_dim, bits);
        nn::add_linear(&mut params, &mut rng, "hash.1", bits, bits);
        Self {
            input_dim,
            bits,
            params,
        }
    }

    /// `Λ` applied to each row of an `n x P` matrix.
    pub fn forward(&self, tape: &Tape, params: &ParamStore, x: Var) -> Result<Var> {
        let (_, cols) = tape.shape(x);
        if cols != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: cols,
            });
        }
        let h = tape.tanh(nn::linear(tape, params, "hash.0", x)?);
        nn::linear(tape, params, "hash.1", h)
    }

    /// Raw outputs `Λ(v)`.
    pub fn output(&self, v: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let x = tape.constant(Tensor::row(v.to_vec()));
        let out = self.forward(&tape, &self.params, x)?;
        Ok(tape.value(out).data)
    }

    /// Stacks vectors into an `n x P` constant.
    pub fn batch(&self, tape: &Tape, vectors: &[Vec<f64>]) -> Result<Var> {
        if vectors.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut data = Vec::with_capacity(vectors.len() * self.input_dim);
        for v in vectors {
            if v.len() != self.input_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.input_dim,
                    got: v.len(),
                });
            }
            data.extend_from_slice(v);
        }
        Ok(tape.constant(Tensor::new(vectors.len(), self.input_dim, data)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut net: HashNet = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        net.params.reindex()?;
        Ok(net)
    }
}

/// Elementwise sign with `sign(0) = +1`.
pub fn sign_code(values: &[f64]) -> Vec<i8> {
    values.iter().map(|&x| if x >= 0.0 { 1 } else { -1 }).collect()
}

pub fn compute_code(net: &HashNet, v: &[f64]) -> Result<Vec<i8>> {
    Ok(sign_code(&net.output(v)?))
}

/// Hash objective on an `n x R` matrix of `tanh(Λ(v))` rows.
pub fn hash_loss_on_tape(tape: &Tape, z: Var, eta: [f64; 3]) -> Var {
    let (n, r) = tape.shape(z);
    let n = n as f64;
    let row_sums = tape.sum_cols(z);
    let balance = tape.scale(tape.sum(tape.abs(row_sums)), eta[0] / n);
    let saturation = tape.scale(
        tape.sum(tape.abs(tape.add_scalar(tape.abs(z), -1.0))),
        eta[1] / n,
    );
    // Σ_{i≠j} z_i z_j = (Σ_i z_i)² − Σ_i z_i², summed over rows.
    let cross = tape.sub(tape.sum(tape.square(row_sums)), tape.sum(tape.square(z)));
    let pairs = (r * (r.saturating_sub(1))) as f64 / 2.0;
    let decorrelation = tape.scale(tape.abs(cross), 2.0 * eta[2] / pairs.max(1.0));
    tape.add(tape.add(balance, saturation), decorrelation)
}

pub fn hash_loss(net: &HashNet, vectors: &[Vec<f64>], eta: [f64; 3]) -> Result<f64> {
    check_weights(eta)?;
    let tape = Tape::new();
    let x = net.batch(&tape, vectors)?;
    let z = tape.tanh(net.forward(&tape, &net.params, x)?);
    Ok(tape.scalar_value(hash_loss_on_tape(&tape, z, eta)))
}

/// Summary statistics of relaxed codes `tanh(Λ(v))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeStats {
    /// Mean over vectors of `|1ᵀ tanh(Λ(v))|`.
    pub mean_abs_sum: f64,
    /// Fraction of entries with `|tanh| > 0.9`.
    pub saturated_fraction: f64,
}

pub fn code_stats(net: &HashNet, vectors: &[Vec<f64>]) -> Result<CodeStats> {
    let tape = Tape::new();
    let x = net.batch(&tape, vectors)?;
    let z = tape.value(tape.tanh(net.forward(&tape, &net.params, x)?));
    let n = z.rows as f64;
    let mean_abs_sum = (0..z.rows)
        .map(|i| z.row_slice(i).iter().sum::<f64>().abs())
        .sum::<f64>()
        / n;
    let saturated = z.data.iter().filter(|x| x.abs() > 0.9).count();
    Ok(CodeStats {
        mean_abs_sum,
        saturated_fraction: saturated as f64 / z.data.len() as f64,
    })
}

/// `R` random unit hyperplanes for the sign-random-projection baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomHyperplanes {
    pub planes: Vec<Vec<f64>>,
}

impl RandomHyperplanes {
    pub fn new(dim: usize, bits: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes = (0..bits)
            .map(|_| {
                let u: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                u.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        Self { planes }
    }

    pub fn code(&self, v: &[f64]) -> Result<Vec<i8>> {
        rh_code(v, &self.planes)
    }
}

/// `[sign(u_rᵀ v)]_r` with `sign(0) = +1`.
pub fn rh_code(v: &[f64], hyperplanes: &[Vec<f64>]) -> Result<Vec<i8>> {
    let proj = hyperplanes
        .iter()
        .map(|u| {
            if u.len() != v.len() {
                return Err(Error::DimensionMismatch {
                    expected: u.len(),
                    got: v.len(),
                });
            }
            Ok(u.iter().zip(v).map(|(a, b)| a * b).sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sign_code(&proj))
}

/// `+1 -> '1'`, `-1 -> '0'`.
pub fn to_bitstring(code: &[i8]) -> String {
    code.iter().map(|&b| if b > 0 { '1' } else { '0' }).collect()
}

pub fn from_bitstring(s: &str) -> Result<Vec<i8>> {
    s.chars()
        .map(|c| match c {
            '1' => Ok(1),
            '0' => Ok(-1),
            other => Err(Error::InvalidConfig(format!("bad code character {other:?}"))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashTable {
    /// Selected bit positions, ascending; the first is the most significant.
    pub positions: Vec<usize>,
    pub buckets: BTreeMap<u64, Vec<String>>,
}

impl HashTable {
    pub fn bucket(&self, code: &[i8]) -> u64 {
        self.positions
            .iter()
            .fold(0u64, |acc, &p| (acc << 1) | u64::from(code[p] > 0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashIndex {
    #[serde(rename = "R")]
    pub bits: usize,
    #[serde(rename = "L")]
    pub bits_per_table: usize,
    #[serde(rename = "M")]
    pub tables_count: usize,
    pub seed: u64,
    pub codes: BTreeMap<String, String>,
    pub tables: Vec<HashTable>,
}

impl HashIndex {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Buckets every code into `m` tables of `l` seeded random bit positions.
pub fn build_index(codes: &[(String, Vec<i8>)], m: usize, l: usize, seed: u64) -> Result<HashIndex> {
    let r = codes.first().map_or(0, |(_, c)| c.len());
    if r < l || l == 0 || l > 63 {
        return Err(Error::TooFewBits {
            bits: r,
            code_len: l,
        });
    }
    if m == 0 {
        return Err(Error::InvalidConfig("index needs at least one table".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tables: Vec<HashTable> = (0..m)
        .map(|_| {
            let mut positions = index::sample(&mut rng, r, l).into_vec();
            positions.sort_unstable();
            HashTable {
                positions,
                buckets: BTreeMap::new(),
            }
        })
        .collect();
    let mut stored = BTreeMap::new();
    for (id, code) in codes {
        if code.len() != r {
            return Err(Error::DimensionMismatch {
                expected: r,
                got: code.len(),
            });
        }
        if stored.insert(id.clone(), to_bitstring(code)).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate corpus id {id}")));
        }
        for t in &mut tables {
            let b = t.bucket(code);
            t.buckets.entry(b).or_default().push(id.clone());
        }
    }
    for t in &mut tables {
        for ids in t.buckets.values_mut() {
            ids.sort();
        }
    }
    Ok(HashIndex {
        bits: r,
        bits_per_table: l,
        tables_count: m,
        seed,
        codes: stored,
        tables,
    })
}

/// Union of the query's buckets over all tables.
pub fn candidates(index: &HashIndex, code: &[i8]) -> Result<BTreeSet<String>> {
    if code.len() != index.bits {
        return Err(Error::DimensionMismatch {
            expected: index.bits,
            got: code.len(),
        });
    }
    let mut out = BTreeSet::new();
    for t in &index.tables {
        if let Some(ids) = t.buckets.get(&t.bucket(code)) {
            out.extend(ids.iter().cloned());
        }
    }
    Ok(out)
}
