//! Text-guided spatial adapter.
//!
//! A class text embedding is projected by a linear layer to `s * s` values
//! and reshaped into a single-channel `s x s` grid. Features on the canonical
//! grid are bilinearly downsampled to `s x s`, multiplied channel-wise by the
//! text grid, and upsampled back.
//!
//! Class embeddings are stored in the `CLIPEMB1` format (little-endian):
//!
//! ```text
//! "CLIPEMB1" | u32 num_classes | u32 dim | num_classes x dim f32 | UTF-8 JSON names
//! ```
//!
//! The trailer is normally a JSON array of class names. An object carrying a
//! `names` array (plus free-form metadata such as `model_id`) is also accepted.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cfm::{dims3, CANONICAL_GRID};
use crate::error::{format_err, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{join, uniform, ParamTree};
use crate::tensor::{read_u32, Tensor};

pub const CLIPEMB1_MAGIC: [u8; 8] = *b"CLIPEMB1";

/// Text embedding length produced by the reference text encoder.
pub const DEFAULT_EMBED_DIM: usize = 1024;

/// Side of the adapter grid; the linear layer emits `25 * 25 = 625` values.
pub const DEFAULT_ADAPTER_SIZE: usize = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddingTable {
    class_names: Vec<String>,
    vectors: Tensor,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NameTrailer {
    Names(Vec<String>),
    Object { names: Vec<String> },
}

impl ClassEmbeddingTable {
    pub fn new(class_names: Vec<String>, vectors: Tensor) -> Result<Self> {
        let (n, dim) = match vectors.shape() {
            &[n, d] => (n, d),
            s => return shape_err(format!("embedding table must be 2-d, got {s:?}")),
        };
        if n != class_names.len() {
            return shape_err(format!("{} names for {n} vectors", class_names.len()));
        }
        if dim == 0 || !vectors.is_finite() {
            return Err(Error::InvalidArgument("embeddings must be finite with dim > 0".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &class_names {
            if !seen.insert(name) {
                return Err(Error::InvalidArgument(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self { class_names, vectors })
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn vector(&self, class_id: usize) -> Result<Tensor> {
        if class_id >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "class id {class_id} not in embedding table of {} classes",
                self.len()
            )));
        }
        let d = self.dim();
        Ok(Tensor::from_parts(
            vec![d],
            self.vectors.data()[class_id * d..(class_id + 1) * d].to_vec(),
        ))
    }

    /// Rows for `class_ids`, stacked as `len x dim`.
    pub fn rows(&self, class_ids: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(class_ids.len() * self.dim());
        for &id in class_ids {
            data.extend_from_slice(self.vector(id)?.data());
        }
        Tensor::new(vec![class_ids.len(), self.dim()], data)
    }

    pub fn write_clipemb1<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&CLIPEMB1_MAGIC)?;
        out.write_all(&(self.len() as u32).to_le_bytes())?;
        out.write_all(&(self.dim() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.vectors.numel() * 4);
        for v in self.vectors.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        out.write_all(serde_json::to_string(&self.class_names)?.as_bytes())?;
        Ok(())
    }

    pub fn read_clipemb1<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if magic != CLIPEMB1_MAGIC {
            return Err(format_err("CLIPEMB1", format!("bad magic {magic:02x?}")));
        }
        let n = read_u32(&mut input)? as usize;
        let dim = read_u32(&mut input)? as usize;
        let mut bytes = vec![0u8; n * dim * 4];
        input.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut trailer = String::new();
        input
            .read_to_string(&mut trailer)
            .map_err(|e| format_err("CLIPEMB1", format!("name trailer is not UTF-8: {e}")))?;
        let names = match serde_json::from_str::<NameTrailer>(&trailer)
            .map_err(|e| format_err("CLIPEMB1", format!("name trailer: {e}")))?
        {
            NameTrailer::Names(n) | NameTrailer::Object { names: n } => n,
        };
        let vectors = Tensor::new(vec![n, dim], data).map_err(|e| format_err("CLIPEMB1", e.to_string()))?;
        Self::new(names, vectors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_clipemb1(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_clipemb1(bytes.as_slice())
    }
}

fn name_seed(name: &str, seed: u64, attempt: u32) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    h.update(attempt.to_le_bytes());
    h.finalize().into()
}

fn unit_vector(name: &str, dim: usize, seed: u64, attempt: u32) -> Vec<f32> {
    let mut rng = ChaCha8Rng::from_seed(name_seed(name, seed, attempt));
    // Box-Muller gives an isotropic direction after normalization.
    let mut v: Vec<f64> = (0..dim)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v.into_iter().map(|x| x as f32).collect()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    (dot / (na * nb).max(1e-30)) as f32
}

/// Deterministic unit-norm stand-in text vectors, one per class name.
///
/// At `dim >= 64`, a vector whose |cosine| with an earlier class reaches 0.5
/// is re-drawn with the next attempt counter.
pub fn gen_pseudo_embeddings(class_names: &[String], dim: usize, seed: u64) -> Result<ClassEmbeddingTable> {
    if dim < 8 {
        return Err(Error::InvalidArgument(format!("embedding dim must be >= 8, got {dim}")));
    }
    if class_names.is_empty() {
        return Err(Error::InvalidArgument("at least one class name is required".into()));
    }
    const MAX_ATTEMPTS: u32 = 256;
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(class_names.len());
    for name in class_names {
        let mut attempt = 0;
        let v = loop {
            let v = unit_vector(name, dim, seed, attempt);
            let ok = dim < 64 || rows.iter().all(|r| cosine(r, &v).abs() < 0.5);
            if ok || attempt == MAX_ATTEMPTS {
                break v;
            }
            attempt += 1;
        };
        rows.push(v);
    }
    let vectors = Tensor::new(vec![class_names.len(), dim], rows.concat())?;
    ClassEmbeddingTable::new(class_names.to_vec(), vectors)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Side `s` of the text grid.
    pub size: usize,
    /// Side of the feature grid the adapter reads and writes.
    pub grid: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            size: DEFAULT_ADAPTER_SIZE,
            grid: CANONICAL_GRID,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<T> {
    /// `s^2 x dim`
    pub proj_weight: T,
    /// `s^2`
    pub proj_bias: T,
}

impl<T> ParamTree<T> for AdapterParams<T> {
    type Mapped<U> = AdapterParams<U>;

    fn try_map_leaves<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<AdapterParams<U>, E> {
        Ok(AdapterParams {
            proj_weight: f(&join(prefix, "proj_weight"), &self.proj_weight)?,
            proj_bias: f(&join(prefix, "proj_bias"), &self.proj_bias)?,
        })
    }
}

impl AdapterParams<Tensor> {
    /// Small random weights and a unit bias, so the untrained adapter is close
    /// to a pure down-up resampling of the features.
    pub fn init(size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj_weight: uniform(&[size * size, dim], 1e-2, rng),
            proj_bias: Tensor::ones(&[size * size]),
        }
    }

    pub fn size(&self) -> usize {
        grid_side(self.proj_bias.numel())
    }
}

fn grid_side(n: usize) -> usize {
    (n as f64).sqrt().round() as usize
}

/// Projects a text vector to `s^2` values and reshapes it to `1 x s x s`.
pub fn text_to_grid(g: &mut Graph, text: Var, p: &AdapterParams<Var>) -> Result<Var> {
    let n = g.shape(p.proj_bias)[0];
    let s = grid_side(n);
    if s * s != n {
        return shape_err(format!("adapter output length {n} is not a square"));
    }
    let flat = g.linear(text, p.proj_weight, p.proj_bias)?;
    g.reshape(flat, &[1, s, s])
}

/// Down-projects `features` to the text grid, multiplies by it, and
/// up-projects back to `grid x grid`.
pub fn csm_fuse(g: &mut Graph, features: Var, text_grid: Var, grid: usize) -> Result<Var> {
    let (_, h, w) = dims3(g, features)?;
    let (tc, s, s2) = dims3(g, text_grid)?;
    if tc != 1 || s != s2 {
        return shape_err(format!("text grid must be 1 x s x s, got {:?}", g.shape(text_grid)));
    }
    if (h, w) != (grid, grid) {
        return shape_err(format!(
            "adapter expects features on the {grid}x{grid} grid (ratio {:.2} to the {s}x{s} text grid), got {h}x{w}",
            grid as f64 / s as f64
        ));
    }
    let down = g.bilinear_resize(features, s, s)?;
    let fused = g.mul_channel_broadcast(down, text_grid)?;
    g.bilinear_resize(fused, grid, grid)
}

/// Applies the class's text grid to support and query features alike.
pub fn csm_forward(
    g: &mut Graph,
    support: &[Var],
    query: Var,
    class_id: usize,
    table: &ClassEmbeddingTable,
    p: &AdapterParams<Var>,
    cfg: &AdapterConfig,
) -> Result<(Vec<Var>, Var)> {
    let t = g.constant(table.vector(class_id)?);
    let grid = text_to_grid(g, t, p)?;
    let s = support
        .iter()
        .map(|&f| csm_fuse(g, f, grid, cfg.grid))
        .collect::<Result<Vec<_>>>()?;
    let q = csm_fuse(g, query, grid, cfg.grid)?;
    Ok((s, q))
}
