//! Checkpoint container.
//!
//! Layout, little-endian: `u32` record count; per record `u32` name length,
//! UTF-8 name, `u32` payload length, TEN0 payload; then `u32` JSON length and
//! a JSON trailer holding the training configuration and class names.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csm::ClassEmbeddingTable;
use crate::episodic::TrainConfig;
use crate::error::{format_err, Result};
use crate::model::{EncoderParams, ModelParams};
use crate::params::{load_from, ParamTree};
use crate::tensor::{read_u32, Tensor};

const FORMAT: &str = "checkpoint";
const EMBEDDINGS: &str = "text.embeddings";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub encoder: EncoderParams<Tensor>,
    pub model: ModelParams<Tensor>,
    pub table: ClassEmbeddingTable,
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    config: TrainConfig,
    class_names: Vec<String>,
}

impl Checkpoint {
    pub fn records(&self) -> Vec<(String, Tensor)> {
        let mut out = self.encoder.leaves("encoder");
        out.extend(self.model.leaves("model"));
        out.push((EMBEDDINGS.to_string(), self.table.vectors().clone()));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let records = self.records();
        let mut out = Vec::new();
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in &records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let payload = t.to_ten0_bytes();
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        let trailer = serde_json::to_vec(&Trailer {
            config: self.config.clone(),
            class_names: self.table.class_names().to_vec(),
        })?;
        out.extend_from_slice(&(trailer.len() as u32).to_le_bytes());
        out.extend_from_slice(&trailer);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let count = read_u32(&mut cur)? as usize;
        let mut named = BTreeMap::new();
        for _ in 0..count {
            let name = take(&mut cur, FORMAT)?;
            let name = String::from_utf8(name.to_vec()).map_err(|e| format_err(FORMAT, format!("record name: {e}")))?;
            let payload = take(&mut cur, FORMAT)?;
            if named.insert(name.clone(), Tensor::from_ten0_bytes(payload)?).is_some() {
                return Err(format_err(FORMAT, format!("duplicate record {name}")));
            }
        }
        let json = take(&mut cur, FORMAT)?;
        if !cur.is_empty() {
            return Err(format_err(FORMAT, format!("{} trailing bytes", cur.len())));
        }
        let trailer: Trailer = serde_json::from_slice(json)?;
        let config = trailer.config;
        config.validate()?;
        // shapes only; values come from the records
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let encoder = load_from(&EncoderParams::init(&config.model, &mut rng), "encoder", &named)?;
        let model = load_from(&ModelParams::init(&config.model, &mut rng), "model", &named)?;
        let vectors = named
            .remove(EMBEDDINGS)
            .ok_or_else(|| format_err(FORMAT, "missing text embeddings"))?;
        let expected = encoder.leaves("").len() + model.leaves("").len() + 1;
        if named.len() + 1 != expected {
            return Err(format_err(
                FORMAT,
                format!("{} records, expected {expected}", named.len() + 1),
            ));
        }
        let table = ClassEmbeddingTable::new(trailer.class_names, vectors)?;
        Ok(Self {
            config,
            encoder,
            model,
            table,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn take<'a>(cur: &mut &'a [u8], format: &'static str) -> Result<&'a [u8]> {
    let n = read_u32(cur)? as usize;
    if cur.len() < n {
        return Err(format_err(format, "truncated record"));
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}
