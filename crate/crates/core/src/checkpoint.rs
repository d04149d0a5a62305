//! Checkpoint directories: parameters, moving-average shadow, optimizer
//! moments, step counter, configuration and vocabulary.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use case_autograd::Matrix;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{CaseError, Result};
use crate::model::CaseModel;
use crate::trainer::{AdamState, TrainConfig, Trainer};
use crate::vocab::{Vocabulary, TOKENIZER_SCHEME};

pub const MAGIC: &[u8; 8] = b"CASEPRM1";
pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const EMA_FILE: &str = "ema.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const STEP_FILE: &str = "step.json";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
    pub vocab_id: String,
    pub tokenizer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct StepRecord {
    step: u64,
    optimizer_steps: u64,
}

/// Writes to a sibling temp file and renames over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| CaseError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CaseError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CaseError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| CaseError::io(path, e))
}

pub fn encode_tensors(named: &[(&str, &Matrix)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(named.len() as u64).to_le_bytes());
    for (name, m) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let (r, c) = m.dim();
        out.extend_from_slice(&(r as u64).to_le_bytes());
        out.extend_from_slice(&(c as u64).to_le_bytes());
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<(String, Matrix)>> {
    let bad = |m: &str| CaseError::checkpoint(path, m);
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(bad("truncated tensor file"));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
    let count = u64_at(take(8)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let r = u64_at(take(8)?) as usize;
        let c = u64_at(take(8)?) as usize;
        let n = r.checked_mul(c).and_then(|n| n.checked_mul(8)).ok_or_else(|| bad("tensor too large"))?;
        let data: Vec<f64> = take(n)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let m = Matrix::from_shape_vec((r, c), data).map_err(|e| bad(&e.to_string()))?;
        out.push((name, m));
    }
    if !cur.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| CaseError::io(path, e))?;
    Ok(buf)
}

fn named<'a>(model: &'a CaseModel, values: &'a [Matrix], prefix: &str) -> Vec<(String, &'a Matrix)> {
    model
        .params
        .ids()
        .map(|id| (format!("{prefix}{}", model.params.name(id)), &values[id.index()]))
        .collect()
}

fn tensor_file(model: &CaseModel, values: &[Matrix]) -> Vec<u8> {
    let n = named(model, values, "");
    encode_tensors(&n.iter().map(|(k, v)| (k.as_str(), *v)).collect::<Vec<_>>())
}

/// Matches stored tensors to the model's parameters by name and shape.
fn restore(model: &CaseModel, stored: Vec<(String, Matrix)>, prefix: &str, path: &Path) -> Result<Vec<Matrix>> {
    let expected = model.params.len();
    let mut lookup: std::collections::HashMap<String, Matrix> = stored.into_iter().collect();
    let mut out = Vec::with_capacity(expected);
    for id in model.params.ids() {
        let name = format!("{prefix}{}", model.params.name(id));
        let m = lookup
            .remove(&name)
            .ok_or_else(|| CaseError::checkpoint(path, format!("missing tensor {name}")))?;
        if m.dim() != model.params.get(id).dim() {
            return Err(CaseError::checkpoint(path, format!("tensor {name} has shape {:?}", m.dim())));
        }
        out.push(m);
    }
    if let Some(extra) = lookup.keys().next() {
        return Err(CaseError::checkpoint(path, format!("unexpected tensor {extra}")));
    }
    Ok(out)
}

pub fn save_checkpoint(dir: impl AsRef<Path>, trainer: &Trainer, init_seed: u64, vocab: &Vocabulary) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| CaseError::io(dir, e))?;
    let model = &trainer.model;
    let config = CheckpointConfig {
        model: model.config.clone(),
        train: trainer.config.clone(),
        init_seed,
        vocab_id: vocab.identifier(),
        tokenizer: TOKENIZER_SCHEME.to_string(),
    };
    let json = serde_json::to_vec_pretty(&config).expect("config serializes");
    write_atomic(&dir.join(CONFIG_FILE), &json)?;
    write_atomic(&dir.join(WEIGHTS_FILE), &tensor_file(model, model.params.values()))?;
    write_atomic(&dir.join(EMA_FILE), &tensor_file(model, &trainer.ema))?;
    let mut moments = named(model, &trainer.adam.m, "m.");
    moments.extend(named(model, &trainer.adam.v, "v."));
    let moments: Vec<(&str, &Matrix)> = moments.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    write_atomic(&dir.join(OPTIMIZER_FILE), &encode_tensors(&moments))?;
    let mut vocab_text = vocab.tokens().join("\n");
    vocab_text.push('\n');
    write_atomic(&dir.join(VOCAB_FILE), vocab_text.as_bytes())?;
    // the step file goes last so a partial write never looks complete
    let step = StepRecord {
        step: trainer.step,
        optimizer_steps: trainer.adam.t,
    };
    write_atomic(&dir.join(STEP_FILE), &serde_json::to_vec(&step).expect("step serializes"))
}

pub fn load_checkpoint_config(dir: impl AsRef<Path>) -> Result<CheckpointConfig> {
    let path = dir.as_ref().join(CONFIG_FILE);
    let bytes = read_bytes(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| CaseError::checkpoint(&path, e.to_string()))
}

pub struct LoadedCheckpoint {
    pub trainer: Trainer,
    pub config: CheckpointConfig,
    pub vocab: Vocabulary,
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let dir = dir.as_ref();
    let config = load_checkpoint_config(dir)?;
    if config.tokenizer != TOKENIZER_SCHEME {
        return Err(CaseError::checkpoint(dir, format!("tokenizer {} is not supported", config.tokenizer)));
    }
    let vocab = Vocabulary::load(dir.join(VOCAB_FILE))?;
    if vocab.identifier() != config.vocab_id {
        return Err(CaseError::checkpoint(dir, "stored vocabulary does not match its identifier"));
    }
    let mut model = CaseModel::new(config.model.clone(), config.init_seed)?;
    let path: PathBuf = dir.join(WEIGHTS_FILE);
    let weights = restore(&model, decode_tensors(&read_bytes(&path)?, &path)?, "", &path)?;
    let path = dir.join(EMA_FILE);
    let ema = restore(&model, decode_tensors(&read_bytes(&path)?, &path)?, "", &path)?;
    let path = dir.join(OPTIMIZER_FILE);
    let mut moments = decode_tensors(&read_bytes(&path)?, &path)?;
    let split = moments.iter().position(|(n, _)| n.starts_with("v.")).unwrap_or(moments.len());
    let second = moments.split_off(split);
    let m = restore(&model, moments, "m.", &path)?;
    let v = restore(&model, second, "v.", &path)?;
    let path = dir.join(STEP_FILE);
    let step: StepRecord =
        serde_json::from_slice(&read_bytes(&path)?).map_err(|e| CaseError::checkpoint(&path, e.to_string()))?;
    model.params.values_mut().clone_from_slice(&weights);
    let mut trainer = Trainer::new(model, config.train.clone())?;
    trainer.ema = ema;
    trainer.adam = AdamState {
        m,
        v,
        t: step.optimizer_steps,
    };
    trainer.step = step.step;
    Ok(LoadedCheckpoint { trainer, config, vocab })
}

/// Refuses a vocabulary other than the one the checkpoint was trained with.
pub fn ensure_vocabulary(config: &CheckpointConfig, vocab_id: &str) -> Result<()> {
    if config.vocab_id == vocab_id {
        Ok(())
    } else {
        Err(CaseError::Config(format!(
            "vocabulary {vocab_id} does not match checkpoint vocabulary {}",
            config.vocab_id
        )))
    }
}
