//! Orchestration: artifact layout, binary checkpoints, and the two-stage
//! training / inference / evaluation commands behind the CLI.

pub mod infer;
pub mod stage1;
pub mod stage2;

use crate::config::{DimsConfig, RunConfig};
use crate::corpus::{Corpus, SyntheticPatient};
use crate::error::{PipelineError, Result};
use crate::mrvit::ViTConfig;
use crate::seeds::fnv1a64;
use ndarray::Array2;
use pmprg_autodiff::ParamStore;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// All artifact locations relative to one `--out` directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub out: PathBuf,
}

impl Paths {
    pub fn new(out: &Path) -> Self {
        Self { out: out.to_path_buf() }
    }
    pub fn corpus_dir(&self) -> PathBuf {
        self.out.join("corpus")
    }
    pub fn splits(&self) -> PathBuf {
        self.out.join("splits.json")
    }
    pub fn stage1_dir(&self) -> PathBuf {
        self.out.join("stage1")
    }
    pub fn enc_r(&self) -> PathBuf {
        self.stage1_dir().join("enc_r.mrck")
    }
    pub fn enc_s(&self) -> PathBuf {
        self.stage1_dir().join("enc_s.mrck")
    }
    pub fn features_dir(&self) -> PathBuf {
        self.out.join("features")
    }
    pub fn stage2_dir(&self) -> PathBuf {
        self.out.join("stage2")
    }
    pub fn vocab(&self) -> PathBuf {
        self.stage2_dir().join("vocab.json")
    }
    pub fn generator_ckpt(&self) -> PathBuf {
        self.stage2_dir().join("generator.mrck")
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }
    pub fn metrics_json(&self) -> PathBuf {
        self.out.join("metrics.json")
    }
    pub fn per_patient_csv(&self) -> PathBuf {
        self.out.join("per_patient.csv")
    }
    pub fn ablation_dir(&self) -> PathBuf {
        self.out.join("ablation")
    }
    pub fn ablation_json(&self) -> PathBuf {
        self.out.join("ablation.json")
    }
    pub fn ablation_csv(&self) -> PathBuf {
        self.out.join("ablation.csv")
    }
    pub fn attention_dir(&self) -> PathBuf {
        self.out.join("attention")
    }
}

/// Feature-store key for one slide of one patient.
pub fn slide_key(patient_id: &str, slide_index: usize) -> String {
    format!("{patient_id}_s{slide_index}")
}

/// Patient-level split manifests.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn save_splits(paths: &Paths, splits: &Splits) -> Result<()> {
    let text = serde_json::to_string_pretty(splits)?;
    std::fs::write(paths.splits(), text + "\n")?;
    Ok(())
}

pub fn load_splits(paths: &Paths) -> Result<Splits> {
    let p = paths.splits();
    let text = std::fs::read_to_string(&p).map_err(|e| {
        PipelineError::config(format!("cannot read {} (run `split` first): {e}", p.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Region encoder: `G×G` backbone tokens → one `d_R` feature.
pub fn region_vit_config(dims: &DimsConfig) -> ViTConfig {
    ViTConfig {
        input_dim: dims.d_c,
        token_count: dims.g * dims.g,
        embed_dim: dims.d_r,
        depth: dims.vit_depth,
        heads: dims.vit_heads,
        mlp_ratio: dims.vit_mlp_ratio,
        cls_token: true,
        output_dim: dims.d_r,
        final_norm: true,
    }
}

/// Slide encoder: `Q·L²` sampled region features → one `d_R` feature.
pub fn slide_vit_config(dims: &DimsConfig) -> ViTConfig {
    ViTConfig {
        input_dim: dims.d_r,
        token_count: dims.q * dims.l * dims.l,
        embed_dim: dims.d_r,
        depth: dims.vit_depth,
        heads: dims.vit_heads,
        mlp_ratio: dims.vit_mlp_ratio,
        cls_token: true,
        output_dim: dims.d_r,
        final_norm: true,
    }
}

/// Stable hash of the resolved configuration, stored in checkpoints so a
/// mismatched artifact chain is caught instead of silently misused.
pub fn config_fingerprint(cfg: &RunConfig) -> u64 {
    let text = serde_json::to_string(cfg).expect("config serializes");
    fnv1a64(text.as_bytes())
}

// ---- checkpoint binary ------------------------------------------------------

pub const CKPT_MAGIC: &[u8; 4] = b"MRCK";
pub const CKPT_VERSION: u32 = 1;

/// A saved parameter set plus provenance.
pub struct Checkpoint {
    pub module: String,
    pub fingerprint: u64,
    pub seed: u64,
    pub step: u64,
    pub store: ParamStore,
}

pub fn save_checkpoint(
    path: &Path,
    module: &str,
    fingerprint: u64,
    seed: u64,
    step: u64,
    store: &ParamStore,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(module.len() as u32).to_le_bytes());
    buf.extend_from_slice(module.as_bytes());
    buf.extend_from_slice(&fingerprint.to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, param) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(u8::from(param.trainable));
        buf.extend_from_slice(&(param.value.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(param.value.ncols() as u32).to_le_bytes());
        for v in param.value.iter() {
            if !v.is_finite() {
                return Err(PipelineError::NonFinite(format!("checkpoint parameter {name}")));
            }
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(PipelineError::Truncated {
                path: self.path.clone(),
                needed: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| PipelineError::Parse(format!("{}: non-utf8 name", self.path)))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| {
        PipelineError::config(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    let mut r = Reader { bytes: &bytes, pos: 0, path: path.display().to_string() };
    if r.take(4)? != CKPT_MAGIC {
        return Err(PipelineError::BadMagic { path: r.path, expected: "MRCK" });
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(PipelineError::Parse(format!(
            "{}: checkpoint version {version}, expected {CKPT_VERSION}",
            r.path
        )));
    }
    let module = r.string()?;
    let fingerprint = r.u64()?;
    let seed = r.u64()?;
    let step = r.u64()?;
    let n_params = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n_params {
        let name = r.string()?;
        let trainable = r.take(1)?[0] != 0;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let mut values = Vec::with_capacity(rows * cols);
        for c in raw.chunks_exact(8) {
            values.push(f64::from_le_bytes(c.try_into().unwrap()));
        }
        let arr = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| PipelineError::shape(format!("{name}: {e}")))?;
        store.insert(&name, arr);
        if !trainable {
            store.freeze_prefix(&name);
        }
    }
    if r.pos != r.bytes.len() {
        return Err(PipelineError::Parse(format!("{}: trailing bytes", r.path)));
    }
    Ok(Checkpoint { module, fingerprint, seed, step, store })
}

/// Load a checkpoint and insist it belongs to this module and configuration.
pub fn load_checkpoint_for(path: &Path, module: &str, cfg: &RunConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.module != module {
        return Err(PipelineError::config(format!(
            "{} holds module '{}', expected '{module}'",
            path.display(),
            ck.module
        )));
    }
    let fp = config_fingerprint(cfg);
    if ck.fingerprint != fp {
        return Err(PipelineError::config(format!(
            "{} was produced under a different configuration (fingerprint {:#018x}, current {:#018x})",
            path.display(),
            ck.fingerprint,
            fp
        )));
    }
    Ok(ck)
}

/// Look up one patient by id.
pub fn find_patient<'a>(corpus: &'a Corpus, patient_id: &str) -> Result<&'a SyntheticPatient> {
    corpus
        .patients
        .iter()
        .find(|p| p.patient_id == patient_id)
        .ok_or_else(|| PipelineError::config(format!("unknown patient id {patient_id}")))
}
