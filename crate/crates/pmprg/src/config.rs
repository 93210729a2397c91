//! Run configuration.
//!
//! Every training hyperparameter has a named key whose default is the
//! reference value; the `desk` profile overrides to dimensions small enough
//! to train on a laptop CPU in minutes. A JSON config file may set
//! `"profile": "full" | "desk"` and then override any individual key.

use crate::error::{PipelineError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub dims: DimsConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_patients: usize,
    /// Additive Gaussian pixel noise.
    pub noise_sigma: f64,
    pub min_slides: usize,
    pub max_slides: usize,
    /// Square patch edge in pixels.
    pub patch: usize,
    /// Coarse-level patch grid; the fine level is `g`× larger per axis.
    pub level2_rows: usize,
    pub level2_cols: usize,
    /// Write slides as a PNG directory tree instead of one packed binary.
    pub png_tree: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DimsConfig {
    /// Region grid edge: a region is `g×g` tokens.
    pub g: usize,
    /// Number of region windows sampled per slide for the slide encoder.
    pub q: usize,
    /// Window edge in regions.
    pub l: usize,
    /// Patch backbone output width.
    pub d_c: usize,
    /// Region embedding width.
    pub d_r: usize,
    /// Tag embedding width (visual features are projected to this).
    pub d_prime: usize,
    /// Tag-specific feature width (output of the attention pooler).
    pub d: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub vit_mlp_ratio: usize,
    pub dino_out: usize,
    pub dino_hidden: usize,
    /// Hidden width of the two-layer classifier heads.
    pub cls_hidden: usize,
    pub gd_blocks: usize,
    pub lm_width: usize,
    pub lm_blocks: usize,
    pub lm_heads: usize,
    pub lm_mlp_ratio: usize,
    pub lm_max_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub n_global: usize,
    pub n_local: usize,
    /// Gaussian noise added to view token embeddings (or pixels).
    pub view_sigma: f64,
    pub global_keep_min: f64,
    pub local_keep_min: f64,
    pub local_keep_max: f64,
    pub tau_s: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub tau_t_warmup_epochs: usize,
    pub ema_momentum_start: f64,
    pub center_momentum: f64,
    /// Stage (i) augments pixels before the backbone instead of token
    /// embeddings after it.
    pub pixel_views: bool,
    /// Items per gradient-accumulation chunk (memory knob; no effect on math).
    pub grad_accum_chunk: usize,
    /// Global-norm gradient clip for the distillation steps; 0 disables.
    pub clip_grad: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Loss weights for (organ, tag, sentence).
    pub loss_alpha: f64,
    pub loss_beta: f64,
    pub loss_gamma: f64,
    /// Language-modeling epochs used to pre-train the LM base before it is
    /// frozen.
    pub lm_warmup_epochs: usize,
    pub lm_warmup_batch: usize,
    pub lm_warmup_lr: f64,
    /// Ablation: drop the tag classifier; model selection then switches to
    /// the smallest sentence loss.
    pub no_tag_cls: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub beam_width: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_hidden: usize,
    /// β of the longest-common-subsequence F-measure (1 = harmonic mean).
    pub rouge_beta: f64,
}

impl RunConfig {
    /// Reference hyperparameters (full-scale training schedule).
    pub fn full() -> Self {
        Self {
            seed: 17,
            corpus: CorpusConfig {
                n_patients: 200,
                noise_sigma: 0.05,
                min_slides: 1,
                max_slides: 3,
                patch: 32,
                level2_rows: 2,
                level2_cols: 2,
                png_tree: false,
            },
            dims: DimsConfig {
                g: 4,
                q: 4,
                l: 1,
                d_c: 64,
                d_r: 96,
                d_prime: 64,
                d: 64,
                vit_depth: 2,
                vit_heads: 4,
                vit_mlp_ratio: 4,
                dino_out: 256,
                dino_hidden: 128,
                cls_hidden: 64,
                gd_blocks: 1,
                lm_width: 128,
                lm_blocks: 2,
                lm_heads: 4,
                lm_mlp_ratio: 4,
                lm_max_len: 48,
            },
            stage1: Stage1Config {
                epochs: 500,
                batch: 64,
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 0.0,
                n_global: 2,
                n_local: 2,
                view_sigma: 0.05,
                global_keep_min: 0.75,
                local_keep_min: 0.25,
                local_keep_max: 0.5,
                tau_s: 0.1,
                tau_t_start: 0.04,
                tau_t_end: 0.07,
                tau_t_warmup_epochs: 30,
                ema_momentum_start: 0.996,
                center_momentum: 0.9,
                pixel_views: false,
                grad_accum_chunk: 16,
                clip_grad: 3.0,
            },
            stage2: Stage2Config {
                epochs: 300,
                batch: 1,
                lr: 3e-3,
                weight_decay: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                loss_alpha: 0.2,
                loss_beta: 0.6,
                loss_gamma: 0.2,
                lm_warmup_epochs: 20,
                lm_warmup_batch: 16,
                lm_warmup_lr: 3e-3,
                no_tag_cls: false,
            },
            eval: EvalConfig {
                beam_width: 1,
                probe_epochs: 60,
                probe_lr: 1e-2,
                probe_hidden: 32,
                rouge_beta: 1.0,
            },
        }
    }

    /// Laptop-CPU profile: identical structure, lean schedules.
    pub fn desk() -> Self {
        let mut c = Self::full();
        c.dims.vit_mlp_ratio = 2;
        c.dims.lm_mlp_ratio = 2;
        c.stage1.epochs = 3;
        c.stage2.epochs = 80;
        c.stage2.lr = 1e-3;
        c.stage2.lm_warmup_epochs = 18;
        c
    }

    pub fn by_profile(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(PipelineError::config(format!("unknown profile: {other}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self;
        let fail = |m: &str| Err(PipelineError::config(m.to_string()));
        if c.corpus.n_patients == 0 {
            return fail("n_patients must be ≥ 1");
        }
        if c.corpus.patch == 0 || c.corpus.level2_rows == 0 || c.corpus.level2_cols == 0 {
            return fail("corpus dims must be positive");
        }
        if c.corpus.min_slides == 0 || c.corpus.min_slides > c.corpus.max_slides {
            return fail("slide count range invalid");
        }
        if !(0.0..1.0).contains(&c.corpus.noise_sigma) {
            return fail("noise_sigma must be in [0,1)");
        }
        if c.dims.g == 0 || c.dims.q == 0 || c.dims.l == 0 {
            return fail("g, q, l must be ≥ 1");
        }
        if c.dims.d_r % c.dims.vit_heads != 0 {
            return fail("d_r must be divisible by vit_heads");
        }
        if c.dims.d_prime % c.dims.vit_heads != 0 {
            return fail("d_prime must be divisible by attention heads");
        }
        if c.dims.lm_width % c.dims.lm_heads != 0 {
            return fail("lm_width must be divisible by lm_heads");
        }
        if c.stage1.lr <= 0.0 || c.stage2.lr <= 0.0 || c.stage2.lm_warmup_lr <= 0.0 {
            return fail("learning rates must be > 0");
        }
        if c.stage1.n_global < 2 {
            return fail("n_global must be ≥ 2");
        }
        if c.stage1.tau_s <= 0.0 || c.stage1.tau_t_start <= 0.0 || c.stage1.tau_t_end <= 0.0 {
            return fail("temperatures must be > 0");
        }
        if !(0.0..=1.0).contains(&c.stage1.ema_momentum_start)
            || !(0.0..=1.0).contains(&c.stage1.center_momentum)
        {
            return fail("momenta must be in [0,1]");
        }
        if c.stage2.loss_alpha < 0.0 || c.stage2.loss_beta < 0.0 || c.stage2.loss_gamma < 0.0 {
            return fail("loss weights must be nonnegative");
        }
        if c.stage1.batch == 0 || c.stage2.batch == 0 || c.stage1.grad_accum_chunk == 0 {
            return fail("batch sizes must be ≥ 1");
        }
        if !c.stage1.clip_grad.is_finite() || c.stage1.clip_grad < 0.0 {
            return fail("clip_grad must be ≥ 0 (0 disables clipping)");
        }
        if !(c.stage1.global_keep_min > 0.0 && c.stage1.global_keep_min <= 1.0) {
            return fail("global_keep_min must be in (0,1]");
        }
        if !(c.stage1.local_keep_min > 0.0 && c.stage1.local_keep_min <= c.stage1.local_keep_max)
        {
            return fail("local keep range invalid");
        }
        if c.eval.beam_width == 0 {
            return fail("beam_width must be ≥ 1");
        }
        if !(c.eval.rouge_beta > 0.0) {
            return fail("rouge_beta must be > 0");
        }
        Ok(())
    }
}

fn deep_merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Load a config file: start from the file's `profile` (default `desk`),
/// then apply every explicitly-present key on top. `None` yields the plain
/// desk profile.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        None => RunConfig::desk(),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let mut patch: serde_json::Value = serde_json::from_str(&text)?;
            let profile = patch
                .get("profile")
                .and_then(|v| v.as_str())
                .unwrap_or("desk")
                .to_string();
            if let Some(obj) = patch.as_object_mut() {
                obj.remove("profile");
            }
            let base = RunConfig::by_profile(&profile)?;
            let mut merged = serde_json::to_value(&base)?;
            deep_merge(&mut merged, patch);
            serde_json::from_value(merged)?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}
