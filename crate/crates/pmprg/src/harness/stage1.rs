//! Corpus synthesis, patient-level splits, stage-1 self-distillation for
//! both encoders, and region-feature extraction.

use crate::config::RunConfig;
use crate::corpus::io::{read_corpus, read_slide, write_corpus};
use crate::corpus::{builtin_schemas, generate_corpus, split_corpus, Corpus, SlideGeometry};
use crate::dino::train_ssl;
use crate::error::{PipelineError, Result};
use crate::features::{FeatureStore, StoreManifest};
use crate::harness::{
    config_fingerprint, find_patient, load_checkpoint_for, load_splits, region_vit_config,
    save_checkpoint, save_splits, slide_key, slide_vit_config, Paths, Splits,
};
use crate::mrvit::{encode_slide, extract_slide_cache, region_tokens_cached, ConvBackbone};
use crate::regions::{enumerate_regions, pick_drop_slot, sample_region_windows};
use crate::seeds::{derive_rng, derive_seed};
use ndarray::Array2;
use pmprg_autodiff::ParamStore;

/// Patient-level split fractions: 70% train, 20% validation, 10% test.
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.7, 0.2, 0.1);

/// Generate the synthetic corpus and write it under `--out`.
pub fn synth(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let schemas = builtin_schemas();
    let geometry = SlideGeometry {
        patch: cfg.corpus.patch,
        level2_rows: cfg.corpus.level2_rows,
        level2_cols: cfg.corpus.level2_cols,
        g: cfg.dims.g,
    };
    let corpus = generate_corpus(
        &schemas,
        cfg.corpus.n_patients,
        cfg.seed,
        geometry,
        cfg.corpus.min_slides,
        cfg.corpus.max_slides,
    )?;
    write_corpus(&paths.corpus_dir(), &corpus, cfg.corpus.noise_sigma, cfg.corpus.png_tree)?;
    eprintln!(
        "synth: {} patients under {}",
        corpus.patients.len(),
        paths.corpus_dir().display()
    );
    Ok(())
}

/// Read the written corpus back, with a pointer at the missing stage.
pub fn load_corpus(paths: &Paths) -> Result<Corpus> {
    read_corpus(&paths.corpus_dir()).map_err(|e| {
        PipelineError::config(format!(
            "cannot read corpus at {} (run `synth` first): {e}",
            paths.corpus_dir().display()
        ))
    })
}

/// Shuffle patients and write the three split manifests.
pub fn split(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let corpus = load_corpus(paths)?;
    let (train, val, test) = split_corpus(&corpus, SPLIT_FRACTIONS, cfg.seed)?;
    let splits = Splits { train, val, test };
    save_splits(paths, &splits)?;
    eprintln!(
        "split: train {} / val {} / test {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

/// Multi-scale token matrices for every region of every training slide.
/// Drop slots come from a per-slide purpose-derived stream, so the dataset
/// does not depend on patient iteration order.
fn region_token_dataset(
    cfg: &RunConfig,
    paths: &Paths,
    corpus: &Corpus,
    train_ids: &[String],
    backbone: &ConvBackbone,
) -> Result<Vec<Array2<f64>>> {
    let mut dataset = Vec::new();
    for pid in train_ids {
        let patient = find_patient(corpus, pid)?;
        for j in 0..patient.slide_count {
            let pyramid = read_slide(&paths.corpus_dir(), corpus, pid, j)?;
            let cache = extract_slide_cache(&pyramid, backbone)?;
            let groups = enumerate_regions(&pyramid, cfg.dims.g)?;
            let mut rng = derive_rng(cfg.seed, &format!("stage1/tokens/{pid}/{j}"));
            for group in &groups {
                let drop = pick_drop_slot(group.candidates.len(), &mut rng);
                dataset.push(region_tokens_cached(group, drop, &cache));
            }
        }
    }
    Ok(dataset)
}

/// Encode every slide of every patient with the (frozen) region encoder and
/// persist the resulting feature store. Drop slots are drawn from a
/// per-slide stream so the bytes are identical however slides are visited.
pub fn extract_features_with(
    cfg: &RunConfig,
    paths: &Paths,
    corpus: &Corpus,
    enc_r: &ParamStore,
    backbone: &ConvBackbone,
) -> Result<FeatureStore> {
    let region_cfg = region_vit_config(&cfg.dims);
    let manifest = StoreManifest::new("mrvit_r", cfg.dims.g, cfg.dims.q, cfg.dims.l);
    let mut store = FeatureStore::create(&paths.features_dir(), manifest)?;
    for patient in &corpus.patients {
        for j in 0..patient.slide_count {
            let key = slide_key(&patient.patient_id, j);
            let pyramid = read_slide(&paths.corpus_dir(), corpus, &patient.patient_id, j)?;
            let mut rng = derive_rng(cfg.seed, &format!("extract/{key}"));
            let m = encode_slide(
                &pyramid,
                cfg.dims.g,
                backbone,
                enc_r,
                "enc.",
                &region_cfg,
                &mut rng,
            )?;
            store.put(&key, &m)?;
        }
    }
    store.flush_manifest()?;
    Ok(store)
}

/// Stage 1: region-encoder self-distillation, feature extraction for all
/// slides, then slide-encoder self-distillation over sampled windows.
pub fn train_stage1(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let corpus = load_corpus(paths)?;
    let splits = load_splits(paths)?;
    std::fs::create_dir_all(paths.stage1_dir())?;
    let backbone = ConvBackbone::new(cfg.dims.d_c, cfg.seed);
    let fingerprint = config_fingerprint(cfg);

    let region_cfg = region_vit_config(&cfg.dims);
    let region_tokens = region_token_dataset(cfg, paths, &corpus, &splits.train, &backbone)?;
    eprintln!(
        "stage1: region encoder on {} token sets from {} training patients",
        region_tokens.len(),
        splits.train.len()
    );
    let dino_r = train_ssl(
        &region_tokens,
        &region_cfg,
        &cfg.stage1,
        cfg.dims.dino_hidden,
        cfg.dims.dino_out,
        derive_seed(cfg.seed, "stage1/dino-r"),
        Some(&paths.stage1_dir().join("dino_r.csv")),
    )?;
    // The momentum teacher is the published encoder.
    save_checkpoint(&paths.enc_r(), "mrvit_r", fingerprint, cfg.seed, dino_r.step, &dino_r.teacher)?;

    let features = extract_features_with(cfg, paths, &corpus, &dino_r.teacher, &backbone)?;
    eprintln!("stage1: extracted features for {} slides", features.manifest.slides.len());

    let slide_cfg = slide_vit_config(&cfg.dims);
    let grid = (corpus.geometry.level2_rows, corpus.geometry.level2_cols);
    let mut slide_tokens = Vec::new();
    for pid in &splits.train {
        let patient = find_patient(&corpus, pid)?;
        for j in 0..patient.slide_count {
            let key = slide_key(pid, j);
            let f_r = features.get(&key)?.to_array();
            let mut rng = derive_rng(cfg.seed, &format!("stage1/windows/{key}"));
            slide_tokens.push(sample_region_windows(&f_r, grid, cfg.dims.q, cfg.dims.l, &mut rng)?);
        }
    }
    eprintln!("stage1: slide encoder on {} sampled window sets", slide_tokens.len());
    let dino_s = train_ssl(
        &slide_tokens,
        &slide_cfg,
        &cfg.stage1,
        cfg.dims.dino_hidden,
        cfg.dims.dino_out,
        derive_seed(cfg.seed, "stage1/dino-s"),
        Some(&paths.stage1_dir().join("dino_s.csv")),
    )?;
    save_checkpoint(&paths.enc_s(), "mrvit_s", fingerprint, cfg.seed, dino_s.step, &dino_s.teacher)?;
    eprintln!("stage1: done");
    Ok(())
}

/// Standalone feature extraction from a saved region-encoder checkpoint.
pub fn extract_features_cmd(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let corpus = load_corpus(paths)?;
    let ck = load_checkpoint_for(&paths.enc_r(), "mrvit_r", cfg)?;
    let backbone = ConvBackbone::new(cfg.dims.d_c, cfg.seed);
    let store = extract_features_with(cfg, paths, &corpus, &ck.store, &backbone)?;
    eprintln!("extract-features: {} slides", store.manifest.slides.len());
    Ok(())
}

/// Open the written feature store, with a pointer at the missing stage.
pub fn load_features(paths: &Paths) -> Result<FeatureStore> {
    FeatureStore::open(&paths.features_dir()).map_err(|e| {
        PipelineError::config(format!(
            "cannot open feature store at {} (run `train-stage1` or `extract-features` first): {e}",
            paths.features_dir().display()
        ))
    })
}
