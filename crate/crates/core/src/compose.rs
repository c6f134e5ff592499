//! Selective composition at inference: prompts mix the subject token with
//! any combination of per-image pose/background tokens (or none), and the
//! per-image embeddings are recomputed from the stored reference images at
//! request time.

use crate::config::sha256_bytes;
use crate::diffusion::DdimParams;
use crate::error::{DecalError, Result};
use crate::mappers::embeddings_for_image;
use crate::text::tokenize;
use crate::train::Model;
use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositionRequest {
    pub prompt: String,
    pub n: usize,
    pub guidance: f64,
    pub steps: usize,
    pub seed: u64,
}

/// Everything needed to reproduce a composition run bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositionManifest {
    pub prompt: String,
    pub token_words: Vec<String>,
    pub n: usize,
    pub guidance: f64,
    pub steps: usize,
    pub seed: u64,
    /// sha256 of each resolved pseudo-word vector, keyed by word
    pub embedding_hashes: BTreeMap<String, String>,
    pub image_seeds: Vec<u64>,
}

fn hash_vector(v: &Array1<f64>) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 8);
    for &x in v.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    sha256_bytes(&bytes)
}

/// Resolve every pseudo-word in the token sequence: table rows stay as they
/// are; slot words ([P_i]/[B_i] under mappers) are recomputed from the
/// referenced concept image. Returns per-position overrides plus hashes of
/// every resolved pseudo embedding.
pub fn resolve_pseudo_words(
    model: &Model,
    tokens: &[usize],
) -> Result<(BTreeMap<usize, Array1<f64>>, BTreeMap<String, String>)> {
    let mut overrides = BTreeMap::new();
    let mut hashes = BTreeMap::new();
    let setup = model.embedding_setup();
    for (pos, &id) in tokens.iter().enumerate() {
        if !model.vocab.is_pseudo(id) {
            continue;
        }
        let entry = model.vocab.pseudo_entry(id).unwrap().clone();
        if entry.has_row {
            let row = model.store.get(&crate::text::pseudo_row_name(&entry.name))?;
            let v = row.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
            hashes.insert(entry.name.clone(), hash_vector(&v));
            continue;
        }
        // slot word: [P_i] or [B_i]
        let (kind, idx) = parse_slot_word(&entry.name)?;
        let concept = model
            .concept
            .as_ref()
            .ok_or_else(|| DecalError::MissingArtifact("checkpoint has no reference images".into()))?;
        let img = concept.images.get(idx).ok_or_else(|| {
            DecalError::Prompt(format!(
                "reference image {idx} out of range ({} stored)",
                concept.images.len()
            ))
        })?;
        let (vp, vb) = embeddings_for_image(&setup, &model.store, img)?;
        let v = match kind {
            SlotKind::Pose => vp,
            SlotKind::Background => vb,
        };
        hashes.insert(entry.name.clone(), hash_vector(&v));
        overrides.insert(pos, v);
    }
    Ok((overrides, hashes))
}

enum SlotKind {
    Pose,
    Background,
}

fn parse_slot_word(name: &str) -> Result<(SlotKind, usize)> {
    let inner = name
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| DecalError::Prompt(format!("not a pseudo word: {name}")))?;
    let (kind, idx) = if let Some(i) = inner.strip_prefix("P_") {
        (SlotKind::Pose, i)
    } else if let Some(i) = inner.strip_prefix("B_") {
        (SlotKind::Background, i)
    } else {
        return Err(DecalError::Prompt(format!("unknown pseudo word: {name}")));
    };
    let idx: usize = idx
        .parse()
        .map_err(|_| DecalError::Prompt(format!("bad slot index in {name}")))?;
    Ok((kind, idx))
}

/// Sample images for a composition request. Deterministic per seed; the
/// manifest records every input including resolved embedding hashes.
pub fn compose_and_sample(
    model: &Model,
    req: &CompositionRequest,
) -> Result<(Vec<Array3<f64>>, CompositionManifest)> {
    if req.n == 0 {
        return Err(DecalError::Config("sample count must be >= 1".into()));
    }
    let tokens = tokenize(&req.prompt, &model.vocab)?;
    let (overrides, embedding_hashes) = resolve_pseudo_words(model, &tokens)?;
    let cond = model.encode_tokens(&tokens, &overrides)?;
    let null = model.encode_empty()?;
    let mut images = Vec::with_capacity(req.n);
    let mut image_seeds = Vec::with_capacity(req.n);
    for k in 0..req.n {
        let s = crate::rng::stream_seed(req.seed, &format!("sample-{k}"));
        let img_seed = u64::from_le_bytes(s[..8].try_into().unwrap());
        image_seeds.push(img_seed);
        images.push(crate::diffusion::ddim_sample(
            &model.unet,
            &model.store,
            &model.schedule,
            &cond,
            Some(&null),
            &DdimParams { steps: req.steps, guidance: req.guidance, seed: img_seed },
        )?);
    }
    let token_words = tokens.iter().map(|&id| model.vocab.word(id).to_string()).collect();
    Ok((
        images,
        CompositionManifest {
            prompt: req.prompt.clone(),
            token_words,
            n: req.n,
            guidance: req.guidance,
            steps: req.steps,
            seed: req.seed,
            embedding_hashes,
            image_seeds,
        },
    ))
}
