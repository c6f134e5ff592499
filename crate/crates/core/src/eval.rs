//! Desk-scale metric analogs (text alignment, image similarity and their
//! foreground-only variants) with pluggable feature extractors, plus
//! disentanglement probes and attention diagnostics against synthetic
//! ground truth.
//!
//! The joint image/text extractor is a small class probe fitted once on the
//! synthetic corpus: images map to a class simplex through a multinomial
//! logistic head over fixed features, text maps to the same simplex by
//! class-word lookup. Similarities are cosines in feature space, so they are
//! symmetric and invariant to positive rescaling.

use crate::data::{BackgroundClass, BackgroundParams, ConceptImage, CorpusItem, PoseParams, CLASS_WORDS};
use crate::diffusion::{q_sample, randn3, DdimParams};
use crate::error::{DecalError, Result};
use crate::losses::{max_normalize, resample_mask};
use crate::mappers::embeddings_for_image;
use crate::params::ParamStore;
use crate::rng::stream;
use crate::text::{build_prompt, strip_pseudo_words, PromptSpec, Template};
use crate::train::Model;
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const METRIC_D: usize = 62;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricExtractor {
    ClipToy,
    DinoToy,
}

impl MetricExtractor {
    pub fn id(&self) -> &'static str {
        match self {
            MetricExtractor::ClipToy => "clip-toy-v1",
            MetricExtractor::DinoToy => "dino-toy-v1",
        }
    }
}

fn lum(px: &Array3<f64>, y: usize, x: usize) -> f64 {
    0.299 * px[[0, y, x]] + 0.587 * px[[1, y, x]] + 0.114 * px[[2, y, x]]
}

/// Color-oriented image features (62-d): 3x3 grid RGB means, RGB histograms,
/// 3x3 gradient grid, global luminance stats. No mask input.
pub fn metric_features(px: &Array3<f64>) -> Array1<f64> {
    let (h, w) = (px.shape()[1], px.shape()[2]);
    let mut f = Array1::<f64>::zeros(METRIC_D);
    let mut k = 0;
    for gy in 0..3 {
        for gx in 0..3 {
            let (y0, y1) = (gy * h / 3, (gy + 1) * h / 3);
            let (x0, x1) = (gx * w / 3, (gx + 1) * w / 3);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..3 {
                let mut s = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += px[[c, y, x]];
                    }
                }
                f[k] = s / n;
                k += 1;
            }
        }
    }
    for c in 0..3 {
        let mut hist = [0.0; 8];
        for y in 0..h {
            for x in 0..w {
                hist[((px[[c, y, x]] * 8.0) as usize).min(7)] += 1.0;
            }
        }
        for v in hist {
            f[k] = v / (h * w) as f64;
            k += 1;
        }
    }
    for gy in 0..3 {
        for gx in 0..3 {
            let (y0, y1) = (1 + gy * (h - 2) / 3, 1 + (gy + 1) * (h - 2) / 3);
            let (x0, x1) = (1 + gx * (w - 2) / 3, 1 + (gx + 1) * (w - 2) / 3);
            let mut s = 0.0;
            let mut n = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let dx = lum(px, y, x + 1) - lum(px, y, x - 1);
                    let dy = lum(px, y + 1, x) - lum(px, y - 1, x);
                    s += (dx * dx + dy * dy).sqrt();
                    n += 1.0;
                }
            }
            f[k] = if n > 0.0 { s / n } else { 0.0 };
            k += 1;
        }
    }
    let mut s = 0.0;
    let mut s2 = 0.0;
    for y in 0..h {
        for x in 0..w {
            let l = lum(px, y, x);
            s += l;
            s2 += l * l;
        }
    }
    let n = (h * w) as f64;
    f[k] = s / n;
    f[k + 1] = (s2 / n - (s / n) * (s / n)).max(0.0).sqrt();
    k += 2;
    debug_assert_eq!(k, METRIC_D);
    f
}

/// Structure-oriented grayscale features (56-d): luminance grid means/stds,
/// gradient grid, luminance histogram.
pub fn dino_toy_features(px: &Array3<f64>) -> Array1<f64> {
    let (h, w) = (px.shape()[1], px.shape()[2]);
    let mut f = Array1::<f64>::zeros(56);
    let mut k = 0;
    for gy in 0..4 {
        for gx in 0..4 {
            let (y0, y1) = (gy * h / 4, (gy + 1) * h / 4);
            let (x0, x1) = (gx * w / 4, (gx + 1) * w / 4);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let mut s = 0.0;
            let mut s2 = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let l = lum(px, y, x);
                    s += l;
                    s2 += l * l;
                }
            }
            let mean = s / n;
            f[k] = mean;
            f[k + 16] = (s2 / n - mean * mean).max(0.0).sqrt();
            k += 1;
        }
    }
    k = 32;
    for gy in 0..4 {
        for gx in 0..4 {
            let (y0, y1) = (1 + gy * (h - 2) / 4, 1 + (gy + 1) * (h - 2) / 4);
            let (x0, x1) = (1 + gx * (w - 2) / 4, 1 + (gx + 1) * (w - 2) / 4);
            let mut s = 0.0;
            let mut n = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let dx = lum(px, y, x + 1) - lum(px, y, x - 1);
                    let dy = lum(px, y + 1, x) - lum(px, y - 1, x);
                    s += (dx * dx + dy * dy).sqrt();
                    n += 1.0;
                }
            }
            f[k] = if n > 0.0 { s / n } else { 0.0 };
            k += 1;
        }
    }
    let mut hist = [0.0; 8];
    for y in 0..h {
        for x in 0..w {
            hist[((lum(px, y, x) * 8.0) as usize).min(7)] += 1.0;
        }
    }
    for v in hist {
        f[k] = v / (h * w) as f64;
        k += 1;
    }
    debug_assert_eq!(k, 56);
    f
}

pub fn extract_metric_features(px: &Array3<f64>, e: MetricExtractor) -> Array1<f64> {
    match e {
        MetricExtractor::ClipToy => metric_features(px),
        MetricExtractor::DinoToy => dino_toy_features(px),
    }
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn blank_background(px: &Array3<f64>, mask: &Array2<f64>, blank: f64) -> Array3<f64> {
    let mut out = px.clone();
    for y in 0..mask.shape()[0] {
        for x in 0..mask.shape()[1] {
            if mask[[y, x]] < 0.5 {
                for c in 0..3 {
                    out[[c, y, x]] = blank;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// probes fitted on the corpus (frozen, stored in the checkpoint)
// ---------------------------------------------------------------------------

fn softmax(v: &Array1<f64>) -> Array1<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = v.mapv(|x| (x - m).exp());
    let s = e.sum();
    e.mapv(|x| x / s)
}

/// Multinomial logistic regression by full-batch gradient descent.
/// `x` rows already include a bias column. Deterministic.
fn fit_softmax_probe(x: &Array2<f64>, y: &[usize], n_classes: usize, iters: usize, lr: f64, l2: f64) -> Array2<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut w = Array2::<f64>::zeros((d, n_classes));
    for _ in 0..iters {
        let logits = x.dot(&w);
        let mut grad = Array2::<f64>::zeros((d, n_classes));
        for i in 0..n {
            let row = logits.row(i).to_owned();
            let p = softmax(&row);
            for c in 0..n_classes {
                let err = p[c] - if y[i] == c { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[[j, c]] += x[[i, j]] * err;
                }
            }
        }
        grad.mapv_inplace(|g| g / n as f64);
        ndarray::Zip::from(&mut w).and(&grad).for_each(|wv, &gv| {
            *wv -= lr * (gv + l2 * *wv);
        });
    }
    w
}

/// Standardization statistics: per-dim mean and std over rows.
fn standardize_stats(rows: &[Array1<f64>]) -> (Array1<f64>, Array1<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mu = Array1::<f64>::zeros(d);
    for r in rows {
        mu += r;
    }
    mu.mapv_inplace(|v| v / n);
    let mut sd = Array1::<f64>::zeros(d);
    for r in rows {
        for j in 0..d {
            let dif = r[j] - mu[j];
            sd[j] += dif * dif;
        }
    }
    sd.mapv_inplace(|v| (v / n).sqrt().max(1e-8));
    (mu, sd)
}

fn design_matrix(rows: &[Array1<f64>], mu: &Array1<f64>, sd: &Array1<f64>) -> Array2<f64> {
    let (n, d) = (rows.len(), rows[0].len());
    let mut x = Array2::<f64>::zeros((n, d + 1));
    for (i, r) in rows.iter().enumerate() {
        for j in 0..d {
            x[[i, j]] = (r[j] - mu[j]) / sd[j];
        }
        x[[i, d]] = 1.0;
    }
    x
}

/// Fit the class probe and the foreground segmenter on the corpus and store
/// them as frozen parameters.
pub fn fit_probes(store: &mut ParamStore, corpus: &[CorpusItem], n_classes: usize) {
    let feats: Vec<Array1<f64>> = corpus.iter().map(|c| metric_features(&c.pixels)).collect();
    let labels: Vec<usize> = corpus.iter().map(|c| c.class_id).collect();
    let (mu, sd) = standardize_stats(&feats);
    let x = design_matrix(&feats, &mu, &sd);
    let w = fit_softmax_probe(&x, &labels, n_classes, 300, 1.0, 1e-4);
    store.insert("probe.class.w", w.into_dyn());
    store.insert("probe.class.mu", mu.into_dyn());
    store.insert("probe.class.sigma", sd.into_dyn());

    // per-pixel foreground logistic on [r,g,b,|grad|,radial,1]
    let mut w_fg = Array1::<f64>::zeros(6);
    let img_stride = (corpus.len() / 100).max(1);
    let samples: Vec<(Array1<f64>, f64)> = corpus
        .iter()
        .step_by(img_stride)
        .flat_map(|item| {
            let (h, wd) = (item.pixels.shape()[1], item.pixels.shape()[2]);
            let mut v = Vec::new();
            for y in (1..h - 1).step_by(3) {
                for x in (1..wd - 1).step_by(3) {
                    v.push((pixel_features(&item.pixels, y, x), item.mask[[y, x]]));
                }
            }
            v
        })
        .collect();
    let lr = 2.0;
    for _ in 0..200 {
        let mut grad = Array1::<f64>::zeros(6);
        for (f, t) in &samples {
            let z: f64 = f.iter().zip(w_fg.iter()).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - t;
            for j in 0..6 {
                grad[j] += f[j] * err;
            }
        }
        grad.mapv_inplace(|g| g / samples.len() as f64);
        ndarray::Zip::from(&mut w_fg).and(&grad).for_each(|wv, &gv| *wv -= lr * gv);
    }
    store.insert("probe.fg.w", w_fg.into_dyn());
}

fn pixel_features(px: &Array3<f64>, y: usize, x: usize) -> Array1<f64> {
    let (h, w) = (px.shape()[1], px.shape()[2]);
    let gx = lum(px, y, x + 1) - lum(px, y, x - 1);
    let gy = lum(px, y + 1, x) - lum(px, y - 1, x);
    let ny = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
    let nx = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
    Array1::from_vec(vec![
        px[[0, y, x]],
        px[[1, y, x]],
        px[[2, y, x]],
        (gx * gx + gy * gy).sqrt(),
        nx * nx + ny * ny,
        1.0,
    ])
}

/// Class simplex of one image under the stored probe.
pub fn class_probe_probs(store: &ParamStore, px: &Array3<f64>) -> Result<Array1<f64>> {
    let w = store.get("probe.class.w")?.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
    let mu = store.get("probe.class.mu")?.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let sd = store.get("probe.class.sigma")?.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let f = metric_features(px);
    let mut x = Array1::<f64>::zeros(f.len() + 1);
    for j in 0..f.len() {
        x[j] = (f[j] - mu[j]) / sd[j];
    }
    x[f.len()] = 1.0;
    let logits = Array1::from_iter((0..w.shape()[1]).map(|c| {
        x.iter().zip(w.column(c).iter()).map(|(a, b)| a * b).sum::<f64>()
    }));
    Ok(softmax(&logits))
}

/// Approximate foreground mask for a generated image via the stored
/// per-pixel probe (thresholded spatial activation).
pub fn fg_mask(store: &ParamStore, px: &Array3<f64>) -> Result<Array2<f64>> {
    let w = store.get("probe.fg.w")?.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let (h, wd) = (px.shape()[1], px.shape()[2]);
    let mut out = Array2::<f64>::zeros((h, wd));
    for y in 1..h - 1 {
        for x in 1..wd - 1 {
            let f = pixel_features(px, y, x);
            let z: f64 = f.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
            out[[y, x]] = if z > 0.0 { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// similarity metrics
// ---------------------------------------------------------------------------

/// Text alignment analog: pseudo-words are stripped from the prompt, the
/// remaining class word maps to a one-hot class vector, images map to the
/// probe simplex; the score is the mean cosine between the two.
pub fn image_text_similarity(
    store: &ParamStore,
    images: &[Array3<f64>],
    prompt: &str,
    n_classes: usize,
) -> Result<f64> {
    if images.is_empty() {
        return Err(DecalError::Config("image_text_similarity: empty image set".into()));
    }
    let stripped = strip_pseudo_words(prompt);
    let text_vec = text_class_vector(&stripped, n_classes);
    let mut s = 0.0;
    for img in images {
        let p = class_probe_probs(store, img)?;
        s += cosine(&p, &text_vec);
    }
    Ok(s / images.len() as f64)
}

fn text_class_vector(stripped: &str, n_classes: usize) -> Array1<f64> {
    let mut v = Array1::<f64>::zeros(n_classes);
    for word in stripped.split_whitespace() {
        let w = word.to_lowercase();
        if let Some(idx) = CLASS_WORDS.iter().take(n_classes).position(|(c, _)| *c == w) {
            v[idx] = 1.0;
            return v;
        }
    }
    v.fill(1.0 / n_classes as f64);
    v
}

/// Mean pairwise cosine similarity between generated and reference images.
/// With `fg_only`, backgrounds are blanked via the supplied masks on both
/// sides before feature extraction.
#[allow(clippy::too_many_arguments)]
pub fn image_image_similarity(
    gen: &[Array3<f64>],
    refs: &[Array3<f64>],
    extractor: MetricExtractor,
    fg_only: bool,
    gen_masks: Option<&[Array2<f64>]>,
    ref_masks: Option<&[Array2<f64>]>,
    blank: f64,
) -> Result<f64> {
    if gen.is_empty() || refs.is_empty() {
        return Err(DecalError::Config("image_image_similarity: empty image set".into()));
    }
    let prep = |imgs: &[Array3<f64>], masks: Option<&[Array2<f64>]>| -> Result<Vec<Array1<f64>>> {
        if fg_only {
            let masks = masks.ok_or_else(|| {
                DecalError::Config("fg_only similarity needs masks".into())
            })?;
            if masks.len() != imgs.len() {
                return Err(DecalError::Shape("mask/image count mismatch".into()));
            }
            Ok(imgs
                .iter()
                .zip(masks.iter())
                .map(|(i, m)| extract_metric_features(&blank_background(i, m, blank), extractor))
                .collect())
        } else {
            Ok(imgs.iter().map(|i| extract_metric_features(i, extractor)).collect())
        }
    };
    let gf = prep(gen, gen_masks)?;
    let rf = prep(refs, ref_masks)?;
    let mut s = 0.0;
    for a in &gf {
        for b in &rf {
            s += cosine(a, b);
        }
    }
    Ok(s / (gf.len() * rf.len()) as f64)
}

// ---------------------------------------------------------------------------
// disentanglement probes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub bg_accuracy: f64,
    pub bg_null_mean: f64,
    pub bg_null_std: f64,
    pub bg_p_value: f64,
    pub pose_r2: f64,
    pub pose_null_mean: f64,
    pub pose_null_std: f64,
    pub pose_p_value: f64,
    /// v^b -> pose R2 (lower is better)
    pub leakage_r2: f64,
    pub pool_size: usize,
    pub permutations: usize,
}

fn pose_targets(pose: &PoseParams) -> Array1<f64> {
    Array1::from_vec(vec![
        pose.rotation.sin(),
        pose.rotation.cos(),
        pose.translation[0],
        pose.translation[1],
        (pose.scale - 1.0) / 0.3,
    ])
}

/// Solve (A + l2 I) W = B by Gaussian elimination with partial pivoting.
fn solve_ridge(a: &Array2<f64>, b: &Array2<f64>, l2: f64) -> Array2<f64> {
    let n = a.shape()[0];
    let m = b.shape()[1];
    let mut aug = Array2::<f64>::zeros((n, n + m));
    for i in 0..n {
        for j in 0..n {
            aug[[i, j]] = a[[i, j]] + if i == j { l2 } else { 0.0 };
        }
        for j in 0..m {
            aug[[i, n + j]] = b[[i, j]];
        }
    }
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if aug[[r, col]].abs() > aug[[piv, col]].abs() {
                piv = r;
            }
        }
        if piv != col {
            for j in 0..n + m {
                let tmp = aug[[col, j]];
                aug[[col, j]] = aug[[piv, j]];
                aug[[piv, j]] = tmp;
            }
        }
        let d = aug[[col, col]];
        if d.abs() < 1e-12 {
            continue;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = aug[[r, col]] / d;
            for j in col..n + m {
                aug[[r, j]] -= f * aug[[col, j]];
            }
        }
    }
    let mut w = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        let d = aug[[i, i]];
        for j in 0..m {
            w[[i, j]] = if d.abs() < 1e-12 { 0.0 } else { aug[[i, n + j]] / d };
        }
    }
    w
}

/// Mean R2 of a ridge regression fit on the train half, scored on the eval
/// half.
fn ridge_r2(train_x: &Array2<f64>, train_y: &Array2<f64>, eval_x: &Array2<f64>, eval_y: &Array2<f64>) -> f64 {
    let xtx = train_x.t().dot(train_x);
    let xty = train_x.t().dot(train_y);
    let w = solve_ridge(&xtx, &xty, 1e-3);
    let pred = eval_x.dot(&w);
    let (n, m) = (eval_y.shape()[0], eval_y.shape()[1]);
    let mut r2_sum = 0.0;
    for j in 0..m {
        let mean: f64 = eval_y.column(j).sum() / n as f64;
        let ss_tot: f64 = eval_y.column(j).iter().map(|v| (v - mean) * (v - mean)).sum();
        let ss_res: f64 = (0..n).map(|i| {
            let d = eval_y[[i, j]] - pred[[i, j]];
            d * d
        }).sum();
        r2_sum += if ss_tot > 1e-12 { 1.0 - ss_res / ss_tot } else { 0.0 };
    }
    r2_sum / m as f64
}

fn accuracy_probe(train_x: &Array2<f64>, train_y: &[usize], eval_x: &Array2<f64>, eval_y: &[usize], n_classes: usize) -> f64 {
    let w = fit_softmax_probe(train_x, train_y, n_classes, 200, 1.0, 1e-3);
    let logits = eval_x.dot(&w);
    let mut correct = 0.0;
    for (i, &label) in eval_y.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0;
        for c in 1..n_classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1.0;
        }
    }
    correct / eval_y.len() as f64
}

/// Render a held-out pool of the same subject and probe the mapper
/// embeddings: a linear classifier v^b -> background class, a linear
/// regressor v^p -> pose, and the reverse v^b -> pose leakage score, each
/// against a permutation-test null.
pub fn disentanglement_probe(model: &Model, seed: u64) -> Result<ProbeReport> {
    let concept = model
        .concept
        .as_ref()
        .ok_or_else(|| DecalError::Config("checkpoint has no concept".into()))?;
    if !model.config.customize.mappers_on {
        return Err(DecalError::Config(
            "disentanglement probe needs mappers; use the free-embedding probe".into(),
        ));
    }
    let pool_size = model.config.eval.pool_size;
    if pool_size < 16 {
        return Err(DecalError::Config("probe pool too small (min 16)".into()));
    }
    let permutations = model.config.eval.permutations;
    let res = model.config.data.resolution;
    let mut rng = stream(seed, "probe-pool");
    let setup = model.embedding_setup();

    let mut vps: Vec<Array1<f64>> = Vec::with_capacity(pool_size);
    let mut vbs: Vec<Array1<f64>> = Vec::with_capacity(pool_size);
    let mut bg_labels = Vec::with_capacity(pool_size);
    let mut poses = Vec::with_capacity(pool_size);
    for k in 0..pool_size {
        let pose = PoseParams::sample(&mut rng, concept.subject.is_living);
        let class = BackgroundClass::all()[k % BackgroundClass::all().len()];
        let bg = BackgroundParams::sample(class, &mut rng);
        let mut img = crate::data::render_image(&concept.subject, &pose, &bg, res)?;
        img.image_index = k;
        let (vp, vb) = embeddings_for_image(&setup, &model.store, &img)?;
        vps.push(vp);
        vbs.push(vb);
        bg_labels.push(class.index());
        poses.push(pose);
    }
    probe_core(&vps, &vbs, &bg_labels, &poses, permutations, seed)
}

/// Probe over the free per-image embeddings of a no-mapper run: the only
/// embeddings that exist are the N training rows, so the probe runs
/// leave-one-out over them.
pub fn free_embedding_probe(model: &Model, seed: u64) -> Result<ProbeReport> {
    let concept = model
        .concept
        .as_ref()
        .ok_or_else(|| DecalError::Config("checkpoint has no concept".into()))?;
    let setup = crate::mappers::EmbeddingSetup { mappers_on: false, ..model.embedding_setup() };
    let mut vps = Vec::new();
    let mut vbs = Vec::new();
    let mut bg_labels = Vec::new();
    let mut poses = Vec::new();
    for img in &concept.images {
        let (vp, vb) = embeddings_for_image(&setup, &model.store, img)?;
        vps.push(vp);
        vbs.push(vb);
        bg_labels.push(img.background.background_class.index());
        poses.push(img.pose.clone());
    }
    loocv_probe(&vps, &vbs, &bg_labels, &poses, model.config.eval.permutations, seed)
}

fn split_design(rows: &[Array1<f64>]) -> (Array2<f64>, Array2<f64>) {
    let (mu, sd) = standardize_stats(rows);
    let x = design_matrix(rows, &mu, &sd);
    let n = rows.len();
    let half = n / 2;
    let train = x.slice(ndarray::s![..half, ..]).to_owned();
    let eval = x.slice(ndarray::s![half.., ..]).to_owned();
    (train, eval)
}

fn probe_core(
    vps: &[Array1<f64>],
    vbs: &[Array1<f64>],
    bg_labels: &[usize],
    poses: &[PoseParams],
    permutations: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let n = vps.len();
    let half = n / 2;
    let n_bg = BackgroundClass::all().len();
    let (bg_train_x, bg_eval_x) = split_design(vbs);
    let (p_train_x, p_eval_x) = split_design(vps);
    let y_pose = {
        let mut m = Array2::<f64>::zeros((n, 5));
        for (i, p) in poses.iter().enumerate() {
            m.row_mut(i).assign(&pose_targets(p));
        }
        m
    };
    let pose_train_y = y_pose.slice(ndarray::s![..half, ..]).to_owned();
    let pose_eval_y = y_pose.slice(ndarray::s![half.., ..]).to_owned();

    let bg_train_y: Vec<usize> = bg_labels[..half].to_vec();
    let bg_eval_y: Vec<usize> = bg_labels[half..].to_vec();

    let bg_accuracy = accuracy_probe(&bg_train_x, &bg_train_y, &bg_eval_x, &bg_eval_y, n_bg);
    let pose_r2 = ridge_r2(&p_train_x, &pose_train_y, &p_eval_x, &pose_eval_y);
    let leakage_r2 = ridge_r2(&bg_train_x, &pose_train_y, &bg_eval_x, &pose_eval_y);

    // permutation nulls: labels shuffled across the whole pool, refit, rescore
    let mut perm_rng = stream(seed, "probe-perm");
    let mut bg_null = Vec::with_capacity(permutations);
    let mut pose_null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        let perm = permutation(&mut perm_rng, n);
        let shuffled_bg: Vec<usize> = perm.iter().map(|&i| bg_labels[i]).collect();
        bg_null.push(accuracy_probe(
            &bg_train_x,
            &shuffled_bg[..half].to_vec(),
            &bg_eval_x,
            &shuffled_bg[half..].to_vec(),
            n_bg,
        ));
        let mut shuffled_pose = Array2::<f64>::zeros((n, 5));
        for (dst, &src) in perm.iter().enumerate() {
            shuffled_pose.row_mut(dst).assign(&y_pose.row(src));
        }
        pose_null.push(ridge_r2(
            &p_train_x,
            &shuffled_pose.slice(ndarray::s![..half, ..]).to_owned(),
            &p_eval_x,
            &shuffled_pose.slice(ndarray::s![half.., ..]).to_owned(),
        ));
    }
    let (bg_null_mean, bg_null_std) = mean_std(&bg_null);
    let (pose_null_mean, pose_null_std) = mean_std(&pose_null);
    let bg_p_value = p_value(&bg_null, bg_accuracy);
    let pose_p_value = p_value(&pose_null, pose_r2);

    Ok(ProbeReport {
        bg_accuracy,
        bg_null_mean,
        bg_null_std,
        bg_p_value,
        pose_r2,
        pose_null_mean,
        pose_null_std,
        pose_p_value,
        leakage_r2,
        pool_size: n,
        permutations,
    })
}

/// Leave-one-out variant for the handful of free embeddings.
fn loocv_probe(
    vps: &[Array1<f64>],
    vbs: &[Array1<f64>],
    bg_labels: &[usize],
    poses: &[PoseParams],
    permutations: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let n = vps.len();
    let n_bg = BackgroundClass::all().len();
    let loocv_acc = |labels: &[usize]| -> f64 {
        let mut correct = 0.0;
        for held in 0..n {
            let train_rows: Vec<Array1<f64>> = (0..n).filter(|&i| i != held).map(|i| vbs[i].clone()).collect();
            let train_y: Vec<usize> = (0..n).filter(|&i| i != held).map(|i| labels[i]).collect();
            let (mu, sd) = standardize_stats(&train_rows);
            let x = design_matrix(&train_rows, &mu, &sd);
            let w = fit_softmax_probe(&x, &train_y, n_bg, 100, 1.0, 1e-3);
            let hx = design_matrix(&[vbs[held].clone()], &mu, &sd);
            let logits = hx.dot(&w);
            let mut best = 0;
            for c in 1..n_bg {
                if logits[[0, c]] > logits[[0, best]] {
                    best = c;
                }
            }
            if best == labels[held] {
                correct += 1.0;
            }
        }
        correct / n as f64
    };
    let bg_accuracy = loocv_acc(bg_labels);

    let loocv_r2 = |rows: &[Array1<f64>]| -> f64 {
        let mut preds = Array2::<f64>::zeros((n, 5));
        let mut truth = Array2::<f64>::zeros((n, 5));
        for held in 0..n {
            let train_rows: Vec<Array1<f64>> = (0..n).filter(|&i| i != held).map(|i| rows[i].clone()).collect();
            let (mu, sd) = standardize_stats(&train_rows);
            let x = design_matrix(&train_rows, &mu, &sd);
            let mut y = Array2::<f64>::zeros((n - 1, 5));
            for (r, i) in (0..n).filter(|&i| i != held).enumerate() {
                y.row_mut(r).assign(&pose_targets(&poses[i]));
            }
            let w = solve_ridge(&x.t().dot(&x), &x.t().dot(&y), 1e-3);
            let hx = design_matrix(&[rows[held].clone()], &mu, &sd);
            preds.row_mut(held).assign(&hx.dot(&w).row(0));
            truth.row_mut(held).assign(&pose_targets(&poses[held]));
        }
        let mut r2_sum = 0.0;
        for j in 0..5 {
            let mean = truth.column(j).sum() / n as f64;
            let ss_tot: f64 = truth.column(j).iter().map(|v| (v - mean) * (v - mean)).sum();
            let ss_res: f64 = (0..n).map(|i| {
                let d = truth[[i, j]] - preds[[i, j]];
                d * d
            }).sum();
            r2_sum += if ss_tot > 1e-12 { 1.0 - ss_res / ss_tot } else { 0.0 };
        }
        r2_sum / 5.0
    };
    let pose_r2 = loocv_r2(vps);
    let leakage_r2 = loocv_r2(vbs);

    let mut perm_rng = stream(seed, "probe-perm");
    let mut bg_null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        let perm = permutation(&mut perm_rng, n);
        let shuffled: Vec<usize> = perm.iter().map(|&i| bg_labels[i]).collect();
        bg_null.push(loocv_acc(&shuffled));
    }
    let (bg_null_mean, bg_null_std) = mean_std(&bg_null);
    let bg_p_value = p_value(&bg_null, bg_accuracy);

    Ok(ProbeReport {
        bg_accuracy,
        bg_null_mean,
        bg_null_std,
        bg_p_value,
        pose_r2,
        pose_null_mean: 0.0,
        pose_null_std: 0.0,
        pose_p_value: 1.0,
        leakage_r2,
        pool_size: n,
        permutations,
    })
}

fn permutation(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    v
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn p_value(null: &[f64], observed: f64) -> f64 {
    let ge = null.iter().filter(|&&x| x >= observed).count();
    (1 + ge) as f64 / (1 + null.len()) as f64
}

// ---------------------------------------------------------------------------
// attention IoU
// ---------------------------------------------------------------------------

/// IoU between the thresholded, max-normalized, head- and layer-averaged
/// attention map of one token slot and the resampled subject mask.
pub fn attention_iou(
    record: &crate::diffusion::AttentionRecord,
    slot_pos: Option<usize>,
    mask: &Array2<f64>,
    threshold: f64,
    ca_res: usize,
) -> Result<f64> {
    let pos = slot_pos.ok_or_else(|| DecalError::Prompt("attention slot missing".into()))?;
    let layers: Vec<&crate::diffusion::AttnLayerRecord> = record
        .layers
        .iter()
        .filter(|l| l.resolution == (ca_res, ca_res))
        .collect();
    if layers.is_empty() {
        return Err(DecalError::Shape(format!("no attention layers at {ca_res}")));
    }
    let mut avg = Array2::<f64>::zeros((ca_res, ca_res));
    for l in &layers {
        let heads = l.maps.shape()[0];
        for hd in 0..heads {
            for q in 0..ca_res * ca_res {
                avg[[q / ca_res, q % ca_res]] += l.maps[[hd, q, pos]];
            }
        }
        // divide by heads later with layer count
    }
    let denom = (layers.len() * layers[0].maps.shape()[0]) as f64;
    avg.mapv_inplace(|v| v / denom);
    let normed = max_normalize(&avg);
    let m = resample_mask(mask, ca_res, ca_res)?;
    let mut inter = 0.0;
    let mut union = 0.0;
    for y in 0..ca_res {
        for x in 0..ca_res {
            let a = normed[[y, x]] >= threshold;
            let b = m[[y, x]] >= 0.5;
            if a && b {
                inter += 1.0;
            }
            if a || b {
                union += 1.0;
            }
        }
    }
    Ok(if union == 0.0 { 1.0 } else { inter / union })
}

// ---------------------------------------------------------------------------
// full evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub clip_t: f64,
    pub clip_i: f64,
    pub clip_i_fg: f64,
    pub dino_i: f64,
    pub dino_i_fg: f64,
    pub probe: ProbeReport,
    pub attention_iou_pose: f64,
    pub n_samples: usize,
    pub extractor_ids: Vec<String>,
    pub prompt: String,
    pub per_sample_clip_i: Vec<f64>,
}

/// Sample from the customized model and compute every metric.
pub fn evaluate(model: &Model, seed: u64) -> Result<(MetricReport, Vec<Array3<f64>>)> {
    let concept = model
        .concept
        .as_ref()
        .ok_or_else(|| DecalError::Config("evaluation needs a customized checkpoint".into()))?;
    let class_word = concept.subject.class_word.clone();
    let n = model.config.eval.n_samples;
    let spec = PromptSpec::new(Template::SubjectOnly, &class_word, None);
    let words = crate::text::prompt_words(&spec)?;
    let prompt = words.join(" ");
    let tokens = build_prompt(&spec, &model.vocab)?;
    let cond = model.encode_tokens(&tokens, &BTreeMap::new())?;
    let null = model.encode_empty()?;

    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let s = crate::rng::stream_seed(seed, &format!("eval-sample-{k}"));
        let img_seed = u64::from_le_bytes(s[..8].try_into().unwrap());
        samples.push(crate::diffusion::ddim_sample(
            &model.unet,
            &model.store,
            &model.schedule,
            &cond,
            Some(&null),
            &DdimParams {
                steps: model.config.sample.steps,
                guidance: model.config.sample.guidance,
                seed: img_seed,
            },
        )?);
    }

    let refs: Vec<Array3<f64>> = concept.images.iter().map(|i| i.pixels.clone()).collect();
    let ref_masks: Vec<Array2<f64>> = concept.images.iter().map(|i| i.mask.clone()).collect();
    let gen_masks: Vec<Array2<f64>> = samples
        .iter()
        .map(|s| fg_mask(&model.store, s))
        .collect::<Result<_>>()?;
    let blank = model.config.data.blank_value;

    let clip_t = image_text_similarity(&model.store, &samples, &prompt, model.config.data.corpus_classes)?;
    let clip_i = image_image_similarity(&samples, &refs, MetricExtractor::ClipToy, false, None, None, blank)?;
    let clip_i_fg = image_image_similarity(
        &samples, &refs, MetricExtractor::ClipToy, true, Some(&gen_masks), Some(&ref_masks), blank,
    )?;
    let dino_i = image_image_similarity(&samples, &refs, MetricExtractor::DinoToy, false, None, None, blank)?;
    let dino_i_fg = image_image_similarity(
        &samples, &refs, MetricExtractor::DinoToy, true, Some(&gen_masks), Some(&ref_masks), blank,
    )?;

    let per_sample_clip_i: Vec<f64> = samples
        .iter()
        .map(|s| {
            image_image_similarity(
                std::slice::from_ref(s),
                &refs,
                MetricExtractor::ClipToy,
                false,
                None,
                None,
                blank,
            )
        })
        .collect::<Result<_>>()?;

    let probe = if model.config.customize.mappers_on {
        disentanglement_probe(model, seed)?
    } else {
        free_embedding_probe(model, seed)?
    };

    let attention_iou_pose = mean_pose_attention_iou(model, seed)?;

    Ok((
        MetricReport {
            clip_t,
            clip_i,
            clip_i_fg,
            dino_i,
            dino_i_fg,
            probe,
            attention_iou_pose,
            n_samples: n,
            extractor_ids: vec![
                MetricExtractor::ClipToy.id().to_string(),
                MetricExtractor::DinoToy.id().to_string(),
            ],
            prompt,
            per_sample_clip_i,
        },
        samples,
    ))
}

/// Mean IoU of the [P] slot attention against the subject mask over the
/// concept images, measured at a mid-trajectory noise level.
pub fn mean_pose_attention_iou(model: &Model, seed: u64) -> Result<f64> {
    let concept = model
        .concept
        .as_ref()
        .ok_or_else(|| DecalError::Config("attention probe needs a concept".into()))?;
    let ca_res = model
        .unet
        .cfg
        .ca_resolution()
        .ok_or_else(|| DecalError::Config("no attention layers".into()))?;
    let threshold = model.config.eval.attn_threshold;
    let setup = model.embedding_setup();
    let t = model.schedule.len() / 2;
    let mut rng = stream(seed, "eval-attn");
    let mut total = 0.0;
    for img in &concept.images {
        let spec = PromptSpec {
            template: Template::SubjectPose,
            class_word: concept.subject.class_word.clone(),
            attribute_word: model.attribute_word(concept.subject.is_living),
            image_index: Some(img.image_index),
        };
        let tokens = build_prompt(&spec, &model.vocab)?;
        let positions = crate::text::slot_positions(&tokens, &model.vocab);
        let mut overrides = BTreeMap::new();
        if model.config.customize.mappers_on {
            let (vp, _) = embeddings_for_image(&setup, &model.store, img)?;
            if let Some(p) = positions.pose {
                overrides.insert(p, vp);
            }
        }
        let cond = model.encode_tokens(&tokens, &overrides)?;
        let z0 = crate::diffusion::to_model_range(&img.pixels);
        let eps = randn3(&mut rng, 3, z0.shape()[1], z0.shape()[2]);
        let zt = q_sample(&z0, t, &eps, &model.schedule)?;
        let (_, rec) = model.unet.predict_eps(&model.store, &zt, t, &cond, true)?;
        total += attention_iou(&rec.unwrap(), positions.pose, &img.mask, threshold, ca_res)?;
    }
    Ok(total / concept.images.len() as f64)
}

/// Per-token heatmap tiles at image resolution: head- and layer-averaged
/// maps at the loss resolution, max-normalized, upscaled nearest-neighbor.
pub fn token_heatmaps(
    model: &Model,
    record: &crate::diffusion::AttentionRecord,
    n_tokens: usize,
) -> Result<Vec<Array3<f64>>> {
    let ca_res = model
        .unet
        .cfg
        .ca_resolution()
        .ok_or_else(|| DecalError::Config("no attention layers".into()))?;
    let res = model.config.data.resolution;
    let scale = res / ca_res;
    let layers: Vec<&crate::diffusion::AttnLayerRecord> = record
        .layers
        .iter()
        .filter(|l| l.resolution == (ca_res, ca_res))
        .collect();
    if layers.is_empty() {
        return Err(DecalError::Shape(format!("no attention layers at {ca_res}")));
    }
    let denom = (layers.len() * layers[0].maps.shape()[0]) as f64;
    let mut out = Vec::with_capacity(n_tokens);
    for pos in 0..n_tokens {
        let mut avg = Array2::<f64>::zeros((ca_res, ca_res));
        for l in &layers {
            for hd in 0..l.maps.shape()[0] {
                for q in 0..ca_res * ca_res {
                    avg[[q / ca_res, q % ca_res]] += l.maps[[hd, q, pos]];
                }
            }
        }
        avg.mapv_inplace(|v| v / denom);
        let normed = max_normalize(&avg);
        let mut tile = Array3::<f64>::zeros((3, res, res));
        for y in 0..res {
            for x in 0..res {
                let v = normed[[y / scale, x / scale]];
                for c in 0..3 {
                    tile[[c, y, x]] = v;
                }
            }
        }
        out.push(tile);
    }
    Ok(out)
}

pub fn save_report(report: &MetricReport, path: &std::path::Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

#[allow(unused)]
fn unused(_: &ConceptImage) {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{AttentionRecord, AttnLayerRecord};
    use ndarray::Array3 as A3;

    #[test]
    fn cosine_identities() {
        let a = Array1::from_vec(vec![1.0, 2.0, 3.0]);
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
        let b = Array1::from_vec(vec![-2.0, 1.0, 0.0]);
        assert!(cosine(&a, &b).abs() < 1e-12);
        // invariance to positive rescaling and symmetry
        let c = Array1::from_vec(vec![0.3, -0.7, 0.2]);
        assert!((cosine(&a, &c) - cosine(&c, &a)).abs() < 1e-15);
        let c2 = c.mapv(|v| v * 7.5);
        assert!((cosine(&a, &c) - cosine(&a, &c2)).abs() < 1e-12);
    }

    fn record_with_map(map: &Array2<f64>, pos: usize, l: usize) -> AttentionRecord {
        let (h, w) = (map.shape()[0], map.shape()[1]);
        let mut maps = A3::<f64>::zeros((1, h * w, l));
        for q in 0..h * w {
            for t in 0..l {
                maps[[0, q, t]] = if t == pos { map[[q / w, q % w]].max(1e-9) } else { 0.01 };
            }
        }
        AttentionRecord {
            layers: vec![AttnLayerRecord { layer: "t".into(), resolution: (h, w), maps }],
        }
    }

    #[test]
    fn attention_iou_cases() {
        let mut mask = Array2::<f64>::zeros((8, 8));
        for y in 0..8 {
            for x in 0..4 {
                mask[[y, x]] = 1.0;
            }
        }
        // map == mask -> 1.0
        let rec = record_with_map(&mask, 1, 4);
        assert!((attention_iou(&rec, Some(1), &mask, 0.5, 8).unwrap() - 1.0).abs() < 1e-12);
        // disjoint -> 0.0
        let inv = mask.mapv(|v| 1.0 - v);
        let rec = record_with_map(&inv, 1, 4);
        assert_eq!(attention_iou(&rec, Some(1), &mask, 0.5, 8).unwrap(), 0.0);
        // half-overlapping equal-area regions -> 1/3
        let mut shifted = Array2::<f64>::zeros((8, 8));
        for y in 0..8 {
            for x in 2..6 {
                shifted[[y, x]] = 1.0;
            }
        }
        let rec = record_with_map(&shifted, 1, 4);
        let iou = attention_iou(&rec, Some(1), &mask, 0.5, 8).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-12, "iou {iou}");
        // missing slot errors
        assert!(attention_iou(&rec, None, &mask, 0.5, 8).is_err());
    }

    #[test]
    fn identical_sets_give_unit_similarity() {
        let imgs: Vec<Array3<f64>> = (0..3)
            .map(|i| {
                let mut a = Array3::<f64>::zeros((3, 16, 16));
                for (j, v) in a.iter_mut().enumerate() {
                    *v = ((i * 37 + j * 11) % 256) as f64 / 255.0;
                }
                a
            })
            .collect();
        let s = image_image_similarity(&imgs, &imgs, MetricExtractor::ClipToy, false, None, None, 0.5).unwrap();
        // mean over all pairs is < 1, but each self-pair is 1; identical sets
        // of one image give exactly 1
        let one = image_image_similarity(&imgs[..1], &imgs[..1], MetricExtractor::ClipToy, false, None, None, 0.5).unwrap();
        assert!((one - 1.0).abs() < 1e-6);
        assert!(s <= 1.0 + 1e-12);
        // fg with all-ones masks equals plain
        let masks: Vec<Array2<f64>> = (0..3).map(|_| Array2::from_elem((16, 16), 1.0)).collect();
        let fg = image_image_similarity(&imgs, &imgs, MetricExtractor::ClipToy, true, Some(&masks), Some(&masks), 0.5).unwrap();
        assert!((fg - s).abs() < 1e-12);
        // dino variant too
        let d = image_image_similarity(&imgs, &imgs, MetricExtractor::DinoToy, false, None, None, 0.5).unwrap();
        let dfg = image_image_similarity(&imgs, &imgs, MetricExtractor::DinoToy, true, Some(&masks), Some(&masks), 0.5).unwrap();
        assert!((d - dfg).abs() < 1e-12);
    }

    #[test]
    fn ridge_recovers_linear_map() {
        let mut rng = stream(3, "ridge");
        let n = 40;
        let mut x = Array2::<f64>::zeros((n, 4));
        for v in x.iter_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        let w_true = Array2::from_shape_vec((4, 2), vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.2, 0.0, 0.4]).unwrap();
        let y = x.dot(&w_true);
        let train_x = x.slice(ndarray::s![..20, ..]).to_owned();
        let train_y = y.slice(ndarray::s![..20, ..]).to_owned();
        let eval_x = x.slice(ndarray::s![20.., ..]).to_owned();
        let eval_y = y.slice(ndarray::s![20.., ..]).to_owned();
        let r2 = ridge_r2(&train_x, &train_y, &eval_x, &eval_y);
        assert!(r2 > 0.999, "r2 {r2}");
    }

    #[test]
    fn text_vector_uses_class_word() {
        let v = text_class_vector("a dog on the beach", 5);
        assert_eq!(v[0], 1.0);
        assert_eq!(v.sum(), 1.0);
        let u = text_class_vector("nothing here", 5);
        assert!((u.sum() - 1.0).abs() < 1e-12);
        assert!((u[0] - 0.2).abs() < 1e-12);
    }
}
