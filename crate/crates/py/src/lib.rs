//! Python bindings: concept rendering, schedule/loss primitives, and the
//! pretrain/customize/sample/eval pipeline driven by TOML config strings.
//!
//! Arrays cross the boundary as flat `Vec<f64>` plus shape tuples to keep the
//! dependency surface small.

use decal_core::ckpt::Checkpoint;
use decal_core::compose::{compose_and_sample, CompositionRequest};
use decal_core::config::load_config;
use decal_core::data;
use decal_core::diffusion;
use decal_core::error::DecalError;
use decal_core::losses;
use decal_core::text;
use decal_core::train;
use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use std::path::{Path, PathBuf};

fn err(e: DecalError) -> PyErr {
    match e {
        DecalError::Io(_) | DecalError::MissingArtifact(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_a3(data: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Array3<f64>> {
    Array3::from_shape_vec(shape, data)
        .map_err(|e| PyValueError::new_err(format!("bad shape: {e}")))
}

fn to_a2(data: Vec<f64>, shape: (usize, usize)) -> PyResult<Array2<f64>> {
    Array2::from_shape_vec(shape, data)
        .map_err(|e| PyValueError::new_err(format!("bad shape: {e}")))
}

fn config_from_toml(text: &str) -> PyResult<decal_core::config::Config> {
    let dir = std::env::temp_dir().join(format!("decal-py-cfg-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let p = dir.join("config.toml");
    std::fs::write(&p, text).map_err(|e| PyIOError::new_err(e.to_string()))?;
    load_config(Some(&p), &[]).map_err(err)
}

/// One rendered concept set held in memory.
#[pyclass]
struct ConceptSet {
    inner: data::ConceptSet,
}

#[pymethods]
impl ConceptSet {
    #[getter]
    fn n_images(&self) -> usize {
        self.inner.images.len()
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.images[0].mask.shape()[0]
    }

    /// Pixels of one image as (flat data, (c, h, w)).
    fn pixels(&self, index: usize) -> PyResult<(Vec<f64>, (usize, usize, usize))> {
        let img = self.inner.images.get(index).ok_or_else(|| {
            PyValueError::new_err(format!("image index {index} out of range"))
        })?;
        let s = img.pixels.shape();
        Ok((img.pixels.iter().copied().collect(), (s[0], s[1], s[2])))
    }

    fn mask(&self, index: usize) -> PyResult<(Vec<f64>, (usize, usize))> {
        let img = self.inner.images.get(index).ok_or_else(|| {
            PyValueError::new_err(format!("image index {index} out of range"))
        })?;
        let s = img.mask.shape();
        Ok((img.mask.iter().copied().collect(), (s[0], s[1])))
    }

    /// Pose and background parameters of one image as a JSON string.
    fn metadata_json(&self, index: usize) -> PyResult<String> {
        let img = self.inner.images.get(index).ok_or_else(|| {
            PyValueError::new_err(format!("image index {index} out of range"))
        })?;
        let v = serde_json::json!({
            "index": img.image_index,
            "pose": img.pose,
            "background": img.background,
        });
        Ok(v.to_string())
    }

    /// Background pixels replaced by a constant blank value.
    fn background_filtered(&self, index: usize, blank: f64) -> PyResult<(Vec<f64>, (usize, usize, usize))> {
        let img = self.inner.images.get(index).ok_or_else(|| {
            PyValueError::new_err(format!("image index {index} out of range"))
        })?;
        let f = data::apply_background_filter(img, blank);
        let s = f.pixels.shape();
        Ok((f.pixels.iter().copied().collect(), (s[0], s[1], s[2])))
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        data::save_concept_set(&self.inner, Path::new(dir)).map_err(err)
    }
}

/// Render a concept set from a SubjectSpec JSON string.
#[pyfunction]
fn generate_concept_set(subject_json: &str, n: usize, seed: u64, resolution: usize) -> PyResult<ConceptSet> {
    let subject: data::SubjectSpec =
        serde_json::from_str(subject_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let inner = data::generate_concept_set(&subject, n, seed, resolution).map_err(err)?;
    Ok(ConceptSet { inner })
}

#[pyfunction]
fn load_concept_set(dir: &str) -> PyResult<ConceptSet> {
    Ok(ConceptSet { inner: data::load_concept_set(Path::new(dir)).map_err(err)? })
}

/// Noise schedule with the forward noising operator.
#[pyclass]
struct Schedule {
    inner: diffusion::ScheduleTable,
}

#[pymethods]
impl Schedule {
    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars.clone()
    }

    fn betas(&self) -> Vec<f64> {
        self.inner.betas.clone()
    }

    fn q_sample(
        &self,
        z0: Vec<f64>,
        shape: (usize, usize, usize),
        t: usize,
        eps: Vec<f64>,
    ) -> PyResult<Vec<f64>> {
        let z0 = to_a3(z0, shape)?;
        let eps = to_a3(eps, shape)?;
        let out = diffusion::q_sample(&z0, t, &eps, &self.inner).map_err(err)?;
        Ok(out.iter().copied().collect())
    }
}

#[pyfunction]
fn make_schedule(steps: usize, kind: &str, beta_start: f64, beta_end: f64) -> PyResult<Schedule> {
    let kind = match kind {
        "linear" => diffusion::ScheduleKind::Linear,
        "cosine" => diffusion::ScheduleKind::Cosine,
        other => return Err(PyValueError::new_err(format!("unknown schedule kind {other}"))),
    };
    let cfg = diffusion::ScheduleConfig { steps, kind, beta_start, beta_end };
    Ok(Schedule { inner: diffusion::make_schedule(&cfg).map_err(err)? })
}

#[pyfunction]
fn ldm_loss(a: Vec<f64>, b: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<f64> {
    losses::ldm_loss(&to_a3(a, shape)?, &to_a3(b, shape)?).map_err(err)
}

#[pyfunction]
fn masked_diffusion_loss(
    a: Vec<f64>,
    b: Vec<f64>,
    shape: (usize, usize, usize),
    mask: Vec<f64>,
) -> PyResult<f64> {
    let m = to_a2(mask, (shape.1, shape.2))?;
    losses::masked_diffusion_loss(&to_a3(a, shape)?, &to_a3(b, shape)?, &m).map_err(err)
}

/// Returns (l_ldm, l_pr, l_ca, total).
#[pyfunction]
#[pyo3(signature = (l_ldm, l_pr, l_ca, lambda_pr=1.0, lambda_ca=0.01))]
fn total_loss(
    l_ldm: f64,
    l_pr: Option<f64>,
    l_ca: Option<f64>,
    lambda_pr: f64,
    lambda_ca: f64,
) -> PyResult<(f64, Option<f64>, Option<f64>, f64)> {
    let b = losses::total_loss(l_ldm, l_pr, l_ca, lambda_pr, lambda_ca).map_err(err)?;
    Ok((b.l_ldm, b.l_pr, b.l_ca, b.total))
}

/// Exact word sequence of a prompt template.
#[pyfunction]
#[pyo3(signature = (template, class_word, image_index=None))]
fn prompt_words(template: &str, class_word: &str, image_index: Option<usize>) -> PyResult<Vec<String>> {
    let t = match template {
        "subject-only" => text::Template::SubjectOnly,
        "subject-pose" => text::Template::SubjectPose,
        "subject-pose-bg" => text::Template::SubjectPoseBg,
        "class-only" => text::Template::ClassOnly,
        "prior" => text::Template::Prior,
        other => return Err(PyValueError::new_err(format!("unknown template {other}"))),
    };
    let spec = text::PromptSpec::new(t, class_word, image_index);
    text::prompt_words(&spec).map_err(err)
}

#[pyfunction]
fn strip_pseudo_words(prompt: &str) -> String {
    text::strip_pseudo_words(prompt)
}

/// Pretrain the base model; writes a checkpoint and returns the final loss.
#[pyfunction]
fn pretrain(config_toml: &str, out_path: &str) -> PyResult<f64> {
    let config = config_from_toml(config_toml)?;
    let mut last = f64::NAN;
    let model = train::pretrain_base(&config, |s| last = s.losses.total).map_err(err)?;
    model.to_checkpoint().save(Path::new(out_path)).map_err(err)?;
    Ok(last)
}

/// Customize a base checkpoint on a concept directory; returns the final loss.
#[pyfunction]
fn customize(config_toml: &str, base_path: &str, concept_dir: &str, out_path: &str) -> PyResult<f64> {
    let config = config_from_toml(config_toml)?;
    let base = train::Model::from_checkpoint(Checkpoint::load(Path::new(base_path)).map_err(err)?)
        .map_err(err)?;
    let concept = data::load_concept_set(Path::new(concept_dir)).map_err(err)?;
    let mut last = f64::NAN;
    let model = train::customize(&base, &concept, &config, None, |s| last = s.losses.total).map_err(err)?;
    model.to_checkpoint().save(Path::new(out_path)).map_err(err)?;
    Ok(last)
}

/// Sample images for a prompt; writes PNGs and returns their paths.
#[pyfunction]
fn sample(
    ckpt_path: &str,
    prompt: &str,
    n: usize,
    seed: u64,
    steps: usize,
    guidance: f64,
    out_dir: &str,
) -> PyResult<Vec<String>> {
    let model = train::Model::from_checkpoint(Checkpoint::load(Path::new(ckpt_path)).map_err(err)?)
        .map_err(err)?;
    let req = CompositionRequest { prompt: prompt.to_string(), n, guidance, steps, seed };
    let (images, _) = compose_and_sample(&model, &req).map_err(err)?;
    let out = PathBuf::from(out_dir);
    std::fs::create_dir_all(&out).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let mut paths = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let p = out.join(format!("sample_{i:03}.png"));
        decal_core::imageio::save_rgb(&p, img).map_err(err)?;
        paths.push(p.display().to_string());
    }
    Ok(paths)
}

/// Full metric report for a customized checkpoint, as a JSON string.
#[pyfunction]
fn evaluate(ckpt_path: &str, seed: u64) -> PyResult<String> {
    let model = train::Model::from_checkpoint(Checkpoint::load(Path::new(ckpt_path)).map_err(err)?)
        .map_err(err)?;
    let (report, _) = decal_core::eval::evaluate(&model, seed).map_err(err)?;
    serde_json::to_string_pretty(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

#[pymodule]
fn decal_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ConceptSet>()?;
    m.add_class::<Schedule>()?;
    m.add_function(wrap_pyfunction!(generate_concept_set, m)?)?;
    m.add_function(wrap_pyfunction!(load_concept_set, m)?)?;
    m.add_function(wrap_pyfunction!(make_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(ldm_loss, m)?)?;
    m.add_function(wrap_pyfunction!(masked_diffusion_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(prompt_words, m)?)?;
    m.add_function(wrap_pyfunction!(strip_pseudo_words, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(customize, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    Ok(())
}
