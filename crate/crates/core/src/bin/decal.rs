use clap::{Parser, Subcommand};
use decal_core::ckpt::Checkpoint;
use decal_core::compose::{compose_and_sample, CompositionRequest};
use decal_core::config::{load_config, sha256_file, Config, RunManifest};
use decal_core::data::{generate_concept_set, load_concept_set, save_concept_set, SubjectSpec};
use decal_core::error::DecalError;
use decal_core::eval::{evaluate, save_report};
use decal_core::imageio::{grid_emit, save_rgb};
use decal_core::train::{customize, freeze_report, load_reg_set, pretrain_base, save_reg_set, Model};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "decal", version, about = "Toy customized text-to-image diffusion with decoupled subject/pose/background embeddings")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a concept image set with exact masks
    GenData {
        /// SubjectSpec JSON file
        #[arg(long)]
        subject: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
    /// Pretrain the base text-to-image model on the synthetic corpus
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// override config keys: --set customize.gamma=0.5
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Customize a pretrained base on one concept set
    Customize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        concept: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// ablation switch: no-mapper | no-ca | no-joint | masked-ldm
        #[arg(long)]
        ablate: Vec<String>,
        /// reuse a previously generated regularization set
        #[arg(long)]
        reg_dir: Option<PathBuf>,
        /// rerun a previous customize run bit-exactly
        #[arg(long)]
        from_manifest: Option<PathBuf>,
    },
    /// Sample images from a checkpoint for a prompt with pseudo-words
    Sample {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        from_manifest: Option<PathBuf>,
    },
    /// Compute the metric report for a customized checkpoint
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// concept directory (defaults to the set embedded in the checkpoint)
        #[arg(long)]
        concept: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// optional grid of samples ranked by image similarity
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump per-token attention heatmaps for a prompt
    AttnDump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        image_index: usize,
        /// diffusion time step (defaults to T/2)
        #[arg(long)]
        t: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn run(cmd: Cmd) -> decal_core::Result<()> {
    match cmd {
        Cmd::GenData { subject, n, seed, out, resolution } => gen_data(&subject, n, seed, &out, resolution),
        Cmd::Pretrain { config, set, out } => pretrain_cmd(config.as_deref(), &set, &out),
        Cmd::Customize { config, set, base, concept, out, ablate, reg_dir, from_manifest } => {
            customize_cmd(config.as_deref(), &set, base, concept, &out, &ablate, reg_dir, from_manifest)
        }
        Cmd::Sample { ckpt, prompt, n, seed, steps, guidance, out, from_manifest } => {
            sample_cmd(ckpt, prompt, n, seed, steps, guidance, &out, from_manifest)
        }
        Cmd::Eval { ckpt, concept, out, grid, seed } => eval_cmd(&ckpt, concept, &out, grid, seed),
        Cmd::AttnDump { ckpt, prompt, image_index, t, seed, out } => {
            attn_dump_cmd(&ckpt, &prompt, image_index, t, seed, &out)
        }
    }
}

fn gen_data(subject_path: &Path, n: usize, seed: u64, out: &Path, resolution: usize) -> decal_core::Result<()> {
    let text = std::fs::read_to_string(subject_path)
        .map_err(|e| DecalError::MissingArtifact(format!("{}: {e}", subject_path.display())))?;
    let subject: SubjectSpec =
        serde_json::from_str(&text).map_err(|e| DecalError::Config(format!("subject spec: {e}")))?;
    let mut config = Config::default();
    config.run.seed = seed;
    config.data.resolution = resolution;
    let mut args = BTreeMap::new();
    args.insert("subject".into(), subject_path.display().to_string());
    args.insert("n".into(), n.to_string());
    args.insert("resolution".into(), resolution.to_string());
    let mut manifest = RunManifest::start("gen-data", &config, args);
    manifest.input_hashes.insert(subject_path.display().to_string(), sha256_file(subject_path)?);
    let manifest_path = out.join("run_manifest.json");
    manifest.save(&manifest_path)?;

    let set = generate_concept_set(&subject, n, seed, resolution)?;
    save_concept_set(&set, out)?;
    log::info!("wrote {n} images to {}", out.display());

    for name in ["subject.json", "metadata.json"] {
        let p = out.join(name);
        manifest.output_hashes.insert(name.into(), sha256_file(&p)?);
        manifest.artifacts.push(p.display().to_string());
    }
    for i in 0..n {
        for rel in [format!("images/img_{i:03}.png"), format!("masks/mask_{i:03}.png")] {
            let p = out.join(&rel);
            manifest.output_hashes.insert(rel.clone(), sha256_file(&p)?);
            manifest.artifacts.push(p.display().to_string());
        }
    }
    manifest.finish();
    manifest.save(&manifest_path)?;
    Ok(())
}

fn write_log_line(f: &mut std::fs::File, log: &decal_core::train::StepLog) {
    if let Ok(line) = serde_json::to_string(log) {
        let _ = writeln!(f, "{line}");
    }
}

fn pretrain_cmd(config_path: Option<&Path>, overrides: &[String], out: &Path) -> decal_core::Result<()> {
    let config = load_config(config_path, overrides)?;
    let mut args = BTreeMap::new();
    args.insert("out".into(), out.display().to_string());
    let mut manifest = RunManifest::start("pretrain", &config, args);
    let manifest_path = sibling(out, "manifest.json");
    manifest.save(&manifest_path)?;

    let log_path = sibling(out, "train_log.jsonl");
    if let Some(dir) = log_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut log_file = std::fs::File::create(&log_path)?;
    let total = config.pretrain.steps;
    let t0 = std::time::Instant::now();
    let model = pretrain_base(&config, |s| {
        write_log_line(&mut log_file, s);
        if (s.step + 1) % 100 == 0 || s.step + 1 == total {
            log::info!(
                "pretrain step {}/{} loss {:.4} ({:.1}s)",
                s.step + 1,
                total,
                s.losses.total,
                t0.elapsed().as_secs_f64()
            );
        }
    })?;
    model.to_checkpoint().save(out)?;
    log::info!("checkpoint written to {}", out.display());

    manifest.output_hashes.insert("checkpoint".into(), sha256_file(out)?);
    manifest.artifacts.push(out.display().to_string());
    manifest.artifacts.push(log_path.display().to_string());
    manifest.finish();
    manifest.save(&manifest_path)?;
    Ok(())
}

fn apply_ablations(overrides: &mut Vec<String>, ablate: &[String]) -> decal_core::Result<()> {
    for a in ablate {
        let o = match a.as_str() {
            "no-mapper" => "customize.mappers_on=false",
            "no-ca" => "customize.ca_loss_on=false",
            "no-joint" => "customize.gamma=0.0",
            "masked-ldm" => "customize.masked_diffusion_on=true",
            other => {
                return Err(DecalError::Config(format!(
                    "unknown ablation {other}; expected no-mapper|no-ca|no-joint|masked-ldm"
                )))
            }
        };
        overrides.push(o.to_string());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn customize_cmd(
    config_path: Option<&Path>,
    set: &[String],
    base: Option<PathBuf>,
    concept: Option<PathBuf>,
    out: &Path,
    ablate: &[String],
    reg_dir: Option<PathBuf>,
    from_manifest: Option<PathBuf>,
) -> decal_core::Result<()> {
    let (config, base_path, concept_path) = match &from_manifest {
        Some(mpath) => {
            let m = RunManifest::load(mpath)?;
            let base_path = PathBuf::from(
                m.args.get("base").ok_or_else(|| DecalError::Config("manifest lacks base".into()))?,
            );
            let concept_path = PathBuf::from(
                m.args
                    .get("concept")
                    .ok_or_else(|| DecalError::Config("manifest lacks concept".into()))?,
            );
            (m.config, base_path, concept_path)
        }
        None => {
            let mut overrides = set.to_vec();
            apply_ablations(&mut overrides, ablate)?;
            let config = load_config(config_path, &overrides)?;
            let base = base.ok_or_else(|| DecalError::Config("--base is required".into()))?;
            let concept = concept.ok_or_else(|| DecalError::Config("--concept is required".into()))?;
            (config, base, concept)
        }
    };

    let mut args = BTreeMap::new();
    args.insert("base".into(), base_path.display().to_string());
    args.insert("concept".into(), concept_path.display().to_string());
    args.insert("out".into(), out.display().to_string());
    let mut manifest = RunManifest::start("customize", &config, args);
    manifest
        .input_hashes
        .insert(base_path.display().to_string(), sha256_file(&base_path)?);
    let manifest_path = sibling(out, "manifest.json");
    manifest.save(&manifest_path)?;

    let base_model = Model::from_checkpoint(Checkpoint::load(&base_path)?)?;
    let concept_set = load_concept_set(&concept_path)?;
    let reg = match &reg_dir {
        Some(d) => Some(load_reg_set(d)?),
        None => None,
    };

    let log_path = sibling(out, "train_log.jsonl");
    if let Some(dir) = log_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut log_file = std::fs::File::create(&log_path)?;
    let total = config.customize.steps;
    let t0 = std::time::Instant::now();
    let model = customize(&base_model, &concept_set, &config, reg, |s| {
        write_log_line(&mut log_file, s);
        if (s.step + 1) % 100 == 0 || s.step + 1 == total {
            log::info!(
                "customize step {}/{} loss {:.4} ({:.1}s)",
                s.step + 1,
                total,
                s.losses.total,
                t0.elapsed().as_secs_f64()
            );
        }
    })?;
    model.to_checkpoint().save(out)?;

    // persist the regularization set used (regenerated identically from the
    // frozen base) unless an external one was supplied
    if reg_dir.is_none() && config.customize.lambda_pr > 0.0 && config.customize.reg_set_size > 0 {
        let reg = decal_core::train::build_reg_set(
            &base_model,
            &concept_set.subject.class_word,
            config.customize.reg_set_size,
            config.run.seed,
        )?;
        save_reg_set(&reg, &sibling(out, "regset"))?;
    }

    let trainable = decal_core::train::customize_trainable_set(&model, concept_set.images.len());
    let report = freeze_report(&base_model.store, &model.store, &trainable);
    let report_path = sibling(out, "freeze_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    if !report.ok() {
        return Err(DecalError::Numeric(format!(
            "freeze violations: {:?}",
            report.violations
        )));
    }
    log::info!("checkpoint written to {}", out.display());

    manifest.output_hashes.insert("checkpoint".into(), sha256_file(out)?);
    for p in [out.to_path_buf(), log_path, report_path] {
        manifest.artifacts.push(p.display().to_string());
    }
    manifest.finish();
    manifest.save(&manifest_path)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample_cmd(
    ckpt: Option<PathBuf>,
    prompt: Option<String>,
    n: usize,
    seed: u64,
    steps: Option<usize>,
    guidance: Option<f64>,
    out: &Path,
    from_manifest: Option<PathBuf>,
) -> decal_core::Result<()> {
    let (ckpt_path, req, expect_hash) = match &from_manifest {
        Some(mpath) => {
            let m = RunManifest::load(mpath)?;
            let ckpt_path = PathBuf::from(
                m.args.get("ckpt").ok_or_else(|| DecalError::Config("manifest lacks ckpt".into()))?,
            );
            let req = CompositionRequest {
                prompt: m
                    .args
                    .get("prompt")
                    .ok_or_else(|| DecalError::Config("manifest lacks prompt".into()))?
                    .clone(),
                n: m.args.get("n").and_then(|v| v.parse().ok()).unwrap_or(8),
                guidance: m.args.get("guidance").and_then(|v| v.parse().ok()).unwrap_or(6.0),
                steps: m.args.get("steps").and_then(|v| v.parse().ok()).unwrap_or(50),
                seed: m.seed,
            };
            let expect = m.input_hashes.get(&ckpt_path.display().to_string()).cloned();
            (ckpt_path, req, expect)
        }
        None => {
            let ckpt_path = ckpt.ok_or_else(|| DecalError::Config("--ckpt is required".into()))?;
            let prompt = prompt.ok_or_else(|| DecalError::Config("--prompt is required".into()))?;
            (ckpt_path, CompositionRequest { prompt, n, guidance: 0.0, steps: 0, seed }, None)
        }
    };

    let ckpt_hash = sha256_file(&ckpt_path)?;
    if let Some(expect) = expect_hash {
        if expect != ckpt_hash {
            return Err(DecalError::MissingArtifact(format!(
                "checkpoint {} does not match the manifest hash",
                ckpt_path.display()
            )));
        }
    }
    let model = Model::from_checkpoint(Checkpoint::load(&ckpt_path)?)?;
    let req = if from_manifest.is_some() {
        req
    } else {
        CompositionRequest {
            guidance: guidance.unwrap_or(model.config.sample.guidance),
            steps: steps.unwrap_or(model.config.sample.steps),
            ..req
        }
    };

    let mut config = model.config.clone();
    config.run.seed = req.seed;
    let mut args = BTreeMap::new();
    args.insert("ckpt".into(), ckpt_path.display().to_string());
    args.insert("prompt".into(), req.prompt.clone());
    args.insert("n".into(), req.n.to_string());
    args.insert("steps".into(), req.steps.to_string());
    args.insert("guidance".into(), req.guidance.to_string());
    args.insert("out".into(), out.display().to_string());
    let mut manifest = RunManifest::start("sample", &config, args);
    manifest.input_hashes.insert(ckpt_path.display().to_string(), ckpt_hash);
    let manifest_path = out.join("run_manifest.json");
    manifest.save(&manifest_path)?;

    let (images, comp_manifest) = compose_and_sample(&model, &req)?;
    std::fs::create_dir_all(out)?;
    for (i, img) in images.iter().enumerate() {
        let p = out.join(format!("sample_{i:03}.png"));
        save_rgb(&p, img)?;
        manifest.output_hashes.insert(format!("sample_{i:03}.png"), sha256_file(&p)?);
        manifest.artifacts.push(p.display().to_string());
    }
    let cols = images.len().min(4);
    let rows = images.len().div_ceil(cols);
    let labels: Vec<String> = (0..cols).map(|i| format!("S{i}")).collect();
    let grid_path = out.join("grid.png");
    grid_emit(&images, rows, cols, &labels, &grid_path)?;
    manifest.artifacts.push(grid_path.display().to_string());
    std::fs::write(out.join("composition.json"), serde_json::to_string_pretty(&comp_manifest)?)?;

    manifest.finish();
    manifest.save(&manifest_path)?;
    log::info!("wrote {} samples to {}", images.len(), out.display());
    Ok(())
}

fn eval_cmd(
    ckpt: &Path,
    concept: Option<PathBuf>,
    out: &Path,
    grid: Option<PathBuf>,
    seed: u64,
) -> decal_core::Result<()> {
    let mut model = Model::from_checkpoint(Checkpoint::load(ckpt)?)?;
    if let Some(cdir) = &concept {
        model.concept = Some(load_concept_set(cdir)?);
    }
    let mut config = model.config.clone();
    config.run.seed = seed;
    let mut args = BTreeMap::new();
    args.insert("ckpt".into(), ckpt.display().to_string());
    args.insert("out".into(), out.display().to_string());
    let mut manifest = RunManifest::start("eval", &config, args);
    manifest.input_hashes.insert(ckpt.display().to_string(), sha256_file(ckpt)?);
    let manifest_path = sibling(out, "manifest.json");
    manifest.save(&manifest_path)?;

    let (report, samples) = evaluate(&model, seed)?;
    save_report(&report, out)?;
    log::info!(
        "clip_t {:.4} clip_i {:.4} (fg {:.4}) dino_i {:.4} (fg {:.4}) attn_iou {:.4}",
        report.clip_t, report.clip_i, report.clip_i_fg, report.dino_i, report.dino_i_fg,
        report.attention_iou_pose
    );

    if let Some(grid_path) = grid {
        // rank samples by image similarity, best first
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.sort_by(|&a, &b| {
            report.per_sample_clip_i[b]
                .partial_cmp(&report.per_sample_clip_i[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let ranked: Vec<_> = order.iter().map(|&i| samples[i].clone()).collect();
        let cols = ranked.len().min(4);
        let rows = ranked.len().div_ceil(cols);
        let labels: Vec<String> = (0..cols)
            .map(|i| if i == 0 { "BEST".to_string() } else { format!("R{i}") })
            .collect();
        grid_emit(&ranked, rows, cols, &labels, &grid_path)?;
        manifest.artifacts.push(grid_path.display().to_string());
    }

    manifest.output_hashes.insert("report".into(), sha256_file(out)?);
    manifest.artifacts.push(out.display().to_string());
    manifest.finish();
    manifest.save(&manifest_path)?;
    Ok(())
}

fn attn_dump_cmd(
    ckpt: &Path,
    prompt: &str,
    image_index: usize,
    t: Option<usize>,
    seed: u64,
    out: &Path,
) -> decal_core::Result<()> {
    let model = Model::from_checkpoint(Checkpoint::load(ckpt)?)?;
    let concept = model
        .concept
        .as_ref()
        .ok_or_else(|| DecalError::MissingArtifact("attn-dump needs a customized checkpoint".into()))?;
    let img = concept
        .images
        .get(image_index)
        .ok_or_else(|| DecalError::Config(format!("image index {image_index} out of range")))?;
    let t = t.unwrap_or(model.schedule.len() / 2);

    let tokens = decal_core::text::tokenize(prompt, &model.vocab)?;
    let (overrides, _) = decal_core::compose::resolve_pseudo_words(&model, &tokens)?;
    let cond = model.encode_tokens(&tokens, &overrides)?;

    let z0 = decal_core::diffusion::to_model_range(&img.pixels);
    let mut rng = decal_core::rng::stream(seed, "attn-dump");
    let eps = decal_core::diffusion::randn3(&mut rng, 3, z0.shape()[1], z0.shape()[2]);
    let zt = decal_core::diffusion::q_sample(&z0, t, &eps, &model.schedule)?;
    let (_, rec) = model.unet.predict_eps(&model.store, &zt, t, &cond, true)?;
    let rec = rec.unwrap();

    let tiles = decal_core::eval::token_heatmaps(&model, &rec, tokens.len())?;
    let labels: Vec<String> = tokens
        .iter()
        .map(|&id| model.vocab.word(id).to_string())
        .collect();
    grid_emit(&tiles, 1, tiles.len(), &labels, out)?;
    log::info!("attention grid written to {}", out.display());
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    path.with_file_name(format!("{stem}.{suffix}"))
}
