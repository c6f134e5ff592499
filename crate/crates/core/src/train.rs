//! Two-stage training: base pretraining of the toy text-to-image model on a
//! multi-class synthetic corpus, then the customization finetune with
//! probability-gamma background filtering, the trainable-parameter mask, and
//! prior-preservation against a generated regularization set.

use crate::ckpt::{Checkpoint, CheckpointKind};
use crate::config::Config;
use crate::data::{
    apply_background_filter, render_corpus, ConceptImage, ConceptSet, CLASS_WORDS,
};
use crate::diffusion::{
    make_schedule, q_sample, randn3, to_model_range, DdimParams, ScheduleTable, UNet,
};
use crate::error::{DecalError, Result};
use crate::losses::{cross_attention_loss_graph, LossBreakdown};
use crate::mappers::{
    extract_features, Attribute, AttributeMapper, EmbeddingSetup, ExtractorMode, D_FEAT,
};
use crate::params::{
    collect_named_grads, init_normal, AdamW, AdamWConfig, Binder, ParamStore,
};
use crate::rng::{stream, StreamState};
use crate::tensor::{Graph, Var};
use crate::text::{
    build_prompt, register_pseudo_word, AttributeWord, ConditionSequence, PromptSpec, PseudoInit,
    SlotPositions, Template, TextEncoder, Vocabulary, BASE_TABLE,
};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// A loaded model: geometry, schedule, vocabulary, and all weights.
pub struct Model {
    pub config: Config,
    pub kind: CheckpointKind,
    pub unet: UNet,
    pub text: TextEncoder,
    pub schedule: ScheduleTable,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub concept: Option<ConceptSet>,
    pub rng_streams: Vec<StreamState>,
    pub trained_steps: u64,
}

impl Model {
    /// Fresh initialization (start of pretraining).
    pub fn init(config: &Config) -> Result<Model> {
        config.validate()?;
        let unet = UNet::new(config.unet_config())?;
        let text = TextEncoder::new(config.model.d_text, config.model.seq_len);
        let schedule = make_schedule(&config.schedule)?;
        let vocab = Vocabulary::base();
        let mut store = ParamStore::new();
        let mut rng = stream(config.run.seed, "init");
        text.init_params(&mut store, &vocab, &mut rng);
        unet.init_params(&mut store, &mut rng);
        Ok(Model {
            config: config.clone(),
            kind: CheckpointKind::Base,
            unet,
            text,
            schedule,
            vocab,
            store,
            concept: None,
            rng_streams: Vec::new(),
            trained_steps: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Model> {
        let config = ckpt.meta.config.clone();
        config.validate()?;
        let unet = UNet::new(config.unet_config())?;
        let text = TextEncoder::new(config.model.d_text, config.model.seq_len);
        let schedule = make_schedule(&config.schedule)?;
        let vocab = Vocabulary::with_pseudo(ckpt.meta.vocab_pseudo.clone());
        let concept = ckpt.concept_set()?;
        Ok(Model {
            config,
            kind: ckpt.meta.kind,
            unet,
            text,
            schedule,
            vocab,
            store: ckpt.params,
            concept,
            rng_streams: ckpt.meta.rng_streams,
            trained_steps: ckpt.meta.trained_steps,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.kind, &self.config);
        ck.meta.vocab_pseudo = self.vocab.pseudo_words().to_vec();
        ck.meta.rng_streams = self.rng_streams.clone();
        ck.meta.trained_steps = self.trained_steps;
        ck.params = self.store.clone();
        if let Some(set) = &self.concept {
            // params for images/masks already live in the store when loaded
            // from a checkpoint; embed_concept overwrites them consistently
            ck.embed_concept(set);
        }
        ck
    }

    pub fn mappers(&self) -> (AttributeMapper, AttributeMapper) {
        let m = &self.config.model;
        (
            AttributeMapper::new(Attribute::Pose, D_FEAT, m.mapper_hidden, m.d_text),
            AttributeMapper::new(Attribute::Background, D_FEAT, m.mapper_hidden, m.d_text),
        )
    }

    pub fn embedding_setup(&self) -> EmbeddingSetup {
        let (pose, bg) = self.mappers();
        EmbeddingSetup {
            mappers_on: self.config.customize.mappers_on,
            extractor: self.config.model.extractor,
            pose,
            bg,
        }
    }

    /// Numeric prompt encoding (frozen embeddings).
    pub fn encode_tokens(
        &self,
        tokens: &[usize],
        overrides: &BTreeMap<usize, Array1<f64>>,
    ) -> Result<ConditionSequence> {
        self.text.encode(&self.store, &self.vocab, tokens, overrides)
    }

    pub fn encode_empty(&self) -> Result<ConditionSequence> {
        self.text.encode_empty(&self.store, &self.vocab)
    }

    /// The attribute word policy for this run.
    pub fn attribute_word(&self, is_living: bool) -> AttributeWord {
        match self.config.customize.attribute_word.as_str() {
            "pose" => AttributeWord::Pose,
            "view" => AttributeWord::View,
            _ => AttributeWord::for_living(is_living),
        }
    }
}

/// One structured record per training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub seed: u64,
    pub branch_filtered: bool,
    pub has_b_token: bool,
    pub image_indices: Vec<usize>,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

fn mean_var(g: &mut Graph, terms: &[Var]) -> Var {
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = g.add(sum, t);
    }
    g.scale(sum, 1.0 / terms.len() as f64)
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

/// Pretrain the base text-to-image model on the synthetic corpus with
/// CLASS_ONLY captions and condition dropout for guidance.
pub fn pretrain_base(config: &Config, mut on_step: impl FnMut(&StepLog)) -> Result<Model> {
    if config.data.corpus_classes < 5 || config.data.corpus_per_class < 200 {
        return Err(DecalError::Config(format!(
            "pretraining corpus too small: needs >= 5 classes x >= 200 images, got {} x {}",
            config.data.corpus_classes, config.data.corpus_per_class
        )));
    }
    let mut model = Model::init(config)?;
    let seed = config.run.seed;
    let corpus = render_corpus(
        config.data.corpus_classes,
        config.data.corpus_per_class,
        seed,
        config.data.resolution,
    )?;

    // class-only token sequences
    let class_tokens: Vec<Vec<usize>> = (0..config.data.corpus_classes)
        .map(|c| {
            let spec = PromptSpec::new(Template::ClassOnly, CLASS_WORDS[c].0, None);
            build_prompt(&spec, &model.vocab)
        })
        .collect::<Result<_>>()?;

    // trainable: the denoiser and the base embedding table
    let mut trainable: BTreeSet<String> = model
        .store
        .names()
        .filter(|n| n.starts_with("unet."))
        .cloned()
        .collect();
    trainable.insert(BASE_TABLE.to_string());

    let mut text = model.text;
    text.train_embeddings = true;

    let mut opt = AdamW::new(AdamWConfig {
        lr: config.pretrain.lr,
        weight_decay: config.pretrain.weight_decay,
        ..Default::default()
    });

    let mut batch_rng = stream(seed, "pretrain-batch");
    let mut noise_rng = stream(seed, "pretrain-noise");
    let mut drop_rng = stream(seed, "pretrain-drop");
    let t_max = model.schedule.len();
    let res = config.data.resolution;

    for step in 0..config.pretrain.steps {
        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, &model.store).with_trainable(&trainable);
        let mut terms = Vec::with_capacity(config.pretrain.batch_size);
        let mut indices = Vec::new();
        for _ in 0..config.pretrain.batch_size {
            let idx = batch_rng.random_range(0..corpus.len());
            indices.push(idx);
            let t = noise_rng.random_range(0..t_max);
            let eps = randn3(&mut noise_rng, 3, res, res);
            let dropped = drop_rng.random::<f64>() < config.pretrain.cond_dropout;
            let tokens: &[usize] = if dropped { &[] } else { &class_tokens[corpus[idx].class_id] };
            let (cond, _) = text.encode_graph(&mut b, &model.vocab, tokens, &BTreeMap::new())?;
            let z0 = to_model_range(&corpus[idx].pixels);
            let zt = q_sample(&z0, t, &eps, &model.schedule)?;
            let zt_v = b.graph.constant(zt.into_dyn());
            let (eps_hat, _) = model.unet.forward_graph(&mut b, zt_v, t, cond);
            let eps_v = b.graph.constant(eps.into_dyn());
            terms.push(b.graph.mse(eps_hat, eps_v));
        }
        let loss = mean_var(b.graph, &terms);
        let loss_val = b.graph.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(DecalError::Numeric(format!(
                "pretraining diverged at step {step}: loss {loss_val}"
            )));
        }
        let bound = b.into_bound();
        let mut grads = g.backward(loss);
        let named = collect_named_grads(&bound, &mut grads);
        opt.step(&mut model.store, &named)?;
        model.trained_steps += 1;
        on_step(&StepLog {
            step,
            seed,
            branch_filtered: false,
            has_b_token: false,
            image_indices: indices,
            losses: LossBreakdown {
                l_ldm: loss_val,
                l_pr: None,
                l_ca: None,
                lambda_pr: 0.0,
                lambda_ca: 0.0,
                total: loss_val,
            },
        });
    }

    // frozen evaluation heads: class probe and foreground segmenter
    crate::eval::fit_probes(&mut model.store, &corpus, config.data.corpus_classes);
    if config.model.extractor == ExtractorMode::Learned {
        fit_learned_extractor(&mut model.store, &corpus, config)?;
    }

    model.rng_streams = vec![
        StreamState::capture("pretrain-batch", seed, &batch_rng),
        StreamState::capture("pretrain-noise", seed, &noise_rng),
        StreamState::capture("pretrain-drop", seed, &drop_rng),
    ];
    Ok(model)
}

/// Train the small conv feature extractor as a class predictor on the
/// corpus, then freeze it. Only runs in learned-extractor mode.
fn fit_learned_extractor(
    store: &mut ParamStore,
    corpus: &[crate::data::CorpusItem],
    config: &Config,
) -> Result<()> {
    let n_classes = config.data.corpus_classes;
    let mut rng = stream(config.run.seed, "extractor-init");
    crate::mappers::init_learned_extractor(store, &mut rng);
    store.insert("extractor.cls.w", init_normal(&mut rng, &[D_FEAT, n_classes], 0.05));
    store.insert("extractor.cls.b", crate::params::init_zeros(&[n_classes]));
    let trainable: BTreeSet<String> = store
        .names()
        .filter(|n| n.starts_with("extractor."))
        .cloned()
        .collect();
    let mut opt = AdamW::new(AdamWConfig { lr: 1e-3, weight_decay: 0.0, ..Default::default() });
    let mut batch_rng = stream(config.run.seed, "extractor-batch");
    let steps = 300;
    for _ in 0..steps {
        let mut g = Graph::new();
        let mut b = Binder::new(&mut g, store).with_trainable(&trainable);
        let mut terms = Vec::new();
        for _ in 0..8 {
            let idx = batch_rng.random_range(0..corpus.len());
            let px = b.graph.constant(corpus[idx].pixels.clone().into_dyn());
            let feat = crate::mappers::learned_features_graph(&mut b, px);
            let wc = b.bind("extractor.cls.w");
            let logits = b.graph.matmul(feat, wc);
            let bc = b.bind("extractor.cls.b");
            let logits = b.graph.add_row_bias(logits, bc);
            let probs = b.graph.softmax_rows(logits);
            let mut onehot = Array2::<f64>::zeros((1, n_classes));
            onehot[[0, corpus[idx].class_id]] = 1.0;
            let target = b.graph.constant(onehot.into_dyn());
            terms.push(b.graph.mse(probs, target));
        }
        let loss = mean_var(b.graph, &terms);
        let bound = b.into_bound();
        let mut grads = g.backward(loss);
        let named = collect_named_grads(&bound, &mut grads);
        opt.step(store, &named)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// regularization set
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegSetMeta {
    pub class_word: String,
    pub prompt: String,
    pub seed: u64,
    pub n: usize,
    pub ddim_steps: usize,
    pub guidance: f64,
}

pub struct RegSet {
    pub images: Vec<Array3<f64>>,
    pub meta: RegSetMeta,
}

/// Generate class-prompted regularization images from the frozen base model.
pub fn build_reg_set(model: &Model, class_word: &str, n: usize, seed: u64) -> Result<RegSet> {
    let spec = PromptSpec::new(Template::Prior, class_word, None);
    let words = crate::text::prompt_words(&spec)?;
    let tokens = build_prompt(&spec, &model.vocab)?;
    let cond = model.encode_tokens(&tokens, &BTreeMap::new())?;
    let null = model.encode_empty()?;
    let steps = model.config.customize.reg_steps;
    let guidance = model.config.sample.guidance;
    let mut images = Vec::with_capacity(n);
    for k in 0..n {
        let s = crate::rng::stream_seed(seed, &format!("reg-{k}"));
        let img_seed = u64::from_le_bytes(s[..8].try_into().unwrap());
        let img = crate::diffusion::ddim_sample(
            &model.unet,
            &model.store,
            &model.schedule,
            &cond,
            Some(&null),
            &DdimParams { steps, guidance, seed: img_seed },
        )?;
        images.push(img);
    }
    Ok(RegSet {
        images,
        meta: RegSetMeta {
            class_word: class_word.to_string(),
            prompt: words.join(" "),
            seed,
            n,
            ddim_steps: steps,
            guidance,
        },
    })
}

pub fn save_reg_set(set: &RegSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, img) in set.images.iter().enumerate() {
        crate::imageio::save_rgb(&dir.join(format!("reg_{i:03}.png")), img)?;
    }
    std::fs::write(dir.join("regset.json"), serde_json::to_string_pretty(&set.meta)?)?;
    Ok(())
}

pub fn load_reg_set(dir: &Path) -> Result<RegSet> {
    let meta: RegSetMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.join("regset.json")).map_err(|e| {
            DecalError::MissingArtifact(format!("regset.json in {}: {e}", dir.display()))
        })?)?;
    let mut images = Vec::with_capacity(meta.n);
    for i in 0..meta.n {
        images.push(crate::imageio::load_rgb(&dir.join(format!("reg_{i:03}.png")))?);
    }
    Ok(RegSet { images, meta })
}

// ---------------------------------------------------------------------------
// customization
// ---------------------------------------------------------------------------

/// Names of the parameters the customization step is allowed to update.
pub fn customize_trainable_set(model: &Model, n_images: usize) -> BTreeSet<String> {
    let mut set = BTreeSet::new();
    set.insert(crate::text::pseudo_row_name("[V]"));
    for name in model.unet.kv_param_names() {
        set.insert(name);
    }
    if model.config.customize.mappers_on {
        let (pose, bg) = model.mappers();
        for n in pose.param_names().into_iter().chain(bg.param_names()) {
            set.insert(n);
        }
    } else {
        for i in 0..n_images {
            set.insert(crate::text::pseudo_row_name(&format!("[P_{i}]")));
            set.insert(crate::text::pseudo_row_name(&format!("[B_{i}]")));
        }
    }
    set
}

/// Run the customization finetune. `config` supplies the customize section
/// and seed; its model/data/schedule sections must match the base checkpoint.
pub fn customize(
    base: &Model,
    concept: &ConceptSet,
    config: &Config,
    reg: Option<RegSet>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Model> {
    config.validate()?;
    if base.kind != CheckpointKind::Base {
        return Err(DecalError::Config("customize needs a base checkpoint".into()));
    }
    if base.config.model != config.model
        || base.config.data != config.data
        || base.config.schedule != config.schedule
    {
        return Err(DecalError::Config(
            "model/data/schedule sections differ from the base checkpoint".into(),
        ));
    }
    let class_word = concept.subject.class_word.clone();
    let class_id = CLASS_WORDS
        .iter()
        .position(|(w, _)| *w == class_word)
        .ok_or_else(|| DecalError::Config(format!("unknown concept class: {class_word}")))?;
    if class_id >= config.data.corpus_classes {
        return Err(DecalError::Config(format!(
            "concept class {class_word} was not part of the pretraining corpus"
        )));
    }
    let res = config.data.resolution;
    for img in &concept.images {
        if img.pixels.shape() != [3, res, res] {
            return Err(DecalError::Config(format!(
                "concept image resolution {:?} does not match config {res}",
                img.pixels.shape()
            )));
        }
        img.pose.validate()?;
    }
    let n_images = concept.images.len();
    let seed = config.run.seed;
    let cz = &config.customize;

    let mut model = Model {
        config: config.clone(),
        kind: CheckpointKind::Customized,
        unet: UNet::new(config.unet_config())?,
        text: base.text,
        schedule: base.schedule.clone(),
        vocab: base.vocab.clone(),
        store: base.store.clone(),
        concept: Some(concept.clone()),
        rng_streams: Vec::new(),
        trained_steps: base.trained_steps,
    };

    // regularization set comes from the frozen base, before any update
    let reg = match (reg, cz.lambda_pr > 0.0 && cz.reg_set_size > 0) {
        (Some(r), true) => Some(r),
        (None, true) => Some(build_reg_set(base, &class_word, cz.reg_set_size, seed)?),
        (_, false) => None,
    };

    // pseudo-word registration
    let mut init_rng = stream(seed, "customize-init");
    let v_init = match cz.subject_init.as_str() {
        "random" => PseudoInit::Vector(
            init_normal(&mut init_rng, &[config.model.d_text], 0.02)
                .into_dimensionality()
                .unwrap(),
        ),
        _ => PseudoInit::FromWord(class_word.clone()),
    };
    register_pseudo_word(&mut model.vocab, &mut model.store, "[V]", v_init)?;
    for i in 0..n_images {
        let (pi, bi) = (format!("[P_{i}]"), format!("[B_{i}]"));
        if cz.mappers_on {
            register_pseudo_word(&mut model.vocab, &mut model.store, &pi, PseudoInit::Slot)?;
            register_pseudo_word(&mut model.vocab, &mut model.store, &bi, PseudoInit::Slot)?;
        } else {
            let z = Array1::<f64>::zeros(config.model.d_text);
            register_pseudo_word(&mut model.vocab, &mut model.store, &pi, PseudoInit::Vector(z.clone()))?;
            register_pseudo_word(&mut model.vocab, &mut model.store, &bi, PseudoInit::Vector(z))?;
        }
    }
    let (pose_mapper, bg_mapper) = model.mappers();
    if cz.mappers_on {
        pose_mapper.init_params(&mut model.store, &mut init_rng);
        bg_mapper.init_params(&mut model.store, &mut init_rng);
    }

    let trainable = customize_trainable_set(&model, n_images);

    // precompute per-image artifacts
    let filtered: Vec<ConceptImage> = concept
        .images
        .iter()
        .map(|img| apply_background_filter(img, config.data.blank_value))
        .collect();
    let features: Vec<Array2<f64>> = concept
        .images
        .iter()
        .map(|img| {
            extract_features(img, config.model.extractor, &model.store)
                .map(|f| f.values.insert_axis(ndarray::Axis(0)))
        })
        .collect::<Result<_>>()?;
    let attr = model.attribute_word(concept.subject.is_living);
    let ca_res = model
        .unet
        .cfg
        .ca_resolution()
        .ok_or_else(|| DecalError::Config("model has no attention layers".into()))?;

    // prior prompt encoding is constant during customization
    let prior_spec = PromptSpec::new(Template::Prior, &class_word, None);
    let prior_tokens = build_prompt(&prior_spec, &model.vocab)?;

    let mut opt = AdamW::new(AdamWConfig {
        lr: cz.lr,
        beta1: cz.adam_beta1,
        beta2: cz.adam_beta2,
        eps: cz.adam_eps,
        weight_decay: cz.weight_decay,
    });

    let mut gamma_rng = stream(seed, "gamma");
    let mut batch_rng = stream(seed, "batch");
    let mut noise_rng = stream(seed, "train-noise");
    let mut reg_rng = stream(seed, "reg-batch");
    let t_max = model.schedule.len();

    for step in 0..cz.steps {
        let branch_filtered = gamma_rng.random::<f64>() < cz.gamma;
        let mut g = Graph::new();
        let mut binder = Binder::new(&mut g, &model.store).with_trainable(&trainable);

        let mut recon_terms = Vec::new();
        let mut ca_terms = Vec::new();
        let mut indices = Vec::new();
        let mut saw_b_token = false;

        for _ in 0..cz.batch_size {
            let i = batch_rng.random_range(0..n_images);
            indices.push(i);
            let t = noise_rng.random_range(0..t_max);
            let eps = randn3(&mut noise_rng, 3, res, res);
            let img = &concept.images[i];
            let input = if branch_filtered { &filtered[i] } else { img };

            let template = if branch_filtered { Template::SubjectPose } else { Template::SubjectPoseBg };
            let spec = PromptSpec {
                template,
                class_word: class_word.clone(),
                attribute_word: attr,
                image_index: Some(i),
            };
            let tokens = build_prompt(&spec, &model.vocab)?;
            let positions = crate::text::slot_positions(&tokens, &model.vocab);
            saw_b_token |= positions.background.is_some();

            // mapper overrides, computed from the unfiltered image
            let mut overrides: BTreeMap<usize, Var> = BTreeMap::new();
            if cz.mappers_on {
                let feat = binder.graph.constant(features[i].clone().into_dyn());
                if let Some(p) = positions.pose {
                    let vp = pose_mapper.forward_graph(&mut binder, feat);
                    overrides.insert(p, vp);
                }
                if let Some(bpos) = positions.background {
                    let vb = bg_mapper.forward_graph(&mut binder, feat);
                    overrides.insert(bpos, vb);
                }
            }
            let (cond, _) = model.text.encode_graph(&mut binder, &model.vocab, &tokens, &overrides)?;

            let z0 = to_model_range(&input.pixels);
            let zt = q_sample(&z0, t, &eps, &model.schedule)?;
            let zt_v = binder.graph.constant(zt.into_dyn());
            let (eps_hat, taps) = model.unet.forward_graph(&mut binder, zt_v, t, cond);
            let eps_v = binder.graph.constant(eps.into_dyn());

            if cz.masked_diffusion_on && branch_filtered {
                // Eq-6-style masked reconstruction on filtered steps
                let mut m3 = Array3::<f64>::zeros((3, res, res));
                for c in 0..3 {
                    for y in 0..res {
                        for x in 0..res {
                            m3[[c, y, x]] = img.mask[[y, x]];
                        }
                    }
                }
                let d = binder.graph.sub(eps_v, eps_hat);
                let mv = binder.graph.constant(m3.into_dyn());
                let dm = binder.graph.mul(d, mv);
                let sq = binder.graph.mul(dm, dm);
                recon_terms.push(binder.graph.mean_all(sq));
            } else {
                recon_terms.push(binder.graph.mse(eps_hat, eps_v));
            }

            if cz.ca_loss_on {
                let bg_pos = if branch_filtered { None } else { positions.background };
                let ca = cross_attention_loss_graph(
                    &mut *binder.graph,
                    &taps,
                    positions.pose,
                    bg_pos,
                    &img.mask,
                    ca_res,
                )?;
                if let Some(ca) = ca {
                    ca_terms.push(ca);
                }
            }
            let _ = taps;
        }

        let mut reg_terms = Vec::new();
        if let Some(reg) = &reg {
            let (reg_cond, _) =
                model.text.encode_graph(&mut binder, &model.vocab, &prior_tokens, &BTreeMap::new())?;
            for _ in 0..cz.batch_size {
                let r = reg_rng.random_range(0..reg.images.len());
                let t = noise_rng.random_range(0..t_max);
                let eps = randn3(&mut noise_rng, 3, res, res);
                let z0 = to_model_range(&reg.images[r]);
                let zt = q_sample(&z0, t, &eps, &model.schedule)?;
                let zt_v = binder.graph.constant(zt.into_dyn());
                let (eps_hat, _) = model.unet.forward_graph(&mut binder, zt_v, t, reg_cond);
                let eps_v = binder.graph.constant(eps.into_dyn());
                reg_terms.push(binder.graph.mse(eps_hat, eps_v));
            }
        }

        let l_ldm_v = mean_var(binder.graph, &recon_terms);
        let l_pr_v = if reg_terms.is_empty() { None } else { Some(mean_var(binder.graph, &reg_terms)) };
        let l_ca_v = if ca_terms.is_empty() { None } else { Some(mean_var(binder.graph, &ca_terms)) };

        let mut total = l_ldm_v;
        if let Some(pr) = l_pr_v {
            let w = binder.graph.scale(pr, cz.lambda_pr);
            total = binder.graph.add(total, w);
        }
        if let Some(ca) = l_ca_v {
            let w = binder.graph.scale(ca, cz.lambda_ca);
            total = binder.graph.add(total, w);
        }

        let breakdown = LossBreakdown {
            l_ldm: binder.graph.scalar_value(l_ldm_v),
            l_pr: l_pr_v.map(|v| binder.graph.scalar_value(v)),
            l_ca: l_ca_v.map(|v| binder.graph.scalar_value(v)),
            lambda_pr: cz.lambda_pr,
            lambda_ca: cz.lambda_ca,
            total: binder.graph.scalar_value(total),
        };
        let log = StepLog {
            step,
            seed,
            branch_filtered,
            has_b_token: saw_b_token,
            image_indices: indices,
            losses: breakdown.clone(),
        };
        if !breakdown.total.is_finite() {
            on_step(&log);
            return Err(DecalError::Numeric(format!(
                "customization diverged at step {step}: {breakdown:?}"
            )));
        }

        let bound = binder.into_bound();
        let mut grads = g.backward(total);
        let named = collect_named_grads(&bound, &mut grads);
        opt.step(&mut model.store, &named)?;
        model.trained_steps += 1;
        on_step(&log);
    }

    model.rng_streams = vec![
        StreamState::capture("gamma", seed, &gamma_rng),
        StreamState::capture("batch", seed, &batch_rng),
        StreamState::capture("train-noise", seed, &noise_rng),
        StreamState::capture("reg-batch", seed, &reg_rng),
    ];
    Ok(model)
}

// ---------------------------------------------------------------------------
// freeze report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreezeReport {
    pub changed: Vec<String>,
    pub unchanged: Vec<String>,
    pub added: Vec<String>,
    pub removed: Vec<String>,
    pub expected_trainable: Vec<String>,
    /// parameters that changed without being in the trainable set
    pub violations: Vec<String>,
}

impl FreezeReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty() && self.removed.is_empty()
    }
}

/// Compare two parameter stores bit-exactly against an expected trainable set.
pub fn freeze_report(
    before: &ParamStore,
    after: &ParamStore,
    trainable: &BTreeSet<String>,
) -> FreezeReport {
    let mut changed = Vec::new();
    let mut unchanged = Vec::new();
    let mut added = Vec::new();
    let mut removed = Vec::new();
    let mut violations = Vec::new();
    let before_names: BTreeSet<String> = before.names().cloned().collect();
    let after_names: BTreeSet<String> = after.names().cloned().collect();
    for name in &before_names {
        if !after_names.contains(name) {
            removed.push(name.clone());
            continue;
        }
        let a = before.get(name).unwrap();
        let b = after.get(name).unwrap();
        let same = a.shape() == b.shape()
            && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
        if same {
            unchanged.push(name.clone());
        } else {
            changed.push(name.clone());
            if !trainable.contains(name) {
                violations.push(name.clone());
            }
        }
    }
    for name in &after_names {
        if !before_names.contains(name) {
            added.push(name.clone());
        }
    }
    FreezeReport {
        changed,
        unchanged,
        added,
        removed,
        expected_trainable: trainable.iter().cloned().collect(),
        violations,
    }
}

/// Slot positions helper re-exported for log assertions in tests.
pub fn prompt_positions(model: &Model, tokens: &[usize]) -> SlotPositions {
    crate::text::slot_positions(tokens, &model.vocab)
}
