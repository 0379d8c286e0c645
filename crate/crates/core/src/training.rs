//! Synthetic corpus generation, backbone pretraining, and targeted
//! projector training.
//!
//! The corpus crosses style families (palette direction x texture) with
//! content families (shape x position). Every pixel is the palette
//! direction scaled by a scalar intensity field, so channel
//! correlations identify the palette exactly — style embeddings are
//! bit-stable across content and texture-phase variation — while the
//! intensity layout carries the shape/position signal the subject
//! descriptor measures.

use serde::{Deserialize, Serialize};

use crate::conditioning::{
    DescriptorEmbedding, DescriptorKind, DescriptorProfiles, ImageDescriptor, ProjectorWeights,
    StyleDescriptor, TextEmbedder,
};
use crate::denoiser::{
    decode, denoise, encode, AggregationState, Backbone, ConditioningBundle, Decoder,
    DecoderWeights, DenoiserWeights, EncoderWeights, ModelDims, OrthoMode, StreamCond,
};
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::schedule::{add_noise, predict_x0, NoiseSchedule, X0Mode};
use crate::tensor::{adam_step_direct, randn, AdamState, Tape, Tensor};

pub const PALETTES: [(&str, [f64; 3]); 8] = [
    ("crimson", [1.0, 0.25, 0.3]),
    ("teal", [0.2, 1.0, 0.85]),
    ("amber", [1.0, 0.75, 0.2]),
    ("violet", [0.6, 0.25, 1.0]),
    ("jade", [0.25, 1.0, 0.4]),
    ("copper", [0.9, 0.55, 0.35]),
    ("azure", [0.25, 0.55, 1.0]),
    ("rose", [1.0, 0.45, 0.7]),
];

pub const TEXTURES: [&str; 2] = ["striped", "checkered"];
pub const SHAPES: [&str; 4] = ["square", "disc", "cross", "ring"];
pub const POSITIONS: [(&str, (f64, f64)); 4] = [
    ("upper left", (0.3, 0.3)),
    ("upper right", (0.3, 0.7)),
    ("lower left", (0.7, 0.3)),
    ("lower right", (0.7, 0.7)),
];

pub fn style_family_count() -> usize {
    PALETTES.len() * TEXTURES.len()
}

pub fn content_family_count() -> usize {
    SHAPES.len() * POSITIONS.len()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleParams {
    pub palette: usize,
    pub texture: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentParams {
    pub shape: usize,
    pub position: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub image: Tensor,
    pub style: StyleParams,
    pub content: ContentParams,
    pub caption: String,
}

/// Content-only prompt for a content family, matching the caption
/// vocabulary without style words.
pub fn content_prompt(content: ContentParams) -> String {
    let shape_name = SHAPES[content.shape];
    let (pos_name, _) = POSITIONS[content.position];
    format!("a {shape_name} at the {pos_name}")
}

/// Renders the palette-scaled intensity field for one (texture,
/// content) combination.
pub fn render_image(
    palette: [f64; 3],
    texture: usize,
    content: ContentParams,
    hw: usize,
    phase: f64,
) -> Tensor {
    let (pos_name, (cy, cx)) = POSITIONS[content.position];
    let _ = pos_name;
    let r = hw as f64 * 0.22;
    let (cy, cx) = (cy * hw as f64, cx * hw as f64);

    let mut intensity = vec![0.0f64; hw * hw];
    for y in 0..hw {
        for x in 0..hw {
            let (fy, fx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let inside = match content.shape {
                0 => fy.abs() <= r && fx.abs() <= r,
                1 => fy * fy + fx * fx <= r * r,
                2 => fy.abs() <= r * 0.4 || fx.abs() <= r * 0.4,
                _ => {
                    let d2 = fy * fy + fx * fx;
                    d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55)
                }
            };
            let base = if inside { 0.95 } else { 0.25 };
            let t = match texture {
                0 => (2.0 * std::f64::consts::PI * 2.0 * y as f64 / hw as f64 + phase).sin(),
                _ => {
                    ((2.0 * std::f64::consts::PI * 3.0 * (y as f64 + x as f64) / hw as f64)
                        + phase)
                        .sin()
                }
            };
            intensity[y * hw + x] = base * (0.8 + 0.2 * t);
        }
    }
    Tensor::from_fn(&[3, hw, hw], |i| {
        let c = i / (hw * hw);
        palette[c] * intensity[i % (hw * hw)]
    })
    .expect("synthetic image")
}

/// Renders one sample: shape mask over a background, texture-modulated
/// intensity, palette direction across channels.
pub fn render_sample(
    style: StyleParams,
    content: ContentParams,
    hw: usize,
    phase: f64,
) -> SyntheticSample {
    let (pal_name, pal) = PALETTES[style.palette];
    let tex_name = TEXTURES[style.texture];
    let shape_name = SHAPES[content.shape];
    let (pos_name, _) = POSITIONS[content.position];
    let image = render_image(pal, style.texture, content, hw, phase);
    let caption = format!("a {shape_name} at the {pos_name} in {pal_name} {tex_name}");
    SyntheticSample {
        image,
        style,
        content,
        caption,
    }
}

/// Neutral palette for benchmark subject references, deliberately not
/// one of the eight trained style palettes.
pub const REFERENCE_PALETTE: [f64; 3] = [0.85, 0.85, 0.85];

/// The synthetic subject x style evaluation suite: eight subjects in a
/// neutral palette, eight styles each carrying its own salient content
/// (so style references have subject matter that can leak), plus
/// content-only prompts.
pub struct BenchmarkRefs {
    pub subjects: Vec<Tensor>,
    pub styles: Vec<Tensor>,
    pub prompts: Vec<String>,
    pub subject_contents: Vec<ContentParams>,
}

pub fn benchmark_refs(hw: usize) -> BenchmarkRefs {
    let mut subjects = Vec::with_capacity(8);
    let mut prompts = Vec::with_capacity(8);
    let mut subject_contents = Vec::with_capacity(8);
    for c in 0..8 {
        let content = ContentParams {
            shape: c % SHAPES.len(),
            position: c / SHAPES.len(),
        };
        subjects.push(render_image(REFERENCE_PALETTE, 0, content, hw, 0.0));
        prompts.push(content_prompt(content));
        subject_contents.push(content);
    }
    let mut styles = Vec::with_capacity(8);
    for (j, (_, pal)) in PALETTES.iter().enumerate() {
        let content_idx = 8 + j; // disjoint from the subject contents
        let content = ContentParams {
            shape: content_idx % SHAPES.len(),
            position: content_idx / SHAPES.len(),
        };
        styles.push(render_image(*pal, j % TEXTURES.len(), content, hw, 0.0));
    }
    BenchmarkRefs {
        subjects,
        styles,
        prompts,
        subject_contents,
    }
}

/// Deterministic corpus crossing every style family with every content
/// family; per-sample randomness is limited to the texture phase.
pub fn gen_synthetic_dataset_sized(n: usize, seed: u64, hw: usize) -> Vec<SyntheticSample> {
    let mut rng = Prng::new(seed);
    let s_count = style_family_count();
    let c_count = content_family_count();
    (0..n)
        .map(|i| {
            let style = StyleParams {
                palette: (i % s_count) % PALETTES.len(),
                texture: (i % s_count) / PALETTES.len(),
            };
            let content_idx = (i / s_count) % c_count;
            let content = ContentParams {
                shape: content_idx % SHAPES.len(),
                position: content_idx / SHAPES.len(),
            };
            let phase = rng.next_f64() * 2.0 * std::f64::consts::PI;
            render_sample(style, content, hw, phase)
        })
        .collect()
}

pub fn gen_synthetic_dataset(n: usize, seed: u64) -> Vec<SyntheticSample> {
    gen_synthetic_dataset_sized(n, seed, 32)
}

// ── losses ───────────────────────────────────────────────────────────

/// Mean squared error on the predicted noise.
pub fn denoising_loss(tape: &Tape, eps_hat: &Tensor, eps: &Tensor) -> Result<Tensor> {
    tape.mse(eps_hat, eps)
}

/// Squared distance between descriptor embeddings of prediction and
/// ground truth.
pub fn descriptor_loss(
    tape: &Tape,
    y_hat: &Tensor,
    y: &Tensor,
    descriptor: &dyn ImageDescriptor,
) -> Result<Tensor> {
    let a = descriptor.embed_vec(tape, y_hat)?;
    let b = descriptor.embed_vec(tape, y)?;
    tape.sq_l2_distance(&a, &b)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainingHyper {
    pub gamma: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Inclusive timestep sampling range.
    pub t_min: usize,
    pub t_max: usize,
}

impl TrainingHyper {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::contract("gamma must be >= 0"));
        }
        if self.lr < 0.0 {
            return Err(Error::contract("lr must be >= 0 (0 runs without updates)"));
        }
        if self.batch == 0 {
            return Err(Error::contract("batch must be >= 1"));
        }
        if self.t_min == 0 || self.t_max > sched.steps() || self.t_min > self.t_max {
            return Err(Error::contract(format!(
                "timestep range [{}, {}] invalid for T = {}",
                self.t_min,
                self.t_max,
                sched.steps()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_denoising: f64,
    pub l_descriptor: f64,
    pub l_final: f64,
}

/// Loss history as CSV: step, denoising, descriptor, final.
pub fn history_to_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,l_denoising,l_descriptor,l_final\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.l_denoising, r.l_descriptor, r.l_final
        ));
    }
    s
}

// ── backbone pretraining ─────────────────────────────────────────────

/// Trains denoiser + decoder + encoder jointly on the denoising loss
/// (text conditioning only) plus an autoencoding reconstruction term
/// that anchors the decoder to the pixel space.
pub fn pretrain_toy_denoiser(
    dataset: &[SyntheticSample],
    hyper: &TrainingHyper,
    dims: ModelDims,
    sched: &NoiseSchedule,
    vocab_dim: usize,
    text_seed: u64,
) -> Result<(Backbone, Vec<LossRecord>)> {
    if dataset.is_empty() {
        return Err(Error::contract("pretraining needs a nonempty dataset"));
    }
    hyper.validate(sched)?;
    let expect = dims.image_shape();
    if dataset[0].image.shape() != expect {
        return Err(Error::contract(format!(
            "dataset images {:?} do not match model {:?}",
            dataset[0].image.shape(),
            expect
        )));
    }

    let mut denoiser = DenoiserWeights::init(dims, Prng::derive_seed(hyper.seed, 1));
    let mut decoder = DecoderWeights::init(dims.latent_c, Prng::derive_seed(hyper.seed, 2));
    let mut encoder = EncoderWeights::init(dims.latent_c, Prng::derive_seed(hyper.seed, 3));
    let embedder = TextEmbedder::new(vocab_dim, dims.d_cond, text_seed);
    let state = AggregationState::default();

    let mut params = denoiser.param_vec();
    params.push(decoder.w.clone());
    params.push(decoder.b.clone());
    params.push(encoder.w.clone());
    params.push(encoder.b.clone());
    let n_denoiser = params.len() - 4;
    let mut adam = AdamState::new(&params);
    let mut rng = Prng::new(Prng::derive_seed(hyper.seed, 4));
    let mut history = Vec::with_capacity(hyper.steps);

    for step in 0..hyper.steps {
        let tape = Tape::new();
        let leaves: Vec<Tensor> = params.iter().map(|p| tape.leaf(p)).collect();
        let mut live = denoiser.clone();
        live.set_params(&leaves[..n_denoiser])?;
        let dec = Decoder::Learned(DecoderWeights {
            w: leaves[n_denoiser].clone(),
            b: leaves[n_denoiser + 1].clone(),
        });
        let enc = EncoderWeights {
            w: leaves[n_denoiser + 2].clone(),
            b: leaves[n_denoiser + 3].clone(),
        };

        let mut den_terms = Vec::with_capacity(hyper.batch);
        let mut rec_terms = Vec::with_capacity(hyper.batch);
        for _ in 0..hyper.batch {
            let sample = &dataset[(rng.next_u64() % dataset.len() as u64) as usize];
            let t = hyper.t_min + (rng.next_u64() as usize) % (hyper.t_max - hyper.t_min + 1);
            let x0 = encode(&tape, &sample.image, &enc)?;
            let eps = randn(&dims.latent_shape(), &mut rng);
            let x_t = add_noise(&tape, &x0, &eps, t, sched)?;
            let bundle = ConditioningBundle {
                text: Some(embedder.embed(&sample.caption)?.embeddings),
                style: None,
                subject: None,
            };
            let eps_hat = denoise(&tape, &x_t, t, &bundle, &state, &live)?;
            den_terms.push(denoising_loss(&tape, &eps_hat, &eps)?);
            let rec = decode(&tape, &x0, &dec)?;
            rec_terms.push(tape.mse(&rec, &sample.image)?);
        }
        let den_refs: Vec<&Tensor> = den_terms.iter().collect();
        let rec_refs: Vec<&Tensor> = rec_terms.iter().collect();
        let den_mean = tape.mean(&tape.concat0(&den_refs)?)?;
        let rec_mean = tape.mean(&tape.concat0(&rec_refs)?)?;
        let total = tape.add(&den_mean, &rec_mean)?;
        let l = total.item()?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("pretraining diverged at step {step}")));
        }
        let grads = tape.backward(&total)?;
        let gs: Vec<Tensor> = leaves
            .iter()
            .map(|leaf| grads.get(leaf).cloned().expect("leaf gradient"))
            .collect();
        if hyper.lr > 0.0 {
            adam_step_direct(&mut params, &gs, &mut adam, hyper.lr)?;
        }
        history.push(LossRecord {
            step,
            l_denoising: den_mean.item()?,
            l_descriptor: rec_mean.item()?,
            l_final: l,
        });
    }

    denoiser.set_params(&params[..n_denoiser])?;
    decoder.w = params[n_denoiser].detached();
    decoder.b = params[n_denoiser + 1].detached();
    encoder.w = params[n_denoiser + 2].detached();
    encoder.b = params[n_denoiser + 3].detached();
    Ok((
        Backbone {
            denoiser,
            decoder,
            encoder,
            text_seed,
            vocab_dim,
        },
        history,
    ))
}

/// Mean held-out denoising loss under fixed evaluation noise.
pub fn heldout_denoising_loss(
    backbone: &Backbone,
    dataset: &[SyntheticSample],
    sched: &NoiseSchedule,
    eval_seed: u64,
) -> Result<f64> {
    let tape = Tape::disabled();
    let dims = &backbone.denoiser.dims;
    let embedder = TextEmbedder::new(backbone.vocab_dim, dims.d_cond, backbone.text_seed);
    let state = AggregationState::default();
    let mut total = 0.0;
    for (i, sample) in dataset.iter().enumerate() {
        let mut rng = Prng::new(Prng::derive_seed(eval_seed, i as u64));
        let t = 1 + (rng.next_u64() as usize) % sched.steps();
        let x0 = encode(&tape, &sample.image, &backbone.encoder)?;
        let eps = randn(&dims.latent_shape(), &mut rng);
        let x_t = add_noise(&tape, &x0, &eps, t, sched)?;
        let bundle = ConditioningBundle {
            text: Some(embedder.embed(&sample.caption)?.embeddings),
            style: None,
            subject: None,
        };
        let eps_hat = denoise(&tape, &x_t, t, &bundle, &state, &backbone.denoiser)?;
        total += denoising_loss(&tape, &eps_hat, &eps)?.item()?;
    }
    Ok(total / dataset.len() as f64)
}

// ── projector training ───────────────────────────────────────────────

fn projector_descriptor(
    kind: DescriptorKind,
    profiles: &DescriptorProfiles,
) -> (&dyn ImageDescriptor, usize) {
    match kind {
        DescriptorKind::Style => (&profiles.style, StyleDescriptor::out_dim(3)),
        DescriptorKind::Subject => (&profiles.subject, profiles.subject.out_dim),
    }
}

fn embed_reference(
    tape: &Tape,
    kind: DescriptorKind,
    profiles: &DescriptorProfiles,
    image: &Tensor,
) -> Result<DescriptorEmbedding> {
    match kind {
        DescriptorKind::Style => profiles.style.embed(tape, image),
        DescriptorKind::Subject => profiles.subject.embed(tape, image),
    }
}

pub struct ProjectorTrainConfig {
    pub n_tok: usize,
    pub hidden: usize,
    pub x0_mode: X0Mode,
    /// Stream weight used while training (the temporal schedule only
    /// applies at inference).
    pub stream_weight: f64,
}

impl Default for ProjectorTrainConfig {
    fn default() -> Self {
        ProjectorTrainConfig {
            n_tok: 4,
            hidden: 64,
            x0_mode: X0Mode::DdimStandard,
            stream_weight: 1.0,
        }
    }
}

/// Trains a style or object projector against a frozen backbone with
/// l_final = l_denoising + gamma * l_descriptor. The backbone is
/// borrowed immutably for the whole run, so freezing is enforced by
/// ownership; only projector parameters are updated.
pub fn train_projector(
    kind: DescriptorKind,
    dataset: &[SyntheticSample],
    backbone: &Backbone,
    profiles: &DescriptorProfiles,
    hyper: &TrainingHyper,
    sched: &NoiseSchedule,
    cfg: &ProjectorTrainConfig,
) -> Result<(ProjectorWeights, Vec<LossRecord>)> {
    if dataset.is_empty() {
        return Err(Error::contract("projector training needs a nonempty dataset"));
    }
    hyper.validate(sched)?;
    let dims = &backbone.denoiser.dims;
    let (descriptor, d_desc) = projector_descriptor(kind, profiles);
    let mut projector = ProjectorWeights::init(
        kind,
        d_desc,
        cfg.hidden,
        cfg.n_tok,
        dims.d_cond,
        dims.d_attn,
        dims.blocks,
        Prng::derive_seed(hyper.seed, 11),
    );
    let embedder = TextEmbedder::new(backbone.vocab_dim, dims.d_cond, backbone.text_seed);
    let mut state = AggregationState {
        ortho: OrthoMode::Reject,
        ..Default::default()
    };
    match kind {
        DescriptorKind::Style => state.mu_s = cfg.stream_weight,
        DescriptorKind::Subject => state.mu_c = cfg.stream_weight,
    }
    let decoder = Decoder::Learned(backbone.decoder.clone());

    let mut params = projector.param_vec();
    let mut adam = AdamState::new(&params);
    let mut rng = Prng::new(Prng::derive_seed(hyper.seed, 12));
    let mut history = Vec::with_capacity(hyper.steps);

    for step in 0..hyper.steps {
        let tape = Tape::new();
        let leaves: Vec<Tensor> = params.iter().map(|p| tape.leaf(p)).collect();
        let mut live = projector.clone();
        live.set_params(&leaves)?;

        let mut den_terms = Vec::with_capacity(hyper.batch);
        let mut desc_terms = Vec::with_capacity(hyper.batch);
        for _ in 0..hyper.batch {
            let sample = &dataset[(rng.next_u64() % dataset.len() as u64) as usize];
            let t = hyper.t_min + (rng.next_u64() as usize) % (hyper.t_max - hyper.t_min + 1);
            let x0 = encode(&tape, &sample.image, &backbone.encoder)?;
            let eps = randn(&dims.latent_shape(), &mut rng);
            let x_t = add_noise(&tape, &x0, &eps, t, sched)?;

            // Self-conditioning: descriptors of the ground-truth image.
            let emb = embed_reference(&tape, kind, profiles, &sample.image)?;
            let stream = StreamCond {
                tokens: crate::conditioning::project_condition_with(
                    &tape, &emb, kind, &leaves[0], &leaves[1], &leaves[2], &leaves[3],
                    cfg.n_tok, dims.d_cond,
                )?,
                kv: live.kv.clone(),
            };
            let bundle = match kind {
                DescriptorKind::Style => ConditioningBundle {
                    text: Some(embedder.embed(&sample.caption)?.embeddings),
                    style: Some(stream),
                    subject: None,
                },
                DescriptorKind::Subject => ConditioningBundle {
                    text: Some(embedder.embed(&sample.caption)?.embeddings),
                    style: None,
                    subject: Some(stream),
                },
            };
            let eps_hat = denoise(&tape, &x_t, t, &bundle, &state, &backbone.denoiser)?;
            den_terms.push(denoising_loss(&tape, &eps_hat, &eps)?);
            let x0_hat = predict_x0(&tape, &x_t, &eps_hat, t, sched, cfg.x0_mode)?;
            let y_hat = decode(&tape, &x0_hat, &decoder)?;
            desc_terms.push(descriptor_loss(&tape, &y_hat, &sample.image, descriptor)?);
        }
        let den_refs: Vec<&Tensor> = den_terms.iter().collect();
        let desc_refs: Vec<&Tensor> = desc_terms.iter().collect();
        let den_mean = tape.mean(&tape.concat0(&den_refs)?)?;
        let desc_mean = tape.mean(&tape.concat0(&desc_refs)?)?;
        let total = tape.add(&den_mean, &tape.scale(&desc_mean, hyper.gamma)?)?;
        let l = total.item()?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!(
                "projector training diverged at step {step}"
            )));
        }
        let grads = tape.backward(&total)?;
        let gs: Vec<Tensor> = leaves
            .iter()
            .map(|leaf| grads.get(leaf).cloned().expect("leaf gradient"))
            .collect();
        if hyper.lr > 0.0 {
            adam_step_direct(&mut params, &gs, &mut adam, hyper.lr)?;
        }
        history.push(LossRecord {
            step,
            l_denoising: den_mean.item()?,
            l_descriptor: desc_mean.item()?,
            l_final: l,
        });
    }

    projector.set_params(&params)?;
    // Drop stale tape references before handing the weights out.
    let cleaned: Vec<Tensor> = projector.param_vec().iter().map(|t| t.detached()).collect();
    projector.set_params(&cleaned)?;
    Ok((projector, history))
}

/// Mean held-out descriptor loss through the same predict/decode path
/// used in training, with per-sample noise and timestep fixed by the
/// evaluation seed.
#[allow(clippy::too_many_arguments)]
pub fn heldout_descriptor_loss(
    kind: DescriptorKind,
    projector: &ProjectorWeights,
    backbone: &Backbone,
    profiles: &DescriptorProfiles,
    dataset: &[SyntheticSample],
    sched: &NoiseSchedule,
    cfg: &ProjectorTrainConfig,
    eval_seed: u64,
) -> Result<f64> {
    let tape = Tape::disabled();
    let dims = &backbone.denoiser.dims;
    let (descriptor, _) = projector_descriptor(kind, profiles);
    let embedder = TextEmbedder::new(backbone.vocab_dim, dims.d_cond, backbone.text_seed);
    let mut state = AggregationState::default();
    match kind {
        DescriptorKind::Style => state.mu_s = cfg.stream_weight,
        DescriptorKind::Subject => state.mu_c = cfg.stream_weight,
    }
    let decoder = Decoder::Learned(backbone.decoder.clone());
    let mut total = 0.0;
    for (i, sample) in dataset.iter().enumerate() {
        let mut rng = Prng::new(Prng::derive_seed(eval_seed, i as u64));
        let t = 1 + (rng.next_u64() as usize) % sched.steps();
        let x0 = encode(&tape, &sample.image, &backbone.encoder)?;
        let eps = randn(&dims.latent_shape(), &mut rng);
        let x_t = add_noise(&tape, &x0, &eps, t, sched)?;
        let emb = embed_reference(&tape, kind, profiles, &sample.image)?;
        let stream = StreamCond {
            tokens: crate::conditioning::project_condition(&tape, &emb, projector)?,
            kv: projector.kv.clone(),
        };
        let bundle = match kind {
            DescriptorKind::Style => ConditioningBundle {
                text: Some(embedder.embed(&sample.caption)?.embeddings),
                style: Some(stream),
                subject: None,
            },
            DescriptorKind::Subject => ConditioningBundle {
                text: Some(embedder.embed(&sample.caption)?.embeddings),
                style: None,
                subject: Some(stream),
            },
        };
        let eps_hat = denoise(&tape, &x_t, t, &bundle, &state, &backbone.denoiser)?;
        let x0_hat = predict_x0(&tape, &x_t, &eps_hat, t, sched, cfg.x0_mode)?;
        let y_hat = decode(&tape, &x0_hat, &decoder)?;
        total += descriptor_loss(&tape, &y_hat, &sample.image, descriptor)?.item()?;
    }
    Ok(total / dataset.len() as f64)
}

/// Bitwise fingerprint of a weight set, used to check backbone
/// freezing.
pub fn weights_fingerprint(tensors: &[Tensor]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tensors {
        for v in t.data() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
    }
    h
}

pub fn backbone_fingerprint(b: &Backbone) -> u64 {
    let mut all = b.denoiser.param_vec();
    all.push(b.decoder.w.clone());
    all.push(b.decoder.b.clone());
    all.push(b.encoder.w.clone());
    all.push(b.encoder.b.clone());
    weights_fingerprint(&all)
}
