//! The toy cross-attention denoiser and its conditioning fusion.
//!
//! The latent is flattened to one token per spatial position, lifted to
//! the attention width, and run through B blocks of
//! {norm, per-stream cross-attention, subject-against-text
//! orthogonalization, weighted aggregation, MLP with residual}. Text
//! keys/values come from the denoiser's own weights; style and subject
//! keys/values come from the attached projector's per-site matrices.
//!
//! The aggregation weight for the style stream grows over the denoising
//! trajectory (see [`update_style_weight`]); the subject stream is
//! orthogonalized against the text stream per token so local subject
//! detail cannot distort the text-directed global structure.

use serde::{Deserialize, Serialize};

use crate::conditioning::KvPair;
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{Tape, Tensor};

pub const RMS_EPS: f64 = 1e-8;
const REJECT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrthoMode {
    /// Remove the component of the subject features parallel to text.
    #[default]
    Reject,
    /// Keep only the parallel component (ablation variant).
    Parallel,
    /// Plain weighted addition, no orthogonalization.
    Off,
}

/// Temporal aggregation state for one generation run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationState {
    pub mu_s: f64,
    pub mu_c: f64,
    pub zeta: f64,
    pub mu_cap: f64,
    pub mu_s0: f64,
    pub ortho: OrthoMode,
}

impl AggregationState {
    pub fn new(mu_s0: f64, mu_c: f64, zeta: f64, mu_cap: f64, ortho: OrthoMode) -> Self {
        AggregationState {
            mu_s: mu_s0,
            mu_c,
            zeta,
            mu_cap,
            mu_s0,
            ortho,
        }
    }
}

impl Default for AggregationState {
    fn default() -> Self {
        AggregationState::new(0.6, 1.0, 0.4, 1.5, OrthoMode::Reject)
    }
}

/// Grows the style weight by zeta * L_s * (1 - L_nc), capped at mu_cap.
/// Non-decreasing whenever zeta >= 0 and L_nc <= 1; the leakage
/// component can exceed 1 on unit-norm embeddings (squared distances
/// reach 4), so the weight is also floored at mu_s0 to keep the state
/// within its declared range.
pub fn update_style_weight(state: &mut AggregationState, l_s: f64, l_nc: f64) {
    state.mu_s = (state.mu_s + state.zeta * l_s * (1.0 - l_nc))
        .min(state.mu_cap)
        .max(state.mu_s0.min(state.mu_cap));
}

/// Per-stream features produced by one block's conditioning fusion.
#[derive(Clone, Debug)]
pub struct AttentionFeatures {
    pub f_text: Tensor,
    pub f_style: Option<Tensor>,
    pub f_sub: Option<Tensor>,
    pub f_sub_hat: Option<Tensor>,
    pub f_agg: Tensor,
}

// ── weights ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub latent_c: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub d_attn: usize,
    pub d_cond: usize,
    pub blocks: usize,
    pub hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            latent_c: 4,
            latent_h: 16,
            latent_w: 16,
            d_attn: 32,
            d_cond: 32,
            blocks: 4,
            hidden: 64,
        }
    }
}

impl ModelDims {
    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_c, self.latent_h, self.latent_w]
    }

    pub fn n_query_tokens(&self) -> usize {
        self.latent_h * self.latent_w
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [3, 2 * self.latent_h, 2 * self.latent_w]
    }
}

/// Query/output matrices for one conditioning stream in one block. Text
/// additionally owns its key/value matrices; the image streams get
/// theirs from the attached projector.
#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub text_wq: Tensor,
    pub text_wk: Tensor,
    pub text_wv: Tensor,
    pub text_wo: Tensor,
    pub style_wq: Tensor,
    pub style_wo: Tensor,
    pub sub_wq: Tensor,
    pub sub_wo: Tensor,
    pub g1: Tensor,
    pub g2: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

#[derive(Clone, Debug)]
pub struct DenoiserWeights {
    pub dims: ModelDims,
    pub w_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub blocks: Vec<BlockWeights>,
}

impl DenoiserWeights {
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = Prng::new(seed);
        let g = |rng: &mut Prng, rows: usize, cols: usize| {
            let scale = 1.0 / (rows as f64).sqrt();
            Tensor::from_fn(&[rows, cols], |_| rng.gaussian() * scale).expect("weight init")
        };
        let d = dims.d_attn;
        let dc = dims.d_cond;
        let blocks = (0..dims.blocks)
            .map(|_| BlockWeights {
                text_wq: g(&mut rng, d, d),
                text_wk: g(&mut rng, dc, d),
                text_wv: g(&mut rng, dc, d),
                text_wo: g(&mut rng, d, d),
                style_wq: g(&mut rng, d, d),
                style_wo: g(&mut rng, d, d),
                sub_wq: g(&mut rng, d, d),
                sub_wo: g(&mut rng, d, d),
                g1: Tensor::full(&[d], 1.0).expect("gain"),
                g2: Tensor::full(&[d], 1.0).expect("gain"),
                mlp_w1: g(&mut rng, d, dims.hidden),
                mlp_b1: Tensor::zeros(&[dims.hidden]),
                mlp_w2: g(&mut rng, dims.hidden, d),
                mlp_b2: Tensor::zeros(&[d]),
            })
            .collect();
        DenoiserWeights {
            dims,
            w_in: g(&mut rng, dims.latent_c, d),
            w_out: g(&mut rng, d, dims.latent_c),
            b_out: Tensor::zeros(&[dims.latent_c]),
            blocks,
        }
    }

    /// Flat parameter list in a fixed order (matches `set_params`).
    pub fn param_vec(&self) -> Vec<Tensor> {
        let mut v = vec![self.w_in.clone(), self.w_out.clone(), self.b_out.clone()];
        for b in &self.blocks {
            v.extend(
                [
                    &b.text_wq, &b.text_wk, &b.text_wv, &b.text_wo, &b.style_wq, &b.style_wo,
                    &b.sub_wq, &b.sub_wo, &b.g1, &b.g2, &b.mlp_w1, &b.mlp_b1, &b.mlp_w2, &b.mlp_b2,
                ]
                .into_iter()
                .cloned(),
            );
        }
        v
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        let expected = 3 + 14 * self.blocks.len();
        if params.len() != expected {
            return Err(Error::contract(format!(
                "denoiser expects {expected} params, got {}",
                params.len()
            )));
        }
        self.w_in = params[0].clone();
        self.w_out = params[1].clone();
        self.b_out = params[2].clone();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = &params[3 + 14 * i..3 + 14 * (i + 1)];
            b.text_wq = p[0].clone();
            b.text_wk = p[1].clone();
            b.text_wv = p[2].clone();
            b.text_wo = p[3].clone();
            b.style_wq = p[4].clone();
            b.style_wo = p[5].clone();
            b.sub_wq = p[6].clone();
            b.sub_wo = p[7].clone();
            b.g1 = p[8].clone();
            b.g2 = p[9].clone();
            b.mlp_w1 = p[10].clone();
            b.mlp_b1 = p[11].clone();
            b.mlp_w2 = p[12].clone();
            b.mlp_b2 = p[13].clone();
        }
        Ok(())
    }
}

/// Pseudo-token sequence plus per-site key/value matrices for one image
/// conditioning stream.
#[derive(Clone, Debug)]
pub struct StreamCond {
    pub tokens: Tensor,
    pub kv: Vec<KvPair>,
}

/// The three conditioning streams fed to the denoiser.
#[derive(Clone, Debug, Default)]
pub struct ConditioningBundle {
    pub text: Option<Tensor>,
    pub style: Option<StreamCond>,
    pub subject: Option<StreamCond>,
}

// ── operations ───────────────────────────────────────────────────────

/// Scaled dot-product cross-attention for one stream.
pub fn cross_attention(
    tape: &Tape,
    queries: &Tensor,
    kv: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
) -> Result<Tensor> {
    let q = tape.matmul(queries, wq)?;
    let k = tape.matmul(kv, wk)?;
    let v = tape.matmul(kv, wv)?;
    let d = q.shape()[1] as f64;
    let scores = tape.scale(&tape.matmul(&q, &tape.transpose(&k)?)?, 1.0 / d.sqrt())?;
    let attn = tape.softmax(&scores, 1)?;
    let mixed = tape.matmul(&attn, &v)?;
    tape.matmul(&mixed, wo)
}

/// Per-token vector rejection of the subject features against text:
/// f_sub - (<f_sub,f_text> / max(<f_text,f_text>, eps)) * f_text.
/// A zero text row passes the subject row through unchanged.
pub fn orthogonal_reject(tape: &Tape, f_sub: &Tensor, f_text: &Tensor) -> Result<Tensor> {
    let proj = parallel_component(tape, f_sub, f_text)?;
    tape.sub(f_sub, &proj)
}

/// The complementary parallel projection, kept for ablation runs.
pub fn parallel_component(tape: &Tape, f_sub: &Tensor, f_text: &Tensor) -> Result<Tensor> {
    if f_sub.shape() != f_text.shape() {
        return Err(Error::shape(format!(
            "orthogonalization: {:?} vs {:?}",
            f_sub.shape(),
            f_text.shape()
        )));
    }
    let num = tape.row_dot(f_sub, f_text)?;
    let den = tape.clamp_min(&tape.row_dot(f_text, f_text)?, REJECT_EPS)?;
    let coef = tape.div(&num, &den)?;
    tape.mul_col_bcast(f_text, &coef)
}

/// f_agg = f_text + mu_s * f_style + mu_c * f_sub_hat, with absent
/// streams contributing nothing.
pub fn aggregate_ota(
    tape: &Tape,
    f_text: &Tensor,
    f_style: Option<&Tensor>,
    f_sub_hat: Option<&Tensor>,
    state: &AggregationState,
) -> Result<Tensor> {
    let mut agg = f_text.clone();
    if let Some(fs) = f_style {
        agg = tape.add(&agg, &tape.scale(fs, state.mu_s)?)?;
    }
    if let Some(fc) = f_sub_hat {
        agg = tape.add(&agg, &tape.scale(fc, state.mu_c)?)?;
    }
    Ok(agg)
}

/// One block's conditioning fusion, exposed for invariant tests.
pub fn fuse_streams(
    tape: &Tape,
    f_text: &Tensor,
    f_style: Option<Tensor>,
    f_sub: Option<Tensor>,
    state: &AggregationState,
) -> Result<AttentionFeatures> {
    let f_sub_hat = match (&f_sub, state.ortho) {
        (Some(fs), OrthoMode::Reject) => Some(orthogonal_reject(tape, fs, f_text)?),
        (Some(fs), OrthoMode::Parallel) => Some(parallel_component(tape, fs, f_text)?),
        (Some(fs), OrthoMode::Off) => Some(fs.clone()),
        (None, _) => None,
    };
    let f_agg = aggregate_ota(tape, f_text, f_style.as_ref(), f_sub_hat.as_ref(), state)?;
    Ok(AttentionFeatures {
        f_text: f_text.clone(),
        f_style,
        f_sub,
        f_sub_hat,
        f_agg,
    })
}

/// Interleaved sinusoidal embedding of the integer timestep.
pub fn time_embedding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; d];
    let half = d / 2;
    for k in 0..half {
        let freq = 10000f64.powf(-(k as f64) / half.max(1) as f64);
        data[2 * k] = (t as f64 * freq).sin();
        data[2 * k + 1] = (t as f64 * freq).cos();
    }
    Tensor::new(vec![d], data).expect("time embedding")
}

/// Full denoiser forward pass: predicts the noise for `x_t` under the
/// given conditioning. Differentiable end to end when run on a
/// recording tape.
pub fn denoise(
    tape: &Tape,
    x_t: &Tensor,
    t: usize,
    bundle: &ConditioningBundle,
    state: &AggregationState,
    weights: &DenoiserWeights,
) -> Result<Tensor> {
    let dims = &weights.dims;
    if x_t.shape() != dims.latent_shape() {
        return Err(Error::shape(format!(
            "denoise: latent {:?} does not match model {:?}",
            x_t.shape(),
            dims.latent_shape()
        )));
    }
    let (c, n_q) = (dims.latent_c, dims.n_query_tokens());

    let flat = tape.reshape(x_t, &[c, n_q])?;
    let mut tokens = tape.matmul(&tape.transpose(&flat)?, &weights.w_in)?;
    tokens = tape.add_row_bcast(&tokens, &time_embedding(t, dims.d_attn))?;

    for (bi, block) in weights.blocks.iter().enumerate() {
        let h = tape.rms_norm(&tokens, &block.g1, RMS_EPS)?;
        let f_text = match &bundle.text {
            Some(text_kv) => cross_attention(
                tape,
                &h,
                text_kv,
                &block.text_wq,
                &block.text_wk,
                &block.text_wv,
                &block.text_wo,
            )?,
            None => Tensor::zeros(&[n_q, dims.d_attn]),
        };
        let f_style = match &bundle.style {
            Some(s) => Some(cross_attention(
                tape,
                &h,
                &s.tokens,
                &block.style_wq,
                &s.kv[bi].wk,
                &s.kv[bi].wv,
                &block.style_wo,
            )?),
            None => None,
        };
        let f_sub = match &bundle.subject {
            Some(s) => Some(cross_attention(
                tape,
                &h,
                &s.tokens,
                &block.sub_wq,
                &s.kv[bi].wk,
                &s.kv[bi].wv,
                &block.sub_wo,
            )?),
            None => None,
        };
        let fused = fuse_streams(tape, &f_text, f_style, f_sub, state)?;
        tokens = tape.add(&tokens, &fused.f_agg)?;

        let h2 = tape.rms_norm(&tokens, &block.g2, RMS_EPS)?;
        let m = tape.linear(&h2, &block.mlp_w1, &block.mlp_b1)?;
        let m = tape.tanh(&m)?;
        let m = tape.linear(&m, &block.mlp_w2, &block.mlp_b2)?;
        tokens = tape.add(&tokens, &m)?;
    }

    let out = tape.add_row_bcast(&tape.matmul(&tokens, &weights.w_out)?, &weights.b_out)?;
    let back = tape.transpose(&out)?;
    tape.reshape(&back, &dims.latent_shape())
}

// ── decoder / encoder ────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct DecoderWeights {
    pub w: Tensor,
    pub b: Tensor,
}

impl DecoderWeights {
    pub fn init(latent_c: usize, seed: u64) -> Self {
        let mut rng = Prng::new(seed);
        DecoderWeights {
            w: Tensor::from_fn(&[latent_c, 3], |_| rng.gaussian() / (latent_c as f64).sqrt())
                .expect("decoder init"),
            b: Tensor::zeros(&[3]),
        }
    }
}

/// The toy image decoder. `Learned` maps latent channels to RGB,
/// upsamples 2x nearest, and squashes into [0,1]; `IdentityCrop`
/// returns the first three latent channels untouched (a linear profile
/// for controller unit tests).
#[derive(Clone, Debug)]
pub enum Decoder {
    Learned(DecoderWeights),
    IdentityCrop,
}

pub fn decode(tape: &Tape, x0: &Tensor, decoder: &Decoder) -> Result<Tensor> {
    if x0.rank() != 3 {
        return Err(Error::shape(format!(
            "decode expects [C,H,W], got {:?}",
            x0.shape()
        )));
    }
    let (c, h, w) = (x0.shape()[0], x0.shape()[1], x0.shape()[2]);
    match decoder {
        Decoder::IdentityCrop => {
            if c < 3 {
                return Err(Error::shape(format!("identity decode needs >=3 channels, got {c}")));
            }
            let chans: Vec<Tensor> = (0..3)
                .map(|ci| tape.select_channel(x0, ci))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = chans.iter().collect();
            let stacked = tape.concat0(&refs)?;
            tape.reshape(&stacked, &[3, h, w])
        }
        Decoder::Learned(dw) => {
            if dw.w.shape()[0] != c {
                return Err(Error::shape(format!(
                    "decoder expects {} channels, got {c}",
                    dw.w.shape()[0]
                )));
            }
            let flat = tape.reshape(x0, &[c, h * w])?;
            let rgb = tape.linear(&tape.transpose(&flat)?, &dw.w, &dw.b)?;
            let img = tape.reshape(&tape.transpose(&rgb)?, &[3, h, w])?;
            let up = tape.upsample2(&img)?;
            tape.sigmoid(&up)
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderWeights {
    pub w: Tensor,
    pub b: Tensor,
}

impl EncoderWeights {
    pub fn init(latent_c: usize, seed: u64) -> Self {
        let mut rng = Prng::new(seed);
        EncoderWeights {
            w: Tensor::from_fn(&[3, latent_c], |_| rng.gaussian() / 3f64.sqrt())
                .expect("encoder init"),
            b: Tensor::zeros(&[latent_c]),
        }
    }
}

/// Inverse-direction head pairing the decoder: 2x average pool, center
/// pixels to [-1,1], linear channel map into the latent space.
pub fn encode(tape: &Tape, image: &Tensor, enc: &EncoderWeights) -> Result<Tensor> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape(format!(
            "encode expects [3,H,W], got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract("encode needs even image dims"));
    }
    let mut pooled = Vec::with_capacity(3);
    for c in 0..3 {
        let ch = tape.select_channel(image, c)?;
        let p = tape.avg_pool2(&ch, 2)?;
        pooled.push(tape.reshape(&p, &[1, (h / 2) * (w / 2)])?);
    }
    let refs: Vec<&Tensor> = pooled.iter().collect();
    let stacked = tape.concat0(&refs)?; // [3, hw/4]
    let centered = tape.scale(&tape.add_const(&stacked, -0.5)?, 2.0)?;
    let latent_c = enc.w.shape()[1];
    let tokens = tape.linear(&tape.transpose(&centered)?, &enc.w, &enc.b)?;
    tape.reshape(&tape.transpose(&tokens)?, &[latent_c, h / 2, w / 2])
}

/// The full trained model artifact: denoiser, decoder, encoder, and the
/// identity of the frozen text table it was trained with.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub denoiser: DenoiserWeights,
    pub decoder: DecoderWeights,
    pub encoder: EncoderWeights,
    pub text_seed: u64,
    pub vocab_dim: usize,
}
