//! Conditioning streams: text embeddings, style/subject descriptor
//! embeddings, and the projection networks that map descriptor
//! embeddings to cross-attention pseudo-tokens.
//!
//! The two descriptors are built to measure disjoint factors. The style
//! descriptor is the patch-averaged channel Gram matrix — a global
//! statistic, exactly invariant to any spatial permutation of patches.
//! The subject descriptor pools mean-centered channels per patch and
//! keeps raster order — a layout signal, invariant to constant
//! per-channel shifts. Both are differentiable through the tape and
//! L2-normalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorKind {
    Style,
    Subject,
}

/// Unit-norm embedding of one factor of an image.
#[derive(Clone, Debug)]
pub struct DescriptorEmbedding {
    pub vector: Tensor,
    pub kind: DescriptorKind,
}

impl DescriptorEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.numel()
    }
}

/// Reference subject and style images, pixels in [0,1].
#[derive(Clone, Debug)]
pub struct ReferencePair {
    pub r_sub: Tensor,
    pub r_sty: Tensor,
}

impl ReferencePair {
    pub fn new(r_sub: Tensor, r_sty: Tensor) -> Result<Self> {
        for (name, img) in [("subject", &r_sub), ("style", &r_sty)] {
            if img.rank() != 3 || img.shape()[0] != 3 {
                return Err(Error::contract(format!(
                    "{name} reference must be [3,H,W], got {:?}",
                    img.shape()
                )));
            }
            if img.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::contract(format!(
                    "{name} reference has pixels outside [0,1]"
                )));
            }
        }
        Ok(ReferencePair { r_sub, r_sty })
    }
}

// ── text ─────────────────────────────────────────────────────────────

/// Token embeddings for a prompt, one row per whitespace token.
#[derive(Clone, Debug)]
pub struct TextStream {
    pub embeddings: Tensor,
    pub prompt: String,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Frozen token-embedding table, rows drawn N(0, 1/d_cond) from the
/// crate PRNG seeded directly by `seed`.
#[derive(Clone, Debug)]
pub struct TextEmbedder {
    table: Vec<f64>,
    pub vocab_dim: usize,
    pub d_cond: usize,
    pub seed: u64,
}

impl TextEmbedder {
    pub fn new(vocab_dim: usize, d_cond: usize, seed: u64) -> Self {
        let mut rng = Prng::new(seed);
        let scale = 1.0 / (d_cond as f64).sqrt();
        let table = (0..vocab_dim * d_cond)
            .map(|_| rng.gaussian() * scale)
            .collect();
        TextEmbedder {
            table,
            vocab_dim,
            d_cond,
            seed,
        }
    }

    pub fn token_row(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.vocab_dim as u64) as usize
    }

    pub fn embed(&self, prompt: &str) -> Result<TextStream> {
        let tokens: Vec<&str> = prompt.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::contract("empty prompt"));
        }
        let mut data = Vec::with_capacity(tokens.len() * self.d_cond);
        for tok in &tokens {
            let row = self.token_row(tok);
            data.extend_from_slice(&self.table[row * self.d_cond..(row + 1) * self.d_cond]);
        }
        Ok(TextStream {
            embeddings: Tensor::new(vec![tokens.len(), self.d_cond], data)?,
            prompt: prompt.to_string(),
        })
    }
}

/// One-shot text embedding with a freshly generated table.
pub fn embed_text(prompt: &str, vocab_dim: usize, d_cond: usize, seed: u64) -> Result<TextStream> {
    TextEmbedder::new(vocab_dim, d_cond, seed).embed(prompt)
}

// ── descriptors ──────────────────────────────────────────────────────

/// Patch-averaged channel Gram statistics (upper triangle, normalized).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StyleDescriptor {
    pub patch: usize,
}

impl StyleDescriptor {
    pub fn out_dim(channels: usize) -> usize {
        channels * (channels + 1) / 2
    }

    pub fn embed(&self, tape: &Tape, image: &Tensor) -> Result<DescriptorEmbedding> {
        let (c, h, w) = check_image(image, self.patch)?;
        let mut entries = Vec::with_capacity(Self::out_dim(c));
        for ci in 0..c {
            let chi = tape.select_channel(image, ci)?;
            for cj in ci..c {
                let chj = tape.select_channel(image, cj)?;
                let prod = tape.mul(&chi, &chj)?;
                // Per-patch correlation, then the average over patches.
                let per_patch = tape.avg_pool2(&prod, self.patch)?;
                entries.push(tape.mean(&per_patch)?);
            }
        }
        let refs: Vec<&Tensor> = entries.iter().collect();
        let flat = tape.concat0(&refs)?;
        let vector = tape.l2_normalize(&flat)?;
        let _ = (h, w);
        Ok(DescriptorEmbedding {
            vector,
            kind: DescriptorKind::Style,
        })
    }
}

/// Layout statistics: mean-centered channels pooled per patch, raster
/// order preserved, lifted through a frozen affine map.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SubjectDescriptor {
    pub patch: usize,
    pub out_dim: usize,
    pub seed: u64,
}

impl SubjectDescriptor {
    /// Frozen projection for a given pooled-feature dimension. Entries
    /// are N(0, 1/in_dim) from a seed derived off the profile seed and
    /// the dimensions, so the map is a pure function of (seed, dims).
    pub fn frozen_map(&self, in_dim: usize) -> Tensor {
        let derived = Prng::derive_seed(self.seed, (in_dim as u64) << 16 | self.out_dim as u64);
        let mut rng = Prng::new(derived);
        let scale = 1.0 / (in_dim as f64).sqrt();
        Tensor::from_fn(&[in_dim, self.out_dim], |_| rng.gaussian() * scale)
            .expect("frozen map construction")
    }

    pub fn embed(&self, tape: &Tape, image: &Tensor) -> Result<DescriptorEmbedding> {
        let (c, h, w) = check_image(image, self.patch)?;
        let q = (h / self.patch) * (w / self.patch);
        let mut pooled = Vec::with_capacity(c);
        for ci in 0..c {
            let ch = tape.select_channel(image, ci)?;
            let m = tape.mean(&ch)?;
            let centered = tape.sub_bcast_scalar(&ch, &m)?;
            let p = tape.avg_pool2(&centered, self.patch)?;
            pooled.push(tape.reshape(&p, &[1, q])?);
        }
        let refs: Vec<&Tensor> = pooled.iter().collect();
        let by_channel = tape.concat0(&refs)?; // [c, q]
        // Patch-major layout: features for patch 0, then patch 1, ...
        let by_patch = tape.transpose(&by_channel)?;
        let flat = tape.reshape(&by_patch, &[1, c * q])?;
        let lifted = tape.matmul(&flat, &self.frozen_map(c * q))?;
        let vec = tape.reshape(&lifted, &[self.out_dim])?;
        let vector = tape.l2_normalize(&vec)?;
        Ok(DescriptorEmbedding {
            vector,
            kind: DescriptorKind::Subject,
        })
    }
}

/// Anything that turns an image into a unit-norm embedding on a tape.
pub trait ImageDescriptor {
    fn embed_vec(&self, tape: &Tape, image: &Tensor) -> Result<Tensor>;
}

impl ImageDescriptor for StyleDescriptor {
    fn embed_vec(&self, tape: &Tape, image: &Tensor) -> Result<Tensor> {
        Ok(self.embed(tape, image)?.vector)
    }
}

impl ImageDescriptor for SubjectDescriptor {
    fn embed_vec(&self, tape: &Tape, image: &Tensor) -> Result<Tensor> {
        Ok(self.embed(tape, image)?.vector)
    }
}

fn check_image(image: &Tensor, patch: usize) -> Result<(usize, usize, usize)> {
    if image.rank() != 3 {
        return Err(Error::shape(format!(
            "descriptor input must be [C,H,W], got {:?}",
            image.shape()
        )));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::contract(format!(
            "image {h}x{w} not divisible by patch size {patch}"
        )));
    }
    Ok((c, h, w))
}

/// A named descriptor pair. "gram"/"layout" are the defaults; "face" is
/// a second registered subject profile with its own frozen map, for
/// runs that personalize on facial identity instead of object layout.
#[derive(Clone, Debug)]
pub struct DescriptorProfiles {
    pub style: StyleDescriptor,
    pub subject: SubjectDescriptor,
}

pub fn style_profile(name: &str) -> Result<StyleDescriptor> {
    match name {
        "gram" => Ok(StyleDescriptor { patch: 4 }),
        other => Err(Error::Config(format!("unknown style profile '{other}'"))),
    }
}

pub fn subject_profile(name: &str) -> Result<SubjectDescriptor> {
    match name {
        "layout" => Ok(SubjectDescriptor {
            patch: 4,
            out_dim: 32,
            seed: 1001,
        }),
        "face" => Ok(SubjectDescriptor {
            patch: 2,
            out_dim: 32,
            seed: 2002,
        }),
        other => Err(Error::Config(format!("unknown subject profile '{other}'"))),
    }
}

// ── projectors ───────────────────────────────────────────────────────

/// Per-attention-site key/value projections owned by a projector.
#[derive(Clone, Debug)]
pub struct KvPair {
    pub wk: Tensor,
    pub wv: Tensor,
}

/// Trainable projection network: descriptor embedding to `n_tok`
/// pseudo-tokens, plus key/value matrices for every attention site.
/// The final token layer starts at zero so an untrained projector
/// contributes nothing.
#[derive(Clone, Debug)]
pub struct ProjectorWeights {
    pub kind: DescriptorKind,
    pub d_desc: usize,
    pub hidden: usize,
    pub n_tok: usize,
    pub d_cond: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub kv: Vec<KvPair>,
}

impl ProjectorWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        kind: DescriptorKind,
        d_desc: usize,
        hidden: usize,
        n_tok: usize,
        d_cond: usize,
        d_attn: usize,
        sites: usize,
        seed: u64,
    ) -> Self {
        let mut rng = Prng::new(seed);
        let w1 = Tensor::from_fn(&[d_desc, hidden], |_| {
            rng.gaussian() / (d_desc as f64).sqrt()
        })
        .expect("w1");
        let b1 = Tensor::zeros(&[hidden]);
        let w2 = Tensor::zeros(&[hidden, n_tok * d_cond]);
        let b2 = Tensor::zeros(&[n_tok * d_cond]);
        let kv = (0..sites)
            .map(|_| KvPair {
                wk: Tensor::from_fn(&[d_cond, d_attn], |_| {
                    rng.gaussian() / (d_cond as f64).sqrt()
                })
                .expect("wk"),
                wv: Tensor::from_fn(&[d_cond, d_attn], |_| {
                    rng.gaussian() / (d_cond as f64).sqrt()
                })
                .expect("wv"),
            })
            .collect();
        ProjectorWeights {
            kind,
            d_desc,
            hidden,
            n_tok,
            d_cond,
            w1,
            b1,
            w2,
            b2,
            kv,
        }
    }

    /// Flat parameter list in a fixed order, for optimizers and
    /// serialization.
    pub fn param_vec(&self) -> Vec<Tensor> {
        let mut v = vec![
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
        ];
        for pair in &self.kv {
            v.push(pair.wk.clone());
            v.push(pair.wv.clone());
        }
        v
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != 4 + 2 * self.kv.len() {
            return Err(Error::contract(format!(
                "projector expects {} params, got {}",
                4 + 2 * self.kv.len(),
                params.len()
            )));
        }
        self.w1 = params[0].clone();
        self.b1 = params[1].clone();
        self.w2 = params[2].clone();
        self.b2 = params[3].clone();
        for (i, pair) in self.kv.iter_mut().enumerate() {
            pair.wk = params[4 + 2 * i].clone();
            pair.wv = params[5 + 2 * i].clone();
        }
        Ok(())
    }
}

/// Maps a descriptor embedding to the projector's pseudo-token block.
/// The projector parameters are taken as explicit tensors so training
/// can pass tape leaves; [`project_condition`] is the weights-struct
/// convenience wrapper.
#[allow(clippy::too_many_arguments)]
pub fn project_condition_with(
    tape: &Tape,
    embedding: &DescriptorEmbedding,
    kind: DescriptorKind,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
    n_tok: usize,
    d_cond: usize,
) -> Result<Tensor> {
    if embedding.kind != kind {
        return Err(Error::contract(format!(
            "projector kind {:?} fed a {:?} embedding",
            kind, embedding.kind
        )));
    }
    let x = tape.reshape(&embedding.vector, &[1, embedding.dim()])?;
    let h = tape.linear(&x, w1, b1)?;
    let h = tape.tanh(&h)?;
    let out = tape.linear(&h, w2, b2)?;
    tape.reshape(&out, &[n_tok, d_cond])
}

pub fn project_condition(
    tape: &Tape,
    embedding: &DescriptorEmbedding,
    weights: &ProjectorWeights,
) -> Result<Tensor> {
    project_condition_with(
        tape,
        embedding,
        weights.kind,
        &weights.w1,
        &weights.b1,
        &weights.w2,
        &weights.b2,
        weights.n_tok,
        weights.d_cond,
    )
}
