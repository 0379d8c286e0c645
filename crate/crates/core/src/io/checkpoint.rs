//! Weight checkpoints: a directory holding meta.json plus one tensor
//! blob per parameter, named by role. Round-trips are bit-exact because
//! the blobs are.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::{DescriptorKind, KvPair, ProjectorWeights};
use crate::denoiser::{Backbone, DecoderWeights, DenoiserWeights, EncoderWeights, ModelDims};
use crate::error::{Error, Result};
use crate::io::blob::{load_blob, save_blob};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct BackboneMeta {
    kind: String,
    dims: ModelDims,
    text_seed: u64,
    vocab_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct ProjectorMeta {
    kind: String,
    descriptor: DescriptorKind,
    d_desc: usize,
    hidden: usize,
    n_tok: usize,
    d_cond: usize,
    sites: usize,
}

fn block_names(i: usize) -> [String; 14] {
    [
        format!("block{i}.text_wq"),
        format!("block{i}.text_wk"),
        format!("block{i}.text_wv"),
        format!("block{i}.text_wo"),
        format!("block{i}.style_wq"),
        format!("block{i}.style_wo"),
        format!("block{i}.sub_wq"),
        format!("block{i}.sub_wo"),
        format!("block{i}.g1"),
        format!("block{i}.g2"),
        format!("block{i}.mlp_w1"),
        format!("block{i}.mlp_b1"),
        format!("block{i}.mlp_w2"),
        format!("block{i}.mlp_b2"),
    ]
}

fn write_meta<T: Serialize>(dir: &Path, meta: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Config(format!("meta serialization: {e}")))?;
    std::fs::write(dir.join("meta.json"), json)?;
    Ok(())
}

fn read_meta<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<T> {
    let path = dir.join("meta.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn tensor_path(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(format!("{name}.sbzt"))
}

fn load_named(dir: &Path, name: &str) -> Result<Tensor> {
    load_blob(&tensor_path(dir, name))
}

pub fn save_backbone(b: &Backbone, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_meta(
        dir,
        &BackboneMeta {
            kind: "backbone".into(),
            dims: b.denoiser.dims,
            text_seed: b.text_seed,
            vocab_dim: b.vocab_dim,
        },
    )?;
    save_blob(&b.denoiser.w_in, &tensor_path(dir, "w_in"))?;
    save_blob(&b.denoiser.w_out, &tensor_path(dir, "w_out"))?;
    save_blob(&b.denoiser.b_out, &tensor_path(dir, "b_out"))?;
    for (i, blk) in b.denoiser.blocks.iter().enumerate() {
        let names = block_names(i);
        let tensors = [
            &blk.text_wq, &blk.text_wk, &blk.text_wv, &blk.text_wo, &blk.style_wq, &blk.style_wo,
            &blk.sub_wq, &blk.sub_wo, &blk.g1, &blk.g2, &blk.mlp_w1, &blk.mlp_b1, &blk.mlp_w2,
            &blk.mlp_b2,
        ];
        for (name, t) in names.iter().zip(tensors) {
            save_blob(t, &tensor_path(dir, name))?;
        }
    }
    save_blob(&b.decoder.w, &tensor_path(dir, "decoder_w"))?;
    save_blob(&b.decoder.b, &tensor_path(dir, "decoder_b"))?;
    save_blob(&b.encoder.w, &tensor_path(dir, "encoder_w"))?;
    save_blob(&b.encoder.b, &tensor_path(dir, "encoder_b"))?;
    Ok(())
}

pub fn load_backbone(dir: &Path) -> Result<Backbone> {
    let meta: BackboneMeta = read_meta(dir)?;
    if meta.kind != "backbone" {
        return Err(Error::Config(format!(
            "{} is a '{}' checkpoint, expected backbone",
            dir.display(),
            meta.kind
        )));
    }
    let mut denoiser = DenoiserWeights::init(meta.dims, 0);
    denoiser.w_in = load_named(dir, "w_in")?;
    denoiser.w_out = load_named(dir, "w_out")?;
    denoiser.b_out = load_named(dir, "b_out")?;
    for (i, blk) in denoiser.blocks.iter_mut().enumerate() {
        let names = block_names(i);
        blk.text_wq = load_named(dir, &names[0])?;
        blk.text_wk = load_named(dir, &names[1])?;
        blk.text_wv = load_named(dir, &names[2])?;
        blk.text_wo = load_named(dir, &names[3])?;
        blk.style_wq = load_named(dir, &names[4])?;
        blk.style_wo = load_named(dir, &names[5])?;
        blk.sub_wq = load_named(dir, &names[6])?;
        blk.sub_wo = load_named(dir, &names[7])?;
        blk.g1 = load_named(dir, &names[8])?;
        blk.g2 = load_named(dir, &names[9])?;
        blk.mlp_w1 = load_named(dir, &names[10])?;
        blk.mlp_b1 = load_named(dir, &names[11])?;
        blk.mlp_w2 = load_named(dir, &names[12])?;
        blk.mlp_b2 = load_named(dir, &names[13])?;
    }
    let decoder = DecoderWeights {
        w: load_named(dir, "decoder_w")?,
        b: load_named(dir, "decoder_b")?,
    };
    let encoder = EncoderWeights {
        w: load_named(dir, "encoder_w")?,
        b: load_named(dir, "encoder_b")?,
    };
    Ok(Backbone {
        denoiser,
        decoder,
        encoder,
        text_seed: meta.text_seed,
        vocab_dim: meta.vocab_dim,
    })
}

pub fn save_projector(p: &ProjectorWeights, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_meta(
        dir,
        &ProjectorMeta {
            kind: "projector".into(),
            descriptor: p.kind,
            d_desc: p.d_desc,
            hidden: p.hidden,
            n_tok: p.n_tok,
            d_cond: p.d_cond,
            sites: p.kv.len(),
        },
    )?;
    save_blob(&p.w1, &tensor_path(dir, "w1"))?;
    save_blob(&p.b1, &tensor_path(dir, "b1"))?;
    save_blob(&p.w2, &tensor_path(dir, "w2"))?;
    save_blob(&p.b2, &tensor_path(dir, "b2"))?;
    for (i, kv) in p.kv.iter().enumerate() {
        save_blob(&kv.wk, &tensor_path(dir, &format!("kv{i}_wk")))?;
        save_blob(&kv.wv, &tensor_path(dir, &format!("kv{i}_wv")))?;
    }
    Ok(())
}

pub fn load_projector(dir: &Path) -> Result<ProjectorWeights> {
    let meta: ProjectorMeta = read_meta(dir)?;
    if meta.kind != "projector" {
        return Err(Error::Config(format!(
            "{} is a '{}' checkpoint, expected projector",
            dir.display(),
            meta.kind
        )));
    }
    let mut kv = Vec::with_capacity(meta.sites);
    for i in 0..meta.sites {
        kv.push(KvPair {
            wk: load_named(dir, &format!("kv{i}_wk"))?,
            wv: load_named(dir, &format!("kv{i}_wv"))?,
        });
    }
    Ok(ProjectorWeights {
        kind: meta.descriptor,
        d_desc: meta.d_desc,
        hidden: meta.hidden,
        n_tok: meta.n_tok,
        d_cond: meta.d_cond,
        w1: load_named(dir, "w1")?,
        b1: load_named(dir, "b1")?,
        w2: load_named(dir, "w2")?,
        b2: load_named(dir, "b2")?,
        kv,
    })
}
