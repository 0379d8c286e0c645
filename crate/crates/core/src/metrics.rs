//! Similarity and leakage metrics over descriptor embeddings, plus the
//! benchmark report aggregation.

use serde::{Deserialize, Serialize};

use crate::conditioning::{DescriptorEmbedding, DescriptorProfiles, ReferencePair};
use crate::controller::GenerationResult;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Cosine similarity as a percentage in [-100, 100].
pub fn cosine_similarity(a: &DescriptorEmbedding, b: &DescriptorEmbedding) -> Result<f64> {
    cosine_similarity_vec(&a.vector, &b.vector)
}

/// Similarity for report aggregation: a degenerate (zero) embedding —
/// e.g. the subject descriptor of a spatially constant image — scores
/// 0 instead of failing the whole batch.
pub fn cosine_or_zero(a: &DescriptorEmbedding, b: &DescriptorEmbedding) -> f64 {
    cosine_similarity(a, b).unwrap_or(0.0)
}

pub fn cosine_similarity_vec(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "cosine: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let na = a.l2_norm();
    let nb = b.l2_norm();
    if na <= 1e-12 || nb <= 1e-12 {
        return Err(Error::contract("cosine similarity of a zero vector"));
    }
    Ok(100.0 * a.dot(b) / (na * nb))
}

/// How much of the style reference's subject content shows up in the
/// output: positive part of the subject-descriptor cosine between the
/// generated image and the style reference. Lower is better.
pub fn leakage_score(
    generated: &Tensor,
    r_sty: &Tensor,
    subject: &crate::conditioning::SubjectDescriptor,
) -> Result<f64> {
    let tape = Tape::disabled();
    let a = subject.embed(&tape, generated)?;
    let b = subject.embed(&tape, r_sty)?;
    Ok(cosine_similarity(&a, &b)?.max(0.0))
}

/// Per-run similarity summary attached to every generation result.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RunMetrics {
    pub subject_sim: f64,
    pub style_sim: f64,
    pub average: f64,
    pub leakage: f64,
}

/// One row of the benchmark table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair: usize,
    pub seed: u64,
    pub subject_sim: f64,
    pub style_sim: f64,
    pub average: f64,
    pub leakage: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subject_sim: f64,
    pub style_sim: f64,
    pub average: f64,
    pub leakage_score: f64,
    pub rows: Vec<PairRecord>,
    pub seeds: Vec<u64>,
}

impl MetricsReport {
    /// Aligned plain-text table: subject, style, average columns, with
    /// the leakage analog reported on its own line.
    pub fn to_table_string(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:>6} {:>8} {:>12} {:>11} {:>9}\n",
            "pair", "seed", "Subject Sim.", "Style Sim.", "Average"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:>6} {:>8} {:>12.1} {:>11.1} {:>9.1}\n",
                r.pair, r.seed, r.subject_sim, r.style_sim, r.average
            ));
        }
        s.push_str(&format!(
            "{:>6} {:>8} {:>12.1} {:>11.1} {:>9.1}\n",
            "mean", "-", self.subject_sim, self.style_sim, self.average
        ));
        s.push_str(&format!("leakage (subject-descriptor analog): {:.1}\n", self.leakage_score));
        s
    }
}

/// Recomputes per-pair similarities from the generated images and
/// aggregates them. `results` and `refs` are aligned one-to-one.
pub fn eval_run(
    results: &[GenerationResult],
    refs: &[ReferencePair],
    profiles: &DescriptorProfiles,
) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::contract("eval_run: empty result list"));
    }
    if results.len() != refs.len() {
        return Err(Error::contract(format!(
            "eval_run: {} results vs {} reference pairs",
            results.len(),
            refs.len()
        )));
    }
    let tape = Tape::disabled();
    let mut rows = Vec::with_capacity(results.len());
    for (i, (res, pair)) in results.iter().zip(refs).enumerate() {
        let rho_out = profiles.subject.embed(&tape, &res.image)?;
        let psi_out = profiles.style.embed(&tape, &res.image)?;
        let rho_sub = profiles.subject.embed(&tape, &pair.r_sub)?;
        let psi_sty = profiles.style.embed(&tape, &pair.r_sty)?;
        let rho_sty = profiles.subject.embed(&tape, &pair.r_sty)?;
        let subject_sim = cosine_or_zero(&rho_out, &rho_sub);
        let style_sim = cosine_or_zero(&psi_out, &psi_sty);
        let leakage = cosine_or_zero(&rho_out, &rho_sty).max(0.0);
        rows.push(PairRecord {
            pair: res.pair.unwrap_or(i),
            seed: res.seed,
            subject_sim,
            style_sim,
            average: 0.5 * (subject_sim + style_sim),
            leakage,
        });
    }
    let n = rows.len() as f64;
    let subject_sim = rows.iter().map(|r| r.subject_sim).sum::<f64>() / n;
    let style_sim = rows.iter().map(|r| r.style_sim).sum::<f64>() / n;
    let leakage = rows.iter().map(|r| r.leakage).sum::<f64>() / n;
    let mut seeds: Vec<u64> = results.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    Ok(MetricsReport {
        subject_sim,
        style_sim,
        average: 0.5 * (subject_sim + style_sim),
        leakage_score: leakage,
        rows,
        seeds,
    })
}

/// Median of a sample; the benchmark criteria compare medians.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in medians"));
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::DescriptorKind;

    fn unit(v: Vec<f64>) -> DescriptorEmbedding {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        DescriptorEmbedding {
            vector: Tensor::new(vec![v.len()], v.iter().map(|x| x / n).collect()).unwrap(),
            kind: DescriptorKind::Subject,
        }
    }

    #[test]
    fn cosine_extremes() {
        let a = unit(vec![1.0, 0.0, 0.0]);
        let b = unit(vec![0.0, 1.0, 0.0]);
        let neg = unit(vec![-1.0, 0.0, 0.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 100.0).abs() <= 1e-9);
        assert!(cosine_similarity(&a, &b).unwrap().abs() <= 1e-9);
        assert!((cosine_similarity(&a, &neg).unwrap() + 100.0).abs() <= 1e-9);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let a = unit(vec![1.0, 0.0]);
        let z = DescriptorEmbedding {
            vector: Tensor::zeros(&[2]),
            kind: DescriptorKind::Subject,
        };
        assert!(matches!(
            cosine_similarity(&a, &z),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn leakage_of_image_with_itself_is_100() {
        let mut rng = crate::rng::Prng::new(4);
        let img = Tensor::from_fn(&[3, 16, 16], |_| rng.next_f64()).unwrap();
        let desc = crate::conditioning::subject_profile("layout").unwrap();
        let score = leakage_score(&img, &img, &desc).unwrap();
        assert!((score - 100.0).abs() <= 1e-9);
    }

    #[test]
    fn median_behaviour() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }
}
