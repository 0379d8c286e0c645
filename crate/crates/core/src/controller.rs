//! The disentangled stochastic optimal controller: per-timestep inner
//! optimization of the predicted clean latent against a four-term
//! terminal cost, plus the full generation loop.
//!
//! The first-order path differentiates the cost through the decoder and
//! descriptors with a fresh tape per inner step; the zero-order path
//! estimates the gradient from paired perturbed evaluations with the
//! tape disabled throughout, so its node-allocation count is exactly
//! zero — the artifact's stand-in for backprop memory.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conditioning::{
    project_condition, DescriptorProfiles, ProjectorWeights, ReferencePair, TextEmbedder,
};
use crate::denoiser::{
    decode, denoise, update_style_weight, AggregationState, Backbone, ConditioningBundle,
    Decoder, StreamCond,
};
use crate::error::{Error, Result};
use crate::metrics::{cosine_or_zero, RunMetrics};
use crate::rng::Prng;
use crate::schedule::{ddim_step, predict_x0, NoiseSchedule, X0Mode};
use crate::tensor::{adam_step_direct, randn, AdamState, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerMode {
    FirstOrder,
    ZeroOrder,
    Off,
}

/// Which post-step cost component modulates the temporal style weight.
/// The algorithmic form uses the content-leakage term; the prose
/// variant uses the style-leakage term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MuUpdateSource {
    ContentLeakage,
    StyleLeakage,
}

/// Inner-loop optimizer. Adam is the default; plain gradient descent is
/// selectable to match the bare update rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerOptimizer {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub mode: ControllerMode,
    /// Inner optimization steps per timestep (M).
    pub inner_steps: usize,
    /// Inner step size (eta).
    pub step_size: f64,
    pub gamma_nc: f64,
    pub gamma_ns: f64,
    /// Weight of the subject constraint; 0 reduces the cost to the
    /// single style objective.
    pub lambda_c: f64,
    pub zo_eps: f64,
    pub zo_samples: usize,
    pub x0_mode: X0Mode,
    pub optimizer: InnerOptimizer,
    pub mu_update: MuUpdateSource,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            mode: ControllerMode::FirstOrder,
            inner_steps: 5,
            step_size: 0.1,
            gamma_nc: 1.0,
            gamma_ns: 1.0,
            lambda_c: 1.0,
            zo_eps: 1e-3,
            zo_samples: 4,
            x0_mode: X0Mode::DdimStandard,
            optimizer: InnerOptimizer::Adam,
            mu_update: MuUpdateSource::ContentLeakage,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps > 0 && self.step_size <= 0.0 {
            return Err(Error::Config(format!(
                "step_size must be > 0 when inner_steps > 0, got {}",
                self.step_size
            )));
        }
        if self.gamma_nc < 0.0 || self.gamma_ns < 0.0 {
            return Err(Error::Config("gamma_nc and gamma_ns must be >= 0".into()));
        }
        if self.lambda_c < 0.0 {
            return Err(Error::Config("lambda_c must be >= 0".into()));
        }
        if self.mode == ControllerMode::ZeroOrder && self.zo_eps <= 0.0 {
            return Err(Error::Config("zo_eps must be > 0 in zero-order mode".into()));
        }
        Ok(())
    }
}

/// Which reference image each cost term compares against. The default
/// pairing matches subject-to-subject and style-to-style with crossed
/// leakage terms; `printed()` is the degenerate variant where positive
/// and negative terms share references, kept for comparison runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefSel {
    Sub,
    Sty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostPairings {
    pub lc: RefSel,
    pub ls: RefSel,
    pub lnc: RefSel,
    pub lns: RefSel,
}

impl Default for CostPairings {
    fn default() -> Self {
        CostPairings {
            lc: RefSel::Sub,
            ls: RefSel::Sty,
            lnc: RefSel::Sty,
            lns: RefSel::Sub,
        }
    }
}

impl CostPairings {
    pub fn printed() -> Self {
        CostPairings {
            lc: RefSel::Sty,
            ls: RefSel::Sub,
            lnc: RefSel::Sty,
            lns: RefSel::Sub,
        }
    }
}

/// The four cost components and their weighted total.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub l_c: f64,
    pub l_s: f64,
    pub l_nc: f64,
    pub l_ns: f64,
    pub l_total: f64,
}

/// Terminal cost bound to one run's references and descriptors, with
/// the reference embeddings precomputed once.
pub struct TerminalCost<'a> {
    profiles: &'a DescriptorProfiles,
    pairings: CostPairings,
    pub gamma_nc: f64,
    pub gamma_ns: f64,
    pub lambda_c: f64,
    rho_sub: Tensor,
    rho_sty: Tensor,
    psi_sub: Tensor,
    psi_sty: Tensor,
}

impl<'a> TerminalCost<'a> {
    pub fn new(
        profiles: &'a DescriptorProfiles,
        refs: &ReferencePair,
        pairings: CostPairings,
        gamma_nc: f64,
        gamma_ns: f64,
        lambda_c: f64,
    ) -> Result<Self> {
        let tape = Tape::disabled();
        Ok(TerminalCost {
            profiles,
            pairings,
            gamma_nc,
            gamma_ns,
            lambda_c,
            rho_sub: profiles.subject.embed(&tape, &refs.r_sub)?.vector,
            rho_sty: profiles.subject.embed(&tape, &refs.r_sty)?.vector,
            psi_sub: profiles.style.embed(&tape, &refs.r_sub)?.vector,
            psi_sty: profiles.style.embed(&tape, &refs.r_sty)?.vector,
        })
    }

    fn rho_ref(&self, sel: RefSel) -> &Tensor {
        match sel {
            RefSel::Sub => &self.rho_sub,
            RefSel::Sty => &self.rho_sty,
        }
    }

    fn psi_ref(&self, sel: RefSel) -> &Tensor {
        match sel {
            RefSel::Sub => &self.psi_sub,
            RefSel::Sty => &self.psi_sty,
        }
    }

    /// Evaluates the cost at a decoded image. Returns the total as a
    /// tape scalar (differentiable w.r.t. `y_hat`) plus the numeric
    /// breakdown.
    pub fn evaluate(&self, tape: &Tape, y_hat: &Tensor) -> Result<(Tensor, CostBreakdown)> {
        let rho_y = self.profiles.subject.embed(tape, y_hat)?.vector;
        let psi_y = self.profiles.style.embed(tape, y_hat)?.vector;
        let l_c = tape.sq_l2_distance(&rho_y, self.rho_ref(self.pairings.lc))?;
        let l_s = tape.sq_l2_distance(&psi_y, self.psi_ref(self.pairings.ls))?;
        let l_nc = tape.sq_l2_distance(&rho_y, self.rho_ref(self.pairings.lnc))?;
        let l_ns = tape.sq_l2_distance(&psi_y, self.psi_ref(self.pairings.lns))?;
        let mut total = tape.add(&tape.scale(&l_c, self.lambda_c)?, &l_s)?;
        total = tape.sub(&total, &tape.scale(&l_nc, self.gamma_nc)?)?;
        total = tape.sub(&total, &tape.scale(&l_ns, self.gamma_ns)?)?;
        let breakdown = CostBreakdown {
            l_c: l_c.item()?,
            l_s: l_s.item()?,
            l_nc: l_nc.item()?,
            l_ns: l_ns.item()?,
            l_total: total.item()?,
        };
        Ok((total, breakdown))
    }
}

/// Spec-surface convenience: evaluate the terminal cost of one image
/// against a reference pair.
pub fn terminal_cost(
    y_hat: &Tensor,
    refs: &ReferencePair,
    profiles: &DescriptorProfiles,
    gamma_nc: f64,
    gamma_ns: f64,
) -> Result<CostBreakdown> {
    let cost = TerminalCost::new(
        profiles,
        refs,
        CostPairings::default(),
        gamma_nc,
        gamma_ns,
        1.0,
    )?;
    let tape = Tape::disabled();
    Ok(cost.evaluate(&tape, y_hat)?.1)
}

/// A scalar cost over the optimization variable, evaluated under a
/// caller-supplied tape (recording for first-order, disabled for
/// zero-order).
pub type CostFn<'a> = dyn Fn(&Tape, &Tensor) -> Result<Tensor> + 'a;

/// First-order inner loop: M optimizer steps on the latent with a fresh
/// tape per step. Returns the optimized latent and the number of tape
/// nodes allocated.
pub fn optimize_latent_fo(
    x0_hat: &Tensor,
    cost: &CostFn,
    eta: f64,
    m: usize,
    optimizer: InnerOptimizer,
) -> Result<(Tensor, usize)> {
    let mut z = x0_hat.detached();
    let mut allocs = 0;
    let mut params = vec![z.clone()];
    let mut adam = AdamState::new(&params);
    for step in 0..m {
        let tape = Tape::new();
        let leaf = tape.leaf(&params[0]);
        let loss = cost(&tape, &leaf)?;
        let l = loss.item()?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!(
                "inner step {step}: cost {l}"
            )));
        }
        let grads = tape.backward(&loss)?;
        let g = grads
            .get(&leaf)
            .ok_or_else(|| Error::contract("inner loss detached from the latent"))?
            .clone();
        allocs += tape.alloc_count();
        match optimizer {
            InnerOptimizer::Adam => adam_step_direct(&mut params, &[g], &mut adam, eta)?,
            InnerOptimizer::Sgd => {
                let data = params[0].data_mut();
                for (p, gv) in data.iter_mut().zip(g.data()) {
                    *p -= eta * gv;
                }
            }
        }
    }
    z = params.remove(0);
    Ok((z, allocs))
}

/// Two-point SPSA estimate along a Gaussian direction regenerated from
/// the seed for each of the three passes, so no full perturbation
/// tensor survives between cost evaluations beyond the live probe.
/// The tape stays disabled throughout.
pub fn spsa_gradient(cost: &CostFn, z: &Tensor, zo_eps: f64, rng_seed: u64) -> Result<Tensor> {
    if zo_eps <= 0.0 {
        return Err(Error::contract(format!("zo_eps {zo_eps} must be > 0")));
    }
    let tape = Tape::disabled();

    let mut probe = z.detached();
    {
        let mut rng = Prng::new(rng_seed);
        for v in probe.data_mut() {
            *v += zo_eps * rng.gaussian();
        }
    }
    let l_plus = cost(&tape, &probe)?.item()?;

    let mut probe = z.detached();
    {
        let mut rng = Prng::new(rng_seed);
        for v in probe.data_mut() {
            *v -= zo_eps * rng.gaussian();
        }
    }
    let l_minus = cost(&tape, &probe)?.item()?;

    if !l_plus.is_finite() || !l_minus.is_finite() {
        return Err(Error::NonFinite(format!(
            "spsa costs ({l_plus}, {l_minus})"
        )));
    }
    let scale = (l_plus - l_minus) / (2.0 * zo_eps);

    let mut grad = Tensor::zeros(z.shape());
    {
        let mut rng = Prng::new(rng_seed);
        for v in grad.data_mut() {
            *v = scale * rng.gaussian();
        }
    }
    debug_assert_eq!(tape.alloc_count(), 0);
    Ok(grad)
}

/// Zero-order inner loop: M Adam steps on averaged SPSA estimates,
/// tape-free. The returned allocation count is always zero.
#[allow(clippy::too_many_arguments)]
pub fn optimize_latent_zo(
    x0_hat: &Tensor,
    cost: &CostFn,
    eta: f64,
    m: usize,
    zo_samples: usize,
    zo_eps: f64,
    seed: u64,
    optimizer: InnerOptimizer,
) -> Result<(Tensor, usize)> {
    if zo_samples == 0 {
        return Err(Error::contract("zo_samples must be >= 1"));
    }
    let mut params = vec![x0_hat.detached()];
    let mut adam = AdamState::new(&params);
    for step in 0..m {
        let mut avg = Tensor::zeros(x0_hat.shape());
        for s in 0..zo_samples {
            let sub_seed = Prng::derive_seed(seed, (step * zo_samples + s) as u64);
            let est = spsa_gradient(cost, &params[0], zo_eps, sub_seed)?;
            for (a, e) in avg.data_mut().iter_mut().zip(est.data()) {
                *a += e / zo_samples as f64;
            }
        }
        match optimizer {
            InnerOptimizer::Adam => adam_step_direct(&mut params, &[avg], &mut adam, eta)?,
            InnerOptimizer::Sgd => {
                let data = params[0].data_mut();
                for (p, gv) in data.iter_mut().zip(avg.data()) {
                    *p -= eta * gv;
                }
            }
        }
    }
    let z = params.remove(0);
    Ok((z, 0))
}

// ── full generation loop ─────────────────────────────────────────────

/// Everything a single generation run needs, already loaded.
pub struct GenerationSetup<'a> {
    pub backbone: &'a Backbone,
    pub decoder: Decoder,
    pub style_projector: Option<&'a ProjectorWeights>,
    pub subject_projector: Option<&'a ProjectorWeights>,
    pub refs: &'a ReferencePair,
    pub prompt: &'a str,
    pub schedule: &'a NoiseSchedule,
    pub profiles: &'a DescriptorProfiles,
    pub controller: ControllerConfig,
    pub aggregation: AggregationState,
    pub pairings: CostPairings,
    pub seed: u64,
    /// Position in a batch grid, echoed into reports.
    pub pair_index: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationResult {
    #[serde(skip, default = "default_image")]
    pub image: Tensor,
    pub costs: Vec<CostBreakdown>,
    pub mu_s_trajectory: Vec<f64>,
    pub metrics: RunMetrics,
    pub wall_ms: f64,
    pub tape_allocs: usize,
    pub seed: u64,
    pub pair: Option<usize>,
}

fn default_image() -> Tensor {
    Tensor::zeros(&[1])
}

/// Runs the full denoising trajectory with per-timestep control.
pub fn run_generation(setup: &GenerationSetup) -> Result<GenerationResult> {
    setup.controller.validate()?;
    let started = Instant::now();
    let cfg = &setup.controller;
    let dims = &setup.backbone.denoiser.dims;
    let sched = setup.schedule;
    let total_steps = sched.steps();

    // Conditioning streams are fixed for the whole run.
    let quiet = Tape::disabled();
    let embedder = TextEmbedder::new(setup.backbone.vocab_dim, dims.d_cond, setup.backbone.text_seed);
    let text = embedder.embed(setup.prompt)?;
    let style = match setup.style_projector {
        Some(p) => {
            let emb = setup.profiles.style.embed(&quiet, &setup.refs.r_sty)?;
            Some(StreamCond {
                tokens: project_condition(&quiet, &emb, p)?,
                kv: p.kv.clone(),
            })
        }
        None => None,
    };
    let subject = match setup.subject_projector {
        Some(p) => {
            let emb = setup.profiles.subject.embed(&quiet, &setup.refs.r_sub)?;
            Some(StreamCond {
                tokens: project_condition(&quiet, &emb, p)?,
                kv: p.kv.clone(),
            })
        }
        None => None,
    };
    let bundle = ConditioningBundle {
        text: Some(text.embeddings),
        style,
        subject,
    };

    let cost = TerminalCost::new(
        setup.profiles,
        setup.refs,
        setup.pairings,
        cfg.gamma_nc,
        cfg.gamma_ns,
        cfg.lambda_c,
    )?;
    let decoder = &setup.decoder;
    let cost_fn = |tape: &Tape, z: &Tensor| -> Result<Tensor> {
        let y = decode(tape, z, decoder)?;
        Ok(cost.evaluate(tape, &y)?.0)
    };

    let mut state = setup.aggregation;
    state.mu_s = state.mu_s0;
    let mut rng = Prng::new(setup.seed);
    let mut x_t = randn(&dims.latent_shape(), &mut rng);
    let mut costs = Vec::with_capacity(total_steps);
    let mut mu_traj = Vec::with_capacity(total_steps);
    let mut tape_allocs = 0usize;

    let at_step = |t: usize, e: Error| Error::Contract(format!("timestep {t}: {e}"));

    for t in (1..=total_steps).rev() {
        let eps_hat = denoise(&quiet, &x_t, t, &bundle, &state, &setup.backbone.denoiser)
            .map_err(|e| at_step(t, e))?;
        let x0_hat = predict_x0(&quiet, &x_t, &eps_hat, t, sched, cfg.x0_mode)
            .map_err(|e| at_step(t, e))?;

        let z = match cfg.mode {
            ControllerMode::Off => x0_hat,
            ControllerMode::FirstOrder => {
                let (z, a) = optimize_latent_fo(
                    &x0_hat,
                    &cost_fn,
                    cfg.step_size,
                    cfg.inner_steps,
                    cfg.optimizer,
                )
                .map_err(|e| at_step(t, e))?;
                tape_allocs += a;
                z
            }
            ControllerMode::ZeroOrder => {
                let (z, a) = optimize_latent_zo(
                    &x0_hat,
                    &cost_fn,
                    cfg.step_size,
                    cfg.inner_steps,
                    cfg.zo_samples,
                    cfg.zo_eps,
                    Prng::derive_seed(setup.seed, t as u64),
                    cfg.optimizer,
                )
                .map_err(|e| at_step(t, e))?;
                tape_allocs += a;
                z
            }
        };

        // Post-optimization cost components drive the temporal weight
        // and are the recorded per-step breakdown (evaluated in every
        // mode, optimized only when the controller is on).
        let y = decode(&quiet, &z, decoder).map_err(|e| at_step(t, e))?;
        let (_, bd) = cost.evaluate(&quiet, &y).map_err(|e| at_step(t, e))?;
        let neg = match cfg.mu_update {
            MuUpdateSource::ContentLeakage => bd.l_nc,
            MuUpdateSource::StyleLeakage => bd.l_ns,
        };
        update_style_weight(&mut state, bd.l_s, neg);
        costs.push(bd);
        mu_traj.push(state.mu_s);

        x_t = ddim_step(&quiet, &z, &x_t, t, sched).map_err(|e| at_step(t, e))?;
    }

    let image = decode(&quiet, &x_t, decoder)?;
    let rho_out = setup.profiles.subject.embed(&quiet, &image)?;
    let psi_out = setup.profiles.style.embed(&quiet, &image)?;
    let rho_sub = setup.profiles.subject.embed(&quiet, &setup.refs.r_sub)?;
    let psi_sty = setup.profiles.style.embed(&quiet, &setup.refs.r_sty)?;
    let rho_sty = setup.profiles.subject.embed(&quiet, &setup.refs.r_sty)?;
    let subject_sim = cosine_or_zero(&rho_out, &rho_sub);
    let style_sim = cosine_or_zero(&psi_out, &psi_sty);
    let leakage = cosine_or_zero(&rho_out, &rho_sty).max(0.0);

    let wall_ms = if crate::io::deterministic_mode() {
        0.0
    } else {
        started.elapsed().as_secs_f64() * 1e3
    };
    Ok(GenerationResult {
        image,
        costs,
        mu_s_trajectory: mu_traj,
        metrics: RunMetrics {
            subject_sim,
            style_sim,
            average: 0.5 * (subject_sim + style_sim),
            leakage,
        },
        wall_ms,
        tape_allocs,
        seed: setup.seed,
        pair: setup.pair_index,
    })
}

/// First three latent channels as the optimization image, used by the
/// convex controller tests and the zero-order benchmark.
pub fn quadratic_cost<'a>(target: &'a Tensor) -> impl Fn(&Tape, &Tensor) -> Result<Tensor> + 'a {
    move |tape: &Tape, z: &Tensor| {
        let img = decode(tape, z, &Decoder::IdentityCrop)?;
        tape.sq_l2_distance(&img, target)
    }
}

/// One row of the first-order vs zero-order comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZoBenchRow {
    pub mode: String,
    pub final_cost: f64,
    pub tape_allocs: usize,
    pub wall_ms: f64,
}

/// Runs the convex identity-decoder test in all three modes over
/// `n_seeds` seeds and reports the median final cost, worst-case tape
/// allocation count, and total wall time per mode.
pub fn bench_zo(n_seeds: usize, m: usize, eta: f64, zo_samples: usize, zo_eps: f64) -> Result<Vec<ZoBenchRow>> {
    let mut finals: [Vec<f64>; 3] = [vec![], vec![], vec![]];
    let mut allocs = [0usize; 3];
    let mut wall = [0.0f64; 3];
    for seed in 0..n_seeds as u64 {
        let mut rng = Prng::new(Prng::derive_seed(0xBE7C, seed));
        let z0 = randn(&[4, 4, 4], &mut rng);
        let target = randn(&[3, 4, 4], &mut rng);
        let cost = quadratic_cost(&target);
        let quiet = Tape::disabled();

        let t0 = Instant::now();
        finals[0].push(cost(&quiet, &z0)?.item()?);
        wall[0] += t0.elapsed().as_secs_f64() * 1e3;

        let t0 = Instant::now();
        let (zf, a) = optimize_latent_fo(&z0, &cost, eta, m, InnerOptimizer::Adam)?;
        wall[1] += t0.elapsed().as_secs_f64() * 1e3;
        allocs[1] = allocs[1].max(a);
        finals[1].push(cost(&quiet, &zf)?.item()?);

        let t0 = Instant::now();
        let (zz, a) = optimize_latent_zo(&z0, &cost, eta, m, zo_samples, zo_eps, seed, InnerOptimizer::Adam)?;
        wall[2] += t0.elapsed().as_secs_f64() * 1e3;
        allocs[2] = allocs[2].max(a);
        finals[2].push(cost(&quiet, &zz)?.item()?);
    }
    let deterministic = crate::io::deterministic_mode();
    let row = |i: usize, mode: &str| ZoBenchRow {
        mode: mode.into(),
        final_cost: crate::metrics::median(&finals[i]),
        tape_allocs: allocs[i],
        wall_ms: if deterministic { 0.0 } else { wall[i] },
    };
    Ok(vec![row(0, "off"), row(1, "fo"), row(2, "zo")])
}

/// Worst-case relative error between reverse-mode and central-difference
/// gradients of the full terminal-cost path
/// (latent -> predict_x0 -> decode -> descriptors -> total).
pub fn terminal_cost_gradcheck(latent: &[usize; 3], seed: u64) -> Result<f64> {
    use crate::tensor::{central_difference, max_rel_error, GRADCHECK_H};
    let mut rng = Prng::new(seed);
    let hw = 2 * latent[1];
    let mk_img = |rng: &mut Prng| {
        Tensor::from_fn(&[3, hw, hw], |_| rng.next_f64()).expect("image")
    };
    let profiles = DescriptorProfiles {
        style: crate::conditioning::StyleDescriptor { patch: 4 },
        subject: crate::conditioning::SubjectDescriptor {
            patch: 4,
            out_dim: 16,
            seed: 1001,
        },
    };
    let refs = ReferencePair::new(mk_img(&mut rng), mk_img(&mut rng))?;
    let cost = TerminalCost::new(&profiles, &refs, CostPairings::default(), 1.0, 1.0, 1.0)?;
    let sched = crate::schedule::make_schedule(crate::schedule::ScheduleKind::Cosine, 8)?;
    let decoder = Decoder::Learned(crate::denoiser::DecoderWeights::init(latent[0], 77));
    let eps_hat = randn(latent, &mut rng);
    let t = 4;

    let run = |tape: &Tape, z: &Tensor| -> Result<Tensor> {
        let x0 = predict_x0(tape, z, &eps_hat, t, &sched, X0Mode::DdimStandard)?;
        let y = decode(tape, &x0, &decoder)?;
        Ok(cost.evaluate(tape, &y)?.0)
    };

    let z0 = randn(latent, &mut rng);
    let tape = Tape::new();
    let leaf = tape.leaf(&z0);
    let loss = run(&tape, &leaf)?;
    let grads = tape.backward(&loss)?;
    let analytic = grads
        .get(&leaf)
        .ok_or_else(|| Error::contract("terminal cost detached from latent"))?
        .data()
        .to_vec();
    let mut f = |xd: &[f64]| -> Result<f64> {
        let quiet = Tape::disabled();
        run(&quiet, &Tensor::new(latent.to_vec(), xd.to_vec())?)?.item()
    };
    let numeric = central_difference(&mut f, z0.data(), GRADCHECK_H)?;
    Ok(max_rel_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::style_profile;
    use crate::tensor::{central_difference, max_rel_error, GRADCHECK_H, GRADCHECK_TOL};

    fn profiles() -> DescriptorProfiles {
        DescriptorProfiles {
            style: style_profile("gram").unwrap(),
            subject: crate::conditioning::SubjectDescriptor {
                patch: 4,
                out_dim: 16,
                seed: 1001,
            },
        }
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = Prng::new(seed);
        Tensor::from_fn(&[3, 8, 8], |_| rng.next_f64()).unwrap()
    }

    #[test]
    fn coincident_references_zero_cost() {
        let img = image(1);
        let refs = ReferencePair::new(img.clone(), img.clone()).unwrap();
        let p = profiles();
        let bd = terminal_cost(&img, &refs, &p, 1.0, 1.0).unwrap();
        for v in [bd.l_c, bd.l_s, bd.l_nc, bd.l_ns, bd.l_total] {
            assert!(v.abs() <= 1e-18, "{bd:?}");
        }
    }

    #[test]
    fn gamma_zero_reduces_to_positive_terms() {
        let refs = ReferencePair::new(image(2), image(3)).unwrap();
        let p = profiles();
        let bd = terminal_cost(&image(4), &refs, &p, 0.0, 0.0).unwrap();
        assert!((bd.l_total - (bd.l_c + bd.l_s)).abs() <= 1e-12);
        assert!(bd.l_total >= 0.0);
    }

    #[test]
    fn breakdown_identity_and_gamma_monotonicity() {
        let refs = ReferencePair::new(image(5), image(6)).unwrap();
        let p = profiles();
        let y = image(7);
        let bd = terminal_cost(&y, &refs, &p, 1.0, 1.0).unwrap();
        let identity = bd.l_c + bd.l_s - bd.l_nc - bd.l_ns;
        assert!((bd.l_total - identity).abs() <= 1e-12);
        assert!(bd.l_c >= 0.0 && bd.l_s >= 0.0 && bd.l_nc >= 0.0 && bd.l_ns >= 0.0);
        // Increasing gamma_nc strictly decreases the total when L_nc > 0.
        assert!(bd.l_nc > 0.0);
        let bd2 = terminal_cost(&y, &refs, &p, 2.0, 1.0).unwrap();
        assert!(bd2.l_total < bd.l_total);
    }

    #[test]
    fn unit_sphere_chord_distance() {
        // Orthonormal unit embeddings sit at squared distance 2.
        let tape = Tape::disabled();
        let a = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert_eq!(tape.sq_l2_distance(&a, &b).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn fo_zero_steps_is_identity() {
        let z0 = randn(&[4, 4, 4], &mut Prng::new(8));
        let target = Tensor::zeros(&[3, 4, 4]);
        let cost = quadratic_cost(&target);
        let (z, allocs) = optimize_latent_fo(&z0, &cost, 0.1, 0, InnerOptimizer::Adam).unwrap();
        assert_eq!(z.data(), z0.data());
        assert_eq!(allocs, 0);
    }

    #[test]
    fn fo_converges_on_convex_quadratic() {
        let mut rng = Prng::new(9);
        let z0 = randn(&[4, 4, 4], &mut rng);
        let target = randn(&[3, 4, 4], &mut rng);
        let cost = quadratic_cost(&target);
        let tape = Tape::disabled();
        let initial = cost(&tape, &z0).unwrap().item().unwrap();
        let (z, allocs) = optimize_latent_fo(&z0, &cost, 0.1, 50, InnerOptimizer::Adam).unwrap();
        let final_l = cost(&tape, &z).unwrap().item().unwrap();
        assert!(final_l < initial, "{final_l} !< {initial}");
        // Distance (sqrt of the quadratic) shrinks by at least half.
        assert!(
            final_l.sqrt() <= 0.5 * initial.sqrt(),
            "||z-c|| {} vs {}",
            final_l.sqrt(),
            initial.sqrt()
        );
        assert!(allocs > 0);
    }

    #[test]
    fn fo_first_step_gradient_matches_finite_differences() {
        let mut rng = Prng::new(10);
        let z0 = randn(&[4, 2, 2], &mut rng);
        let target = randn(&[3, 2, 2], &mut rng);
        let cost = quadratic_cost(&target);

        let tape = Tape::new();
        let leaf = tape.leaf(&z0);
        let loss = cost(&tape, &leaf).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let analytic = grads.get(&leaf).unwrap().data().to_vec();

        let mut f = |xd: &[f64]| -> Result<f64> {
            let t = Tape::disabled();
            cost(&t, &Tensor::new(vec![4, 2, 2], xd.to_vec())?)?.item()
        };
        let numeric = central_difference(&mut f, z0.data(), GRADCHECK_H).unwrap();
        assert!(max_rel_error(&analytic, &numeric) <= GRADCHECK_TOL);
    }

    #[test]
    fn spsa_linear_cost_exactness() {
        // L(z) = <g, z>: the two-point estimate is exactly <g,u> u.
        let mut rng = Prng::new(11);
        let g = randn(&[16], &mut rng);
        let z = randn(&[16], &mut rng);
        let cost = |tape: &Tape, z: &Tensor| -> Result<Tensor> {
            tape.sum(&tape.mul(z, &g)?)
        };
        let est = spsa_gradient(&cost, &z, 0.37, 123).unwrap();
        // Regenerate u to compute the expected value.
        let mut r = Prng::new(123);
        let u: Vec<f64> = (0..16).map(|_| r.gaussian()).collect();
        let gu: f64 = g.data().iter().zip(&u).map(|(a, b)| a * b).sum();
        for (e, ui) in est.data().iter().zip(&u) {
            assert!((e - gu * ui).abs() <= 1e-9, "{e} vs {}", gu * ui);
        }
    }

    #[test]
    fn spsa_constant_cost_zero_estimate() {
        let z = randn(&[8], &mut Prng::new(12));
        let cost = |_: &Tape, _: &Tensor| Tensor::scalar(4.2);
        let est = spsa_gradient(&cost, &z, 1e-3, 5).unwrap();
        assert!(est.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spsa_monte_carlo_converges_to_true_gradient() {
        // Average 2000 single-sample estimates of grad ||Az-b||^2, dim 32.
        let mut rng = Prng::new(13);
        let a = randn(&[32, 32], &mut rng);
        let b = randn(&[32], &mut rng);
        let z = randn(&[32], &mut rng);
        let cost = |tape: &Tape, z: &Tensor| -> Result<Tensor> {
            let az = tape.matmul(&a, &tape.reshape(z, &[32, 1])?)?;
            tape.sq_l2_distance(&tape.reshape(&az, &[32])?, &b)
        };
        let mut avg = vec![0.0; 32];
        for s in 0..2000 {
            let est = spsa_gradient(&cost, &z, 1e-3, Prng::derive_seed(13, s)).unwrap();
            for (o, e) in avg.iter_mut().zip(est.data()) {
                *o += e / 2000.0;
            }
        }
        // True gradient 2 A^T (Az - b).
        let mut az = vec![0.0; 32];
        for i in 0..32 {
            for j in 0..32 {
                az[i] += a.data()[i * 32 + j] * z.data()[j];
            }
            az[i] -= b.data()[i];
        }
        let mut truth = vec![0.0; 32];
        for i in 0..32 {
            for j in 0..32 {
                truth[j] += 2.0 * a.data()[i * 32 + j] * az[i];
            }
        }
        let dot: f64 = avg.iter().zip(&truth).map(|(x, y)| x * y).sum();
        let na = avg.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nt = truth.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = dot / (na * nt);
        assert!(cos >= 0.95, "cosine {cos}");
    }

    #[test]
    fn sgd_inner_optimizer_takes_plain_gradient_steps() {
        // One SGD step on ||z - c||^2 moves z by exactly -eta * 2(z - c).
        let mut rng = Prng::new(40);
        let z0 = randn(&[8], &mut rng);
        let c = randn(&[8], &mut rng);
        let cost = |tape: &Tape, z: &Tensor| tape.sq_l2_distance(z, &c);
        let (z1, _) = optimize_latent_fo(&z0, &cost, 0.05, 1, InnerOptimizer::Sgd).unwrap();
        for k in 0..8 {
            let expect = z0.data()[k] - 0.05 * 2.0 * (z0.data()[k] - c.data()[k]);
            assert!((z1.data()[k] - expect).abs() <= 1e-12);
        }
        // And it makes progress over many steps.
        let tape = Tape::disabled();
        let (zf, _) = optimize_latent_fo(&z0, &cost, 0.05, 40, InnerOptimizer::Sgd).unwrap();
        assert!(
            cost(&tape, &zf).unwrap().item().unwrap()
                < cost(&tape, &z0).unwrap().item().unwrap()
        );
    }

    #[test]
    fn rb_style_reduction_to_single_style_objective() {
        // gamma_nc = gamma_ns = 0 and the subject term weighted to zero:
        // the cost collapses to the style objective alone.
        let refs = ReferencePair::new(image(20), image(21)).unwrap();
        let p = profiles();
        let y = image(22);
        let cost = TerminalCost::new(&p, &refs, CostPairings::default(), 0.0, 0.0, 0.0).unwrap();
        let tape = Tape::disabled();
        let (total, bd) = cost.evaluate(&tape, &y).unwrap();
        assert!((total.item().unwrap() - bd.l_s).abs() <= 1e-15);
        // And the style component really is the squared descriptor
        // distance to the style reference.
        let psi_y = p.style.embed(&tape, &y).unwrap().vector;
        let psi_sty = p.style.embed(&tape, &refs.r_sty).unwrap().vector;
        let direct = tape.sq_l2_distance(&psi_y, &psi_sty).unwrap().item().unwrap();
        assert!((bd.l_s - direct).abs() <= 1e-15);
    }

    #[test]
    fn inner_loop_reduces_cost_in_20_of_20_trials() {
        // Convex identity-decoder test; the required rate is >= 95%.
        let mut reduced = 0;
        for seed in 0..20u64 {
            let mut rng = Prng::new(1000 + seed);
            let z0 = randn(&[4, 4, 4], &mut rng);
            let target = randn(&[3, 4, 4], &mut rng);
            let cost = quadratic_cost(&target);
            let tape = Tape::disabled();
            let before = cost(&tape, &z0).unwrap().item().unwrap();
            let (z, _) = optimize_latent_fo(&z0, &cost, 0.1, 5, InnerOptimizer::Adam).unwrap();
            let after = cost(&tape, &z).unwrap().item().unwrap();
            if after < before {
                reduced += 1;
            }
        }
        assert!(reduced >= 19, "cost reduced in only {reduced}/20 trials");
    }

    #[test]
    fn generation_with_gamma_zero_has_additive_costs() {
        // First-order run with both leakage weights at zero: every
        // recorded step satisfies L_total = L_c + L_s.
        let dims = crate::denoiser::ModelDims {
            latent_c: 4,
            latent_h: 4,
            latent_w: 4,
            d_attn: 16,
            d_cond: 16,
            blocks: 2,
            hidden: 32,
        };
        let backbone = Backbone {
            denoiser: crate::denoiser::DenoiserWeights::init(dims, 3),
            decoder: crate::denoiser::DecoderWeights::init(4, 4),
            encoder: crate::denoiser::EncoderWeights::init(4, 5),
            text_seed: 6,
            vocab_dim: 256,
        };
        let refs = ReferencePair::new(image(30), image(31)).unwrap();
        let p = profiles();
        let sched = crate::schedule::make_schedule(crate::schedule::ScheduleKind::Linear, 4).unwrap();
        let setup = GenerationSetup {
            backbone: &backbone,
            decoder: Decoder::Learned(backbone.decoder.clone()),
            style_projector: None,
            subject_projector: None,
            refs: &refs,
            prompt: "a cross at the lower left",
            schedule: &sched,
            profiles: &p,
            controller: ControllerConfig {
                gamma_nc: 0.0,
                gamma_ns: 0.0,
                inner_steps: 2,
                step_size: 0.01,
                ..Default::default()
            },
            aggregation: AggregationState::default(),
            pairings: CostPairings::default(),
            seed: 77,
            pair_index: None,
        };
        let result = run_generation(&setup).unwrap();
        assert_eq!(result.costs.len(), 4);
        for bd in &result.costs {
            assert!((bd.l_total - (bd.l_c + bd.l_s)).abs() <= 1e-12);
            assert!(bd.l_total >= 0.0);
        }
        assert!(result.tape_allocs > 0);
        assert_eq!(result.mu_s_trajectory.len(), 4);
    }

    #[test]
    fn zo_zero_steps_identity_and_zero_allocs() {
        let z0 = randn(&[4, 4, 4], &mut Prng::new(14));
        let target = Tensor::zeros(&[3, 4, 4]);
        let cost = quadratic_cost(&target);
        let (z, allocs) =
            optimize_latent_zo(&z0, &cost, 0.1, 0, 4, 1e-3, 1, InnerOptimizer::Adam).unwrap();
        assert_eq!(z.data(), z0.data());
        assert_eq!(allocs, 0);
    }


    #[test]
    fn zo_tracks_fo_within_factor_two_on_quadratic() {
        // ||z - c||^2 in dim 16 under the same Adam-step budget. The
        // step size sits where a 100-step budget is mid-convergence;
        // at large eta the first-order path parks in a much tighter
        // oscillation band than the noisy-estimate path ever reaches.
        let mut fo_final = Vec::new();
        let mut zo_final = Vec::new();
        for seed in 0..5u64 {
            let mut rng = Prng::new(100 + seed);
            let z0 = randn(&[16], &mut rng);
            let target = randn(&[16], &mut rng);
            let cost = |tape: &Tape, z: &Tensor| tape.sq_l2_distance(z, &target);
            let tape = Tape::disabled();
            let (zf, _) = optimize_latent_fo(&z0, &cost, 0.03, 100, InnerOptimizer::Adam).unwrap();
            let (zz, allocs) =
                optimize_latent_zo(&z0, &cost, 0.03, 100, 8, 1e-3, seed, InnerOptimizer::Adam)
                    .unwrap();
            assert_eq!(allocs, 0);
            fo_final.push(cost(&tape, &zf).unwrap().item().unwrap());
            zo_final.push(cost(&tape, &zz).unwrap().item().unwrap());
        }
        let fo_med = crate::metrics::median(&fo_final);
        let zo_med = crate::metrics::median(&zo_final);
        assert!(
            zo_med <= 2.0 * fo_med.max(1e-9),
            "zo {zo_med} vs fo {fo_med}"
        );
    }
}
