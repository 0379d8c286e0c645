//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (visible with `--nocapture`) and asserting its thresholds.
//!
//! Criteria 7 and 8 share a trained fixture (backbone + projectors) and
//! a four-configuration benchmark over the synthetic 8x8 subject/style
//! suite; both are built once behind `OnceLock`s.

use std::sync::OnceLock;
use std::time::Instant;

use subzero::conditioning::{
    style_profile, subject_profile, DescriptorKind, DescriptorProfiles, ProjectorWeights,
    ReferencePair,
};
use subzero::controller::{
    bench_zo, optimize_latent_fo, optimize_latent_zo, run_generation, spsa_gradient,
    terminal_cost_gradcheck, ControllerConfig, ControllerMode, CostPairings, GenerationResult,
    GenerationSetup, InnerOptimizer, MuUpdateSource,
};
use subzero::denoiser::{
    update_style_weight, AggregationState, Backbone, Decoder, ModelDims, OrthoMode,
};
use subzero::io::blob::{blob_bytes, blob_from_bytes};
use subzero::io::ppm_bytes;
use subzero::metrics::median;
use subzero::rng::Prng;
use subzero::schedule::{add_noise, ddim_step, make_schedule, predict_x0, NoiseSchedule, ScheduleKind, X0Mode};
use subzero::tensor::{randn, Tape, Tensor};
use subzero::training::{
    benchmark_refs, gen_synthetic_dataset_sized, heldout_descriptor_loss, pretrain_toy_denoiser,
    train_projector, BenchmarkRefs, ProjectorTrainConfig, TrainingHyper,
};

const GRADCHECK_TOL: f64 = 1e-5;

fn verdict(criterion: &str, pass: bool, detail: String, started: Instant) {
    let line = format!(
        "{}  {criterion}: {detail}  [{:.1}s]",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    println!("{line}");
    assert!(pass, "{line}");
}

// ── shared benchmark fixture ─────────────────────────────────────────

struct Fixture {
    backbone: Backbone,
    stylezero: ProjectorWeights,
    objectzero: ProjectorWeights,
    refs: BenchmarkRefs,
    schedule: NoiseSchedule,
    profiles: DescriptorProfiles,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dims = ModelDims {
            latent_c: 4,
            latent_h: 8,
            latent_w: 8,
            d_attn: 32,
            d_cond: 32,
            blocks: 3,
            hidden: 64,
        };
        let schedule = make_schedule(ScheduleKind::Linear, 8).unwrap();
        let corpus = gen_synthetic_dataset_sized(256, 7, 16);
        let pre = TrainingHyper {
            gamma: 0.0,
            lr: 3e-3,
            steps: 3000,
            batch: 8,
            seed: 7,
            t_min: 1,
            t_max: 8,
        };
        let (backbone, _) =
            pretrain_toy_denoiser(&corpus, &pre, dims, &schedule, 4096, Prng::derive_seed(7, 99))
                .unwrap();
        let profiles = DescriptorProfiles {
            style: style_profile("gram").unwrap(),
            subject: subject_profile("layout").unwrap(),
        };
        let proj_hyper = TrainingHyper {
            gamma: 0.3,
            lr: 2e-3,
            steps: 2000,
            batch: 8,
            seed: 7,
            t_min: 1,
            t_max: 8,
        };
        let cfg = ProjectorTrainConfig::default();
        let (stylezero, _) = train_projector(
            DescriptorKind::Style,
            &corpus,
            &backbone,
            &profiles,
            &proj_hyper,
            &schedule,
            &cfg,
        )
        .unwrap();
        let (objectzero, _) = train_projector(
            DescriptorKind::Subject,
            &corpus,
            &backbone,
            &profiles,
            &proj_hyper,
            &schedule,
            &cfg,
        )
        .unwrap();
        Fixture {
            backbone,
            stylezero,
            objectzero,
            refs: benchmark_refs(16),
            schedule,
            profiles,
        }
    })
}

/// The benchmark's operating point: controller progress sized to the
/// directional-analog regime (a handful of points over the off
/// baseline), calibrated once and frozen.
const BENCH_ETA: f64 = 0.0008;
const BENCH_MASTER_SEED: u64 = 11;
const BENCH_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy)]
enum BenchConfig {
    /// gamma_nc = gamma_ns = 1, rejection + temporal weighting.
    Full,
    /// gamma_nc = gamma_ns = 0, rejection + temporal weighting.
    NoGamma,
    /// Controller off.
    Off,
    /// gamma on, plain weighted addition (no rejection, fixed mu_s).
    NoOta,
}

fn bench_controller(cfg: BenchConfig) -> ControllerConfig {
    let mut c = ControllerConfig {
        step_size: BENCH_ETA,
        gamma_ns: 1.0,
        mu_update: MuUpdateSource::StyleLeakage,
        ..Default::default()
    };
    match cfg {
        BenchConfig::Full | BenchConfig::NoOta => {}
        BenchConfig::NoGamma => {
            c.gamma_nc = 0.0;
            c.gamma_ns = 0.0;
        }
        BenchConfig::Off => {
            c.mode = ControllerMode::Off;
            c.mu_update = MuUpdateSource::ContentLeakage;
        }
    }
    c
}

fn bench_aggregation(cfg: BenchConfig) -> AggregationState {
    match cfg {
        BenchConfig::NoOta => AggregationState::new(0.6, 1.0, 0.0, 1.5, OrthoMode::Off),
        _ => AggregationState::new(0.6, 1.0, 0.4, 1.5, OrthoMode::Reject),
    }
}

/// 8 subjects x 8 styles x 3 seeds, run with the same seed derivation
/// as the CLI batch driver.
fn run_suite(cfg: BenchConfig) -> Vec<GenerationResult> {
    let fx = fixture();
    let controller = bench_controller(cfg);
    let aggregation = bench_aggregation(cfg);

    struct Task {
        si: usize,
        sj: usize,
        run_seed: u64,
    }
    let mut tasks = Vec::new();
    let mut grid_index = 0u64;
    for si in 0..fx.refs.subjects.len() {
        for sj in 0..fx.refs.styles.len() {
            for &seed_entry in &BENCH_SEEDS {
                tasks.push(Task {
                    si,
                    sj,
                    run_seed: Prng::derive_seed(
                        Prng::derive_seed(BENCH_MASTER_SEED, seed_entry),
                        grid_index,
                    ),
                });
                grid_index += 1;
            }
        }
    }

    let results: Vec<OnceLock<GenerationResult>> = tasks.iter().map(|_| OnceLock::new()).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let workers = std::thread::available_parallelism().map_or(2, |n| n.get().min(8));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if idx >= tasks.len() {
                    break;
                }
                let task = &tasks[idx];
                let refs = ReferencePair::new(
                    fx.refs.subjects[task.si].clone(),
                    fx.refs.styles[task.sj].clone(),
                )
                .unwrap();
                let seed_entry = BENCH_SEEDS[idx % BENCH_SEEDS.len()];
                let setup = GenerationSetup {
                    backbone: &fx.backbone,
                    decoder: Decoder::Learned(fx.backbone.decoder.clone()),
                    style_projector: Some(&fx.stylezero),
                    subject_projector: Some(&fx.objectzero),
                    refs: &refs,
                    prompt: &fx.refs.prompts[task.si],
                    schedule: &fx.schedule,
                    profiles: &fx.profiles,
                    controller,
                    aggregation,
                    pairings: CostPairings::default(),
                    seed: task.run_seed,
                    pair_index: Some(task.si * 8 + task.sj),
                };
                let mut result = run_generation(&setup).unwrap();
                result.seed = seed_entry;
                results[idx].set(result).ok().unwrap();
            });
        }
    });
    results.into_iter().map(|slot| slot.into_inner().unwrap()).collect()
}

struct SuiteStats {
    /// Mean of per-run (subject+style)/2 over all pairs and seeds.
    average: f64,
    /// Per-seed suite leakage means, indexed by seed entry.
    leakage_by_seed: Vec<f64>,
    /// Per-seed suite averages.
    average_by_seed: Vec<f64>,
}

fn suite_stats(results: &[GenerationResult]) -> SuiteStats {
    let n = results.len() as f64;
    let average = results.iter().map(|r| r.metrics.average).sum::<f64>() / n;
    let mut leakage_by_seed = Vec::new();
    let mut average_by_seed = Vec::new();
    for &s in &BENCH_SEEDS {
        let rs: Vec<&GenerationResult> = results.iter().filter(|r| r.seed == s).collect();
        let m = rs.len() as f64;
        leakage_by_seed.push(rs.iter().map(|r| r.metrics.leakage).sum::<f64>() / m);
        average_by_seed.push(rs.iter().map(|r| r.metrics.average).sum::<f64>() / m);
    }
    SuiteStats {
        average,
        leakage_by_seed,
        average_by_seed,
    }
}

fn suite(cfg: BenchConfig) -> &'static SuiteStats {
    static FULL: OnceLock<SuiteStats> = OnceLock::new();
    static NO_GAMMA: OnceLock<SuiteStats> = OnceLock::new();
    static OFF: OnceLock<SuiteStats> = OnceLock::new();
    static NO_OTA: OnceLock<SuiteStats> = OnceLock::new();
    let slot = match cfg {
        BenchConfig::Full => &FULL,
        BenchConfig::NoGamma => &NO_GAMMA,
        BenchConfig::Off => &OFF,
        BenchConfig::NoOta => &NO_OTA,
    };
    slot.get_or_init(|| suite_stats(&run_suite(cfg)))
}

// ── criteria ─────────────────────────────────────────────────────────

#[test]
fn criterion_01_gradient_fidelity() {
    let started = Instant::now();
    // Full terminal-cost chain on a 4x4x4 latent: z -> predicted clean
    // latent -> decode -> descriptors -> weighted total.
    let err = terminal_cost_gradcheck(&[4, 4, 4], 42).unwrap();
    verdict(
        "criterion 1 gradient fidelity",
        err <= GRADCHECK_TOL,
        format!("max rel err {err:.2e} (tol {GRADCHECK_TOL:.0e})"),
        started,
    );
}

#[test]
fn criterion_02_oracle_sampling() {
    let started = Instant::now();
    let sched = make_schedule(ScheduleKind::Cosine, 8).unwrap();
    let tape = Tape::disabled();
    let mut rng = Prng::new(2);
    let x0 = randn(&[4, 16, 16], &mut rng);
    let eps = randn(&[4, 16, 16], &mut rng);
    let mut x_t = add_noise(&tape, &x0, &eps, 8, &sched).unwrap();
    for t in (1..=8).rev() {
        let x0_hat = predict_x0(&tape, &x_t, &eps, t, &sched, X0Mode::DdimStandard).unwrap();
        x_t = ddim_step(&tape, &x0_hat, &x_t, t, &sched).unwrap();
    }
    let err = x_t.max_abs_diff(&x0);
    verdict(
        "criterion 2 oracle sampling",
        err <= 1e-9,
        format!("max abs reconstruction err {err:.2e} (tol 1e-9)"),
        started,
    );
}

#[test]
fn criterion_03_orthogonality() {
    let started = Instant::now();
    let tape = Tape::disabled();
    let mut rng = Prng::new(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let f_text = randn(&[6, 16], &mut rng);
        let f_sub = randn(&[6, 16], &mut rng);
        let hat = subzero::denoiser::orthogonal_reject(&tape, &f_sub, &f_text).unwrap();
        for i in 0..6 {
            let row = |t: &Tensor, i: usize| t.data()[i * 16..(i + 1) * 16].to_vec();
            let dot: f64 = row(&hat, i)
                .iter()
                .zip(row(&f_text, i))
                .map(|(a, b)| a * b)
                .sum();
            let ns = row(&f_sub, i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let nt = row(&f_text, i).iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(dot.abs() / (1e-6 * ns * nt));
        }
    }
    verdict(
        "criterion 3 orthogonality",
        worst <= 1.0,
        format!("worst |<f_sub_hat, f_text>| at {worst:.3} of the 1e-6*|f_sub||f_text| bound"),
        started,
    );
}

#[test]
fn criterion_04_temporal_schedule() {
    let started = Instant::now();
    // Synthetic post-step cost series in the regime the update is
    // specified for (leakage component <= 1).
    let mut rng = Prng::new(4);
    let series: Vec<(f64, f64)> = (0..12)
        .map(|_| (rng.next_f64() * 2.0, rng.next_f64()))
        .collect();

    let mut state = AggregationState::new(0.6, 1.0, 0.4, 1.5, OrthoMode::Reject);
    let mut closed_form = 0.6f64;
    let mut ok = true;
    let mut prev = state.mu_s;
    for &(l_s, l_nc) in &series {
        update_style_weight(&mut state, l_s, l_nc);
        closed_form = (closed_form + 0.4 * l_s * (1.0 - l_nc)).min(1.5);
        ok &= (state.mu_s - closed_form).abs() <= 1e-12;
        ok &= state.mu_s >= prev; // non-decreasing
        ok &= state.mu_s <= 1.5;
        prev = state.mu_s;
    }
    // Saturation stays at the cap.
    let mut capped = AggregationState::new(1.5, 1.0, 0.4, 1.5, OrthoMode::Reject);
    update_style_weight(&mut capped, 3.0, 0.0);
    ok &= capped.mu_s == 1.5;
    // zeta = 0 freezes the weight.
    let mut frozen = AggregationState::new(0.6, 1.0, 0.0, 1.5, OrthoMode::Reject);
    for &(l_s, l_nc) in &series {
        update_style_weight(&mut frozen, l_s, l_nc);
    }
    ok &= frozen.mu_s == 0.6;

    // A real generation's recorded trajectory equals the accumulation
    // of its own recorded cost components.
    let fx = fixture();
    let refs = ReferencePair::new(fx.refs.subjects[0].clone(), fx.refs.styles[0].clone()).unwrap();
    let setup = GenerationSetup {
        backbone: &fx.backbone,
        decoder: Decoder::Learned(fx.backbone.decoder.clone()),
        style_projector: Some(&fx.stylezero),
        subject_projector: Some(&fx.objectzero),
        refs: &refs,
        prompt: &fx.refs.prompts[0],
        schedule: &fx.schedule,
        profiles: &fx.profiles,
        controller: bench_controller(BenchConfig::Full),
        aggregation: bench_aggregation(BenchConfig::Full),
        pairings: CostPairings::default(),
        seed: 5,
        pair_index: None,
    };
    let result = run_generation(&setup).unwrap();
    ok &= result.mu_s_trajectory.len() == fx.schedule.steps();
    let mut replay = AggregationState::new(0.6, 1.0, 0.4, 1.5, OrthoMode::Reject);
    for (bd, recorded) in result.costs.iter().zip(&result.mu_s_trajectory) {
        update_style_weight(&mut replay, bd.l_s, bd.l_ns); // style-leakage source
        ok &= (replay.mu_s - recorded).abs() <= 1e-12;
    }
    ok &= result
        .mu_s_trajectory
        .windows(2)
        .all(|w| w[1] >= w[0] - 1e-12);

    verdict(
        "criterion 4 temporal schedule",
        ok,
        format!(
            "closed form within 1e-12 over {} synthetic + {} recorded steps, capped at 1.5",
            series.len(),
            result.mu_s_trajectory.len()
        ),
        started,
    );
}

#[test]
fn criterion_05_spsa_estimator() {
    let started = Instant::now();
    let mut rng = Prng::new(5);
    let a = randn(&[32, 32], &mut rng);
    let b = randn(&[32], &mut rng);
    let z = randn(&[32], &mut rng);
    let cost = |tape: &Tape, z: &Tensor| -> subzero::Result<Tensor> {
        let az = tape.matmul(&a, &tape.reshape(z, &[32, 1])?)?;
        tape.sq_l2_distance(&tape.reshape(&az, &[32])?, &b)
    };
    let mut avg = vec![0.0; 32];
    for s in 0..2000u64 {
        let est = spsa_gradient(&cost, &z, 1e-3, Prng::derive_seed(5, s)).unwrap();
        for (o, e) in avg.iter_mut().zip(est.data()) {
            *o += e / 2000.0;
        }
    }
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
    let cos = dot
        / (avg.iter().map(|x| x * x).sum::<f64>().sqrt()
            * truth.iter().map(|x| x * x).sum::<f64>().sqrt());
    verdict(
        "criterion 5 spsa estimator",
        cos >= 0.95,
        format!("cosine with true gradient {cos:.4} (need >= 0.95)"),
        started,
    );
}

#[test]
fn criterion_06_zero_order_memory_and_ordering() {
    let started = Instant::now();
    // Allocation property on the convex test.
    let mut rng = Prng::new(6);
    let z0 = randn(&[4, 4, 4], &mut rng);
    let target = randn(&[3, 4, 4], &mut rng);
    let cost = subzero::controller::quadratic_cost(&target);
    let (_, fo_allocs) = optimize_latent_fo(&z0, &cost, 0.1, 5, InnerOptimizer::Adam).unwrap();
    let (_, zo_allocs) =
        optimize_latent_zo(&z0, &cost, 0.1, 5, 4, 1e-3, 1, InnerOptimizer::Adam).unwrap();

    // 20-seed median ordering: off > zo > fo in final cost.
    let rows = bench_zo(20, 100, 0.1, 8, 1e-3).unwrap();
    let (off, fo, zo) = (rows[0].final_cost, rows[1].final_cost, rows[2].final_cost);
    let ordering = fo < zo && zo < off;
    let pass = fo_allocs > 0 && zo_allocs == 0 && rows[2].tape_allocs == 0 && ordering;
    verdict(
        "criterion 6 zero-order memory",
        pass,
        format!(
            "fo allocs {fo_allocs} > 0, zo allocs {zo_allocs} == 0; median final cost fo {fo:.3e} < zo {zo:.3e} < off {off:.3e}"
        ),
        started,
    );
}

#[test]
fn criterion_07_disentanglement_benchmark() {
    let started = Instant::now();
    let full = suite(BenchConfig::Full);
    let no_gamma = suite(BenchConfig::NoGamma);
    let off = suite(BenchConfig::Off);

    let leak_full = median(&full.leakage_by_seed);
    let leak_ng = median(&no_gamma.leakage_by_seed);
    let leakage_cut_ok = (leak_ng - leak_full) >= 0.1 * leak_ng;
    let avg_drop = no_gamma.average - full.average;
    let avg_ok = avg_drop <= 2.0;
    let control_gain = full.average - off.average;
    let control_ok = control_gain >= 3.0;

    verdict(
        "criterion 7 disentanglement benchmark",
        leakage_cut_ok && avg_ok && control_ok,
        format!(
            "leakage median {leak_ng:.2} -> {leak_full:.2} ({:.0}% cut, need >=10%); avg drop {avg_drop:.2} (allow <=2); control gain {control_gain:.2} (need >=3)",
            (leak_ng - leak_full) / leak_ng * 100.0
        ),
        started,
    );
}

#[test]
fn criterion_08_ota_ablation() {
    let started = Instant::now();
    let full = suite(BenchConfig::Full);
    let no_ota = suite(BenchConfig::NoOta);
    let med_full = median(&full.average_by_seed);
    let med_plain = median(&no_ota.average_by_seed);
    verdict(
        "criterion 8 ota ablation",
        med_full > med_plain,
        format!("median average with OTA {med_full:.2} vs plain addition {med_plain:.2}"),
        started,
    );
}

#[test]
fn criterion_09_projector_training() {
    let started = Instant::now();
    let dims = ModelDims {
        latent_c: 4,
        latent_h: 4,
        latent_w: 4,
        d_attn: 16,
        d_cond: 16,
        blocks: 2,
        hidden: 32,
    };
    let sched = make_schedule(ScheduleKind::Linear, 8).unwrap();
    let corpus = gen_synthetic_dataset_sized(256, 7, 8);
    let heldout = gen_synthetic_dataset_sized(64, 1234, 8);
    let profiles = DescriptorProfiles {
        style: style_profile("gram").unwrap(),
        subject: subject_profile("layout").unwrap(),
    };
    let pre = TrainingHyper {
        gamma: 0.0,
        lr: 3e-3,
        steps: 1500,
        batch: 8,
        seed: 7,
        t_min: 1,
        t_max: 8,
    };
    let (backbone, _) =
        pretrain_toy_denoiser(&corpus, &pre, dims, &sched, 4096, Prng::derive_seed(7, 99)).unwrap();
    let cfg = ProjectorTrainConfig::default();

    let mut with_gamma = Vec::new();
    let mut without_gamma = Vec::new();
    let mut zero_init = Vec::new();
    for seed in 0..5u64 {
        for (gamma, bucket) in [(0.3, &mut with_gamma), (0.0, &mut without_gamma)] {
            let hyper = TrainingHyper {
                gamma,
                lr: 2e-3,
                steps: 2000,
                batch: 8,
                seed: 100 + seed,
                t_min: 1,
                t_max: 8,
            };
            let (proj, history) = train_projector(
                DescriptorKind::Style,
                &corpus,
                &backbone,
                &profiles,
                &hyper,
                &sched,
                &cfg,
            )
            .unwrap();
            // Loss additivity at every logged step.
            for r in &history {
                assert!((r.l_final - (r.l_denoising + gamma * r.l_descriptor)).abs() <= 1e-12);
            }
            bucket.push(
                heldout_descriptor_loss(
                    DescriptorKind::Style,
                    &proj,
                    &backbone,
                    &profiles,
                    &heldout,
                    &sched,
                    &cfg,
                    555,
                )
                .unwrap(),
            );
        }
        let fresh = ProjectorWeights::init(
            DescriptorKind::Style,
            6,
            cfg.hidden,
            cfg.n_tok,
            dims.d_cond,
            dims.d_attn,
            dims.blocks,
            Prng::derive_seed(100 + seed, 11),
        );
        zero_init.push(
            heldout_descriptor_loss(
                DescriptorKind::Style,
                &fresh,
                &backbone,
                &profiles,
                &heldout,
                &sched,
                &cfg,
                555,
            )
            .unwrap(),
        );
    }
    let m_gamma = median(&with_gamma);
    let m_plain = median(&without_gamma);
    let m_zero = median(&zero_init);
    let pass = m_gamma <= 0.7 * m_zero && m_gamma < m_plain;
    verdict(
        "criterion 9 projector training",
        pass,
        format!(
            "held-out descriptor loss: zero-init {m_zero:.4}, gamma=0.3 {m_gamma:.4} (ratio {:.2}, need <=0.70), gamma=0 {m_plain:.4}",
            m_gamma / m_zero
        ),
        started,
    );
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let started = Instant::now();
    let fx = fixture();
    let refs = ReferencePair::new(fx.refs.subjects[1].clone(), fx.refs.styles[2].clone()).unwrap();
    let make_setup = || GenerationSetup {
        backbone: &fx.backbone,
        decoder: Decoder::Learned(fx.backbone.decoder.clone()),
        style_projector: Some(&fx.stylezero),
        subject_projector: Some(&fx.objectzero),
        refs: &refs,
        prompt: &fx.refs.prompts[1],
        schedule: &fx.schedule,
        profiles: &fx.profiles,
        controller: bench_controller(BenchConfig::Full),
        aggregation: bench_aggregation(BenchConfig::Full),
        pairings: CostPairings::default(),
        seed: 31337,
        pair_index: Some(0),
    };
    let r1 = run_generation(&make_setup()).unwrap();
    let r2 = run_generation(&make_setup()).unwrap();
    let images_identical = r1
        .image
        .data()
        .iter()
        .zip(r2.image.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let reports_identical = serde_json::to_string(&r1.costs).unwrap()
        == serde_json::to_string(&r2.costs).unwrap()
        && r1.mu_s_trajectory == r2.mu_s_trajectory
        && r1.tape_allocs == r2.tape_allocs;

    // Tensor blob and PPM round-trips are bit-exact.
    let blob_ok = {
        let back = blob_from_bytes(&blob_bytes(&r1.image)).unwrap();
        back.data()
            .iter()
            .zip(r1.image.data())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    };
    let ppm_ok = {
        let p1 = ppm_bytes(&r1.image).unwrap();
        let p2 = ppm_bytes(&r2.image).unwrap();
        p1 == p2 && p1.starts_with(b"P6\n16 16\n255\n")
    };

    verdict(
        "criterion 10 determinism and persistence",
        images_identical && reports_identical && blob_ok && ppm_ok,
        format!(
            "bit-identical images {images_identical}, reports {reports_identical}, blob {blob_ok}, ppm {ppm_ok}"
        ),
        started,
    );
}
