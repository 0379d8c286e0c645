//! Command-line surface: generation batches, training, evaluation,
//! gradient checks, and the first-order vs zero-order benchmark.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};

use subzero::conditioning::{style_profile, subject_profile, DescriptorKind, DescriptorProfiles, ReferencePair};
use subzero::controller::{
    bench_zo, run_generation, terminal_cost_gradcheck, ControllerMode, GenerationResult,
    GenerationSetup,
};
use subzero::denoiser::{Decoder, ModelDims};
use subzero::error::Error;
use subzero::io;
use subzero::metrics::RunMetrics;
use subzero::rng::Prng;
use subzero::schedule::{make_schedule, ScheduleKind};
use subzero::training::{
    benchmark_refs, gen_synthetic_dataset_sized, history_to_csv, pretrain_toy_denoiser,
    train_projector, ProjectorTrainConfig, TrainingHyper,
};

#[derive(Parser)]
#[command(name = "subzero", version, about = "Subject/style composition on a toy diffusion stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fo,
    Zo,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum SizeArg {
    /// 4x16x16 latents, 32x32 images, 4 blocks.
    Default,
    /// 4x8x8 latents, 16x16 images, 3 blocks (benchmark scale).
    Compact,
    /// 4x4x4 latents, 8x8 images, 2 blocks (smoke-test scale).
    Tiny,
}

impl SizeArg {
    fn dims(self) -> ModelDims {
        match self {
            SizeArg::Default => ModelDims::default(),
            SizeArg::Compact => ModelDims {
                latent_c: 4,
                latent_h: 8,
                latent_w: 8,
                d_attn: 32,
                d_cond: 32,
                blocks: 3,
                hidden: 64,
            },
            SizeArg::Tiny => ModelDims {
                latent_c: 4,
                latent_h: 4,
                latent_w: 4,
                d_attn: 16,
                d_cond: 16,
                blocks: 2,
                hidden: 32,
            },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Style,
    Object,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchedArg {
    Cosine,
    Linear,
}

impl SchedArg {
    fn kind(self) -> ScheduleKind {
        match self {
            SchedArg::Cosine => ScheduleKind::Cosine,
            SchedArg::Linear => ScheduleKind::Linear,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the generation batch described by a config file.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the controller mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Parallel workers over the (pair, seed) grid.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Pretrain the toy backbone on the synthetic corpus.
    TrainDenoiser {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SizeArg::Default)]
        size: SizeArg,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 1200)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        schedule_steps: usize,
        #[arg(long, value_enum, default_value_t = SchedArg::Cosine)]
        schedule_kind: SchedArg,
        /// Also write the benchmark reference images and prompts.
        #[arg(long, default_value_t = false)]
        export_refs: bool,
    },
    /// Train a style or object projector against a frozen backbone.
    TrainProjector {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        gamma: f64,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        schedule_steps: usize,
        #[arg(long, value_enum, default_value_t = SchedArg::Cosine)]
        schedule_kind: SchedArg,
    },
    /// Aggregate run reports into one metrics summary.
    Eval {
        /// Directory containing per-run report JSON files.
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck,
    /// Compare off / first-order / zero-order on the convex test.
    BenchZo {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems (including unknown subcommands) exit 1;
            // --help/--version exit 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn dispatch(cli: Cli) -> subzero::Result<()> {
    match cli.command {
        Command::Generate {
            config,
            out,
            seed,
            mode,
            workers,
        } => generate(&config, out, seed, mode, workers),
        Command::TrainDenoiser {
            out,
            size,
            samples,
            steps,
            batch,
            lr,
            seed,
            schedule_steps,
            schedule_kind,
            export_refs,
        } => train_denoiser_cmd(&out, size, samples, steps, batch, lr, seed, schedule_steps, schedule_kind, export_refs),
        Command::TrainProjector {
            backbone,
            kind,
            out,
            gamma,
            samples,
            steps,
            batch,
            lr,
            seed,
            schedule_steps,
            schedule_kind,
        } => train_projector_cmd(&backbone, kind, &out, gamma, samples, steps, batch, lr, seed, schedule_steps, schedule_kind),
        Command::Eval { reports, out } => eval_cmd(&reports, out),
        Command::Gradcheck => gradcheck_cmd(),
        Command::BenchZo { seeds, steps, out } => bench_zo_cmd(seeds, steps, out),
    }
}

// ── generate ─────────────────────────────────────────────────────────

struct Task {
    pair: usize,
    si: usize,
    sj: usize,
    seed_entry: u64,
    run_seed: u64,
}

fn generate(
    config_path: &Path,
    out_override: Option<PathBuf>,
    seed_override: Option<u64>,
    mode_override: Option<ModeArg>,
    workers: usize,
) -> subzero::Result<()> {
    let mut config = io::parse_config(config_path)?;
    if let Some(out) = out_override {
        config.out_dir = out;
    }
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    if let Some(mode) = mode_override {
        config.controller.mode = match mode {
            ModeArg::Fo => ControllerMode::FirstOrder,
            ModeArg::Zo => ControllerMode::ZeroOrder,
            ModeArg::Off => ControllerMode::Off,
        };
    }
    let workers = if io::deterministic_mode() { 1 } else { workers.max(1) };

    let backbone = io::load_backbone(&config.backbone)?;
    let style_proj = config
        .style_projector
        .as_deref()
        .map(io::load_projector)
        .transpose()?;
    let subject_proj = config
        .subject_projector
        .as_deref()
        .map(io::load_projector)
        .transpose()?;
    let profiles = DescriptorProfiles {
        style: style_profile(&config.descriptors.style)?,
        subject: subject_profile(&config.descriptors.subject)?,
    };
    let schedule = config.schedule.build()?;

    let subjects: Vec<_> = config
        .subject_refs
        .iter()
        .map(|p| io::load_blob(p))
        .collect::<subzero::Result<_>>()?;
    let styles: Vec<_> = config
        .style_refs
        .iter()
        .map(|p| io::load_blob(p))
        .collect::<subzero::Result<_>>()?;

    let mut tasks = Vec::new();
    let mut grid_index = 0u64;
    for si in 0..subjects.len() {
        for sj in 0..styles.len() {
            for &seed_entry in &config.seeds {
                tasks.push(Task {
                    pair: si * styles.len() + sj,
                    si,
                    sj,
                    seed_entry,
                    run_seed: Prng::derive_seed(
                        Prng::derive_seed(config.seed, seed_entry),
                        grid_index,
                    ),
                });
                grid_index += 1;
            }
        }
    }

    let results: Vec<Option<(GenerationResult, ReferencePair)>> =
        tasks.iter().map(|_| None).collect();
    let results = Mutex::new(results);
    let next = AtomicUsize::new(0);
    let config_ref = &config;
    let backbone_ref = &backbone;
    let style_ref = style_proj.as_ref();
    let subject_ref = subject_proj.as_ref();
    let profiles_ref = &profiles;
    let schedule_ref = &schedule;
    let subjects_ref = &subjects;
    let styles_ref = &styles;
    let tasks_ref = &tasks;
    let first_error: Mutex<Option<Error>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= tasks_ref.len() {
                    break;
                }
                let task = &tasks_ref[idx];
                let run = || -> subzero::Result<(GenerationResult, ReferencePair)> {
                    let refs = ReferencePair::new(
                        subjects_ref[task.si].clone(),
                        styles_ref[task.sj].clone(),
                    )?;
                    let setup = GenerationSetup {
                        backbone: backbone_ref,
                        decoder: Decoder::Learned(backbone_ref.decoder.clone()),
                        style_projector: style_ref,
                        subject_projector: subject_ref,
                        refs: &refs,
                        prompt: config_ref.prompt_for(task.si)?,
                        schedule: schedule_ref,
                        profiles: profiles_ref,
                        controller: config_ref.controller,
                        aggregation: config_ref.aggregation,
                        pairings: config_ref.pairings.pairings(),
                        seed: task.run_seed,
                        pair_index: Some(task.pair),
                    };
                    let mut result = run_generation(&setup)?;
                    result.seed = task.seed_entry;
                    Ok((result, refs))
                };
                match run() {
                    Ok(payload) => results.lock().unwrap()[idx] = Some(payload),
                    Err(e) => {
                        first_error.lock().unwrap().get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }

    let out_dir = &config.out_dir;
    std::fs::create_dir_all(out_dir.join("runs"))?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    let collected = results.into_inner().unwrap();
    let mut flat_results = Vec::with_capacity(collected.len());
    let mut flat_refs = Vec::with_capacity(collected.len());
    for (task, slot) in tasks.iter().zip(collected) {
        let (result, refs) = slot.expect("all tasks completed");
        let stem = format!("p{:02}x{:02}_s{}", task.si, task.sj, task.seed_entry);
        io::write_image(&result.image, &out_dir.join("images").join(format!("{stem}.ppm")))?;
        let report = io::RunReport {
            config: &config,
            subject_index: task.si,
            style_index: task.sj,
            prompt: config.prompt_for(task.si)?,
            result: &result,
        };
        io::write_report(&report, &out_dir.join("runs").join(format!("{stem}.json")))?;
        flat_results.push(result);
        flat_refs.push(refs);
    }

    let metrics = subzero::metrics::eval_run(&flat_results, &flat_refs, &profiles)?;
    std::fs::write(
        out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    std::fs::write(out_dir.join("metrics.txt"), metrics.to_table_string())?;
    println!(
        "{} runs -> {}  subject {:.1}  style {:.1}  average {:.1}  leakage {:.1}",
        flat_results.len(),
        out_dir.display(),
        metrics.subject_sim,
        metrics.style_sim,
        metrics.average,
        metrics.leakage_score
    );
    Ok(())
}

// ── training commands ────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn train_denoiser_cmd(
    out: &Path,
    size: SizeArg,
    samples: usize,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
    schedule_steps: usize,
    schedule_kind: SchedArg,
    export_refs: bool,
) -> subzero::Result<()> {
    let dims = size.dims();
    let sched = make_schedule(schedule_kind.kind(), schedule_steps)?;
    let hw = 2 * dims.latent_h;
    let dataset = gen_synthetic_dataset_sized(samples, seed, hw);
    let hyper = TrainingHyper {
        gamma: 0.0,
        lr,
        steps,
        batch,
        seed,
        t_min: 1,
        t_max: schedule_steps,
    };
    let (backbone, history) =
        pretrain_toy_denoiser(&dataset, &hyper, dims, &sched, 4096, Prng::derive_seed(seed, 99))?;
    io::save_backbone(&backbone, out)?;
    std::fs::write(out.join("pretrain_history.csv"), history_to_csv(&history))?;
    let last = history.last().expect("nonempty history");
    println!(
        "backbone -> {} (denoising {:.4}, reconstruction {:.4})",
        out.display(),
        last.l_denoising,
        last.l_descriptor
    );

    if export_refs {
        let refs_dir = out.join("refs");
        std::fs::create_dir_all(&refs_dir)?;
        let refs = benchmark_refs(hw);
        for (i, img) in refs.subjects.iter().enumerate() {
            io::save_blob(img, &refs_dir.join(format!("subject{i}.sbzt")))?;
        }
        for (j, img) in refs.styles.iter().enumerate() {
            io::save_blob(img, &refs_dir.join(format!("style{j}.sbzt")))?;
        }
        std::fs::write(
            refs_dir.join("prompts.json"),
            serde_json::to_string_pretty(&refs.prompts).map_err(|e| Error::Config(e.to_string()))?,
        )?;
        println!("benchmark refs -> {}", refs_dir.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_projector_cmd(
    backbone_dir: &Path,
    kind: KindArg,
    out: &Path,
    gamma: f64,
    samples: usize,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
    schedule_steps: usize,
    schedule_kind: SchedArg,
) -> subzero::Result<()> {
    let backbone = io::load_backbone(backbone_dir)?;
    let dims = backbone.denoiser.dims;
    let sched = make_schedule(schedule_kind.kind(), schedule_steps)?;
    let dataset = gen_synthetic_dataset_sized(samples, seed, 2 * dims.latent_h);
    let profiles = DescriptorProfiles {
        style: style_profile("gram")?,
        subject: subject_profile("layout")?,
    };
    let hyper = TrainingHyper {
        gamma,
        lr,
        steps,
        batch,
        seed,
        t_min: 1,
        t_max: schedule_steps,
    };
    let descriptor_kind = match kind {
        KindArg::Style => DescriptorKind::Style,
        KindArg::Object => DescriptorKind::Subject,
    };
    let (projector, history) = train_projector(
        descriptor_kind,
        &dataset,
        &backbone,
        &profiles,
        &hyper,
        &sched,
        &ProjectorTrainConfig::default(),
    )?;
    io::save_projector(&projector, out)?;
    std::fs::write(out.join("train_history.csv"), history_to_csv(&history))?;
    let last = history.last().expect("nonempty history");
    println!(
        "projector -> {} (denoising {:.4}, descriptor {:.4}, final {:.4})",
        out.display(),
        last.l_denoising,
        last.l_descriptor,
        last.l_final
    );
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

fn eval_cmd(reports_dir: &Path, out: Option<PathBuf>) -> subzero::Result<()> {
    #[derive(serde::Deserialize)]
    struct PartialReport {
        pair: usize,
        seed: u64,
        metrics: RunMetrics,
    }
    let mut entries: Vec<PartialReport> = Vec::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(reports_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    for path in &paths {
        let text = std::fs::read_to_string(path)?;
        let report: PartialReport = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        entries.push(report);
    }
    if entries.is_empty() {
        return Err(Error::Config(format!(
            "no report JSON files under {}",
            reports_dir.display()
        )));
    }
    let n = entries.len() as f64;
    let rows: Vec<subzero::metrics::PairRecord> = entries
        .iter()
        .map(|e| subzero::metrics::PairRecord {
            pair: e.pair,
            seed: e.seed,
            subject_sim: e.metrics.subject_sim,
            style_sim: e.metrics.style_sim,
            average: e.metrics.average,
            leakage: e.metrics.leakage,
        })
        .collect();
    let subject_sim = rows.iter().map(|r| r.subject_sim).sum::<f64>() / n;
    let style_sim = rows.iter().map(|r| r.style_sim).sum::<f64>() / n;
    let leakage = rows.iter().map(|r| r.leakage).sum::<f64>() / n;
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let report = subzero::metrics::MetricsReport {
        subject_sim,
        style_sim,
        average: 0.5 * (subject_sim + style_sim),
        leakage_score: leakage,
        rows,
        seeds,
    };
    print!("{}", report.to_table_string());
    if let Some(out) = out {
        std::fs::write(
            &out,
            serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?,
        )?;
        println!("metrics -> {}", out.display());
    }
    Ok(())
}

// ── gradcheck / bench ────────────────────────────────────────────────

fn gradcheck_cmd() -> subzero::Result<()> {
    use subzero::tensor::{central_difference, max_rel_error, Tape, Tensor, GRADCHECK_H, GRADCHECK_TOL};

    let mut failures = 0;
    let mut check = |name: &str, err: f64| {
        let ok = err <= GRADCHECK_TOL;
        println!("{}  {name}: max rel err {err:.3e}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    // Composite tensor-op path.
    {
        let mut rng = Prng::new(1);
        let x0 = subzero::tensor::randn(&[3, 4], &mut rng);
        let w = subzero::tensor::randn(&[4, 3], &mut rng);
        let target = subzero::tensor::randn(&[3, 3], &mut rng);
        let run = |tape: &Tape, x: &Tensor| -> subzero::Result<Tensor> {
            let h = tape.matmul(x, &w)?;
            let s = tape.softmax(&h, 1)?;
            tape.sq_l2_distance(&s, &target)
        };
        let tape = Tape::new();
        let x = tape.leaf(&x0);
        let loss = run(&tape, &x)?;
        let grads = tape.backward(&loss)?;
        let analytic = grads.get(&x).expect("grad").data().to_vec();
        let mut f = |xd: &[f64]| -> subzero::Result<f64> {
            let t = Tape::disabled();
            run(&t, &Tensor::new(vec![3, 4], xd.to_vec())?)?.item()
        };
        let numeric = central_difference(&mut f, x0.data(), GRADCHECK_H)?;
        check("matmul+softmax composite", max_rel_error(&analytic, &numeric));
    }

    // Descriptors.
    {
        let mut rng = Prng::new(2);
        let img0 = Tensor::from_fn(&[3, 8, 8], |_| rng.next_f64())?;
        let style = style_profile("gram")?;
        let target = {
            let t = subzero::tensor::randn(&[6], &mut rng);
            let n = t.l2_norm();
            Tensor::new(vec![6], t.data().iter().map(|v| v / n).collect())?
        };
        let run = |tape: &Tape, img: &Tensor| -> subzero::Result<Tensor> {
            let e = style.embed(tape, img)?;
            tape.sq_l2_distance(&e.vector, &target)
        };
        let tape = Tape::new();
        let img = tape.leaf(&img0);
        let loss = run(&tape, &img)?;
        let grads = tape.backward(&loss)?;
        let analytic = grads.get(&img).expect("grad").data().to_vec();
        let mut f = |xd: &[f64]| -> subzero::Result<f64> {
            let t = Tape::disabled();
            run(&t, &Tensor::new(vec![3, 8, 8], xd.to_vec())?)?.item()
        };
        let numeric = central_difference(&mut f, img0.data(), GRADCHECK_H)?;
        check("style descriptor", max_rel_error(&analytic, &numeric));
    }

    // Full terminal-cost path.
    check("terminal cost path", terminal_cost_gradcheck(&[4, 4, 4], 3)?);

    if failures > 0 {
        return Err(Error::contract(format!("{failures} gradcheck suite(s) failed")));
    }
    Ok(())
}

fn bench_zo_cmd(seeds: usize, steps: usize, out: Option<PathBuf>) -> subzero::Result<()> {
    let rows = bench_zo(seeds, steps, 0.1, 8, 1e-3)?;
    println!("{:>5} {:>14} {:>12} {:>10}", "mode", "final_cost", "tape_allocs", "wall_ms");
    for r in &rows {
        println!(
            "{:>5} {:>14.6} {:>12} {:>10.1}",
            r.mode, r.final_cost, r.tape_allocs, r.wall_ms
        );
    }
    if let Some(out) = out {
        std::fs::write(
            &out,
            serde_json::to_string_pretty(&rows).map_err(|e| Error::Config(e.to_string()))?,
        )?;
        println!("rows -> {}", out.display());
    }
    Ok(())
}
