//! Command-line entry point: dataset generation, training, editing, fusion,
//! composition, ablation, sweeps, and a self-check. Every subcommand is a
//! pure function of (flags, input files, seed); reruns are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pairflow::datagen::{benchmark_by_name, make_pairs, make_sources, PairSpec, PRETRAIN_STREAM};
use pairflow::error::{Error, Result};
use pairflow::eval::{ablation_table, scale_sweep, EVAL_SEEDS};
use pairflow::io;
use pairflow::losses::{ContentTargetMode, LossConfig};
use pairflow::sampler::{generate, EditStack, SampleConfig};
use pairflow::schedule::NoiseSchedule;
use pairflow::trainer::{fit_reconstruction_lora, pretrain_base, train_paired, TrainConfig};

#[derive(Parser)]
#[command(name = "pairflow", version, about = "Semantic edit directions on a toy rectified flow")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags mirroring train-config file keys; set flags override file values.
#[derive(Args, Default)]
struct TrainFlags {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda_sem: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a pretraining set from the spec and fit the base denoiser
    Pretrain {
        /// key=value spec file (benchmark, seed, n_pairs, n_sources)
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        benchmark: Option<String>,
        #[arg(long)]
        n_sources: Option<usize>,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV training log
        #[arg(long)]
        out_log: Option<PathBuf>,
    },
    /// Generate source/target pairs plus the ground-truth direction
    MakePairs {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        benchmark: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_pairs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly fit content and semantic adapters on a pair set
    Train {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out_content: PathBuf,
        #[arg(long)]
        out_semantic: PathBuf,
        #[arg(long)]
        out_log: Option<PathBuf>,
    },
    /// Generate with the semantic adapter applied at a runtime scale
    Edit {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        semantic: PathBuf,
        /// Optional content adapter kept active on every step
        #[arg(long)]
        content: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 28)]
        steps: usize,
        #[arg(long, default_value_t = 14)]
        off_steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Optional PGM image of the output (square data only)
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Fit a reconstruction adapter to one real input
    Recon {
        #[arg(long)]
        base: PathBuf,
        /// PFT1 tensor to reconstruct
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Guidance-fused edit of a reconstructed input
    FuseEdit {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        semantic: PathBuf,
        #[arg(long, default_value_t = 0.75)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 28)]
        steps: usize,
        #[arg(long, default_value_t = 14)]
        off_steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Additive composition of several semantic adapters over one recon
    Compose {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        recon: PathBuf,
        /// Comma-separated adapter checkpoints
        #[arg(long, value_delimiter = ',')]
        semantic: Vec<PathBuf>,
        /// Comma-separated guidance strengths, one per adapter
        #[arg(long, value_delimiter = ',')]
        gammas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 28)]
        steps: usize,
        #[arg(long, default_value_t = 14)]
        off_steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train full method plus variants A/B/C and report matched metrics
    Ablate {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out_report: PathBuf,
    },
    /// Per-scale edit metrics over the held-out eval seeds
    Sweep {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        semantic: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 1.0, 1.5])]
        scales: Vec<f64>,
        #[arg(long)]
        out_report: PathBuf,
    },
    /// Run the schedule/adapter/fusion invariant suite
    Verify,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}

// ---------------------------------------------------------------- config

fn bad_key(section: &str, key: &str) -> Error {
    Error::InvalidArgument(format!("unknown {} key '{}'", section, key))
}

fn parse_val<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value '{}' for key '{}'", v, key)))
}

/// Spec files hold benchmark, seed, n_pairs, n_sources; flags override.
fn resolve_spec(
    path: Option<&Path>,
    benchmark: Option<&str>,
    seed: Option<u64>,
    n_pairs: Option<usize>,
    n_sources: Option<usize>,
) -> Result<(PairSpec, usize)> {
    let mut map = match path {
        Some(p) => io::load_kv(p)?,
        None => BTreeMap::new(),
    };
    let mut name = map.remove("benchmark").unwrap_or_else(|| "v1".into());
    let mut spec_seed: u64 = match map.remove("seed") {
        Some(v) => parse_val("seed", &v)?,
        None => 0,
    };
    let mut pairs: usize = match map.remove("n_pairs") {
        Some(v) => parse_val("n_pairs", &v)?,
        None => 3,
    };
    let mut sources: usize = match map.remove("n_sources") {
        Some(v) => parse_val("n_sources", &v)?,
        None => 2048,
    };
    if let Some(k) = map.keys().next() {
        return Err(bad_key("spec", k));
    }
    if let Some(b) = benchmark {
        name = b.to_string();
    }
    if let Some(s) = seed {
        spec_seed = s;
    }
    if let Some(n) = n_pairs {
        pairs = n;
    }
    if let Some(n) = n_sources {
        sources = n;
    }
    Ok((benchmark_by_name(&name, spec_seed, pairs)?, sources))
}

fn resolve_train(flags: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &flags.config {
        let map = io::load_kv(p)?;
        for (k, v) in &map {
            match k.as_str() {
                "steps" => cfg.steps = parse_val(k, v)?,
                "lr" => cfg.lr = parse_val(k, v)?,
                "batch_size" => cfg.batch_size = parse_val(k, v)?,
                "rank" => cfg.rank = parse_val(k, v)?,
                "seed" => cfg.seed = parse_val(k, v)?,
                "adapter_init_scale" => cfg.adapter_init_scale = parse_val(k, v)?,
                "beta" => cfg.loss = LossConfig::with_beta(parse_val(k, v)?)?,
                _ => return Err(bad_key("config", k)),
            }
        }
        // eta/lambda/content_target apply on top of any beta from the file.
        for (k, v) in &map {
            match k.as_str() {
                "eta" => cfg.loss.eta = parse_val(k, v)?,
                "lambda_sem" => cfg.loss.lambda_sem = parse_val(k, v)?,
                "content_target" => {
                    cfg.loss.content_target_mode = match v.as_str() {
                        "plain" => ContentTargetMode::PlainNoise,
                        "scaled" => ContentTargetMode::ScaledNoise,
                        _ => {
                            return Err(Error::InvalidArgument(format!(
                                "content_target '{}' (expected plain or scaled)",
                                v
                            )))
                        }
                    };
                    if cfg.loss.content_target_mode == ContentTargetMode::PlainNoise {
                        cfg.loss.content_schedule = NoiseSchedule::Standard;
                    }
                }
                _ => {}
            }
        }
    }
    if let Some(v) = flags.steps {
        cfg.steps = v;
    }
    if let Some(v) = flags.lr {
        cfg.lr = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.rank {
        cfg.rank = v;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.beta {
        let eta = flags.eta.unwrap_or(cfg.loss.eta);
        let lambda = flags.lambda_sem.unwrap_or(cfg.loss.lambda_sem);
        cfg.loss = LossConfig::with_beta(v)?;
        cfg.loss.eta = eta;
        cfg.loss.lambda_sem = lambda;
    } else {
        if let Some(v) = flags.eta {
            cfg.loss.eta = v;
        }
        if let Some(v) = flags.lambda_sem {
            cfg.loss.lambda_sem = v;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------- commands

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Pretrain {
            spec,
            benchmark,
            n_sources,
            train,
            out,
            out_log,
        } => {
            let (spec, sources_n) = resolve_spec(
                spec.as_deref(),
                benchmark.as_deref(),
                train.seed,
                None,
                n_sources,
            )?;
            let cfg = resolve_train(&train)?;
            let sources = make_sources(&spec, sources_n, PRETRAIN_STREAM)?;
            let (base, log) = pretrain_base(&sources, &cfg)?;
            io::save_base(&out, &base, Some(cfg.seed))?;
            if let Some(p) = out_log {
                io::atomic_write(&p, io::train_log_csv(&log).as_bytes())?;
            }
            println!("pretrained {} on {} sources -> {}", spec.name, sources_n, out.display());
            Ok(())
        }
        Cmd::MakePairs {
            spec,
            benchmark,
            seed,
            n_pairs,
            out,
        } => {
            let (spec, _) =
                resolve_spec(spec.as_deref(), benchmark.as_deref(), seed, n_pairs, None)?;
            let set = make_pairs(&spec)?;
            io::save_pairs(&out, &spec.name, spec.seed, &set)?;
            println!("{} pairs ({}) -> {}", set.pairs.len(), spec.name, out.display());
            Ok(())
        }
        Cmd::Train {
            base,
            pairs,
            train,
            out_content,
            out_semantic,
            out_log,
        } => {
            let base = io::load_base(&base)?;
            let (_, set) = io::load_pairs(&pairs)?;
            let cfg = resolve_train(&train)?;
            let (content, semantic, log) = train_paired(&base, &set.pairs, &cfg)?;
            io::save_adapter(&out_content, &content, Some(cfg.seed))?;
            io::save_adapter(&out_semantic, &semantic, Some(cfg.seed))?;
            if let Some(p) = out_log {
                io::atomic_write(&p, io::train_log_csv(&log).as_bytes())?;
            }
            println!(
                "trained {} steps -> {} + {}",
                cfg.steps,
                out_content.display(),
                out_semantic.display()
            );
            Ok(())
        }
        Cmd::Edit {
            base,
            semantic,
            content,
            scale,
            seed,
            steps,
            off_steps,
            out,
            pgm,
        } => {
            let base = io::load_base(&base)?;
            let semantic = io::load_adapter(&semantic)?;
            let content = content.map(|p| io::load_adapter(&p)).transpose()?;
            let cfg = SampleConfig {
                num_steps: steps,
                off_steps,
                scale,
                seed,
                ..Default::default()
            };
            let mut stack = EditStack::semantic_only(&semantic, scale);
            if let Some(c) = &content {
                stack.always.push((c, 1.0));
            }
            let x = generate(&base, &stack, &cfg)?;
            io::save_tensor(&out, &x)?;
            if let Some(p) = pgm {
                write_square_pgm(&p, &x)?;
            }
            println!("edit scale {} seed {} -> {}", scale, seed, out.display());
            Ok(())
        }
        Cmd::Recon {
            base,
            input,
            train,
            out,
        } => {
            let base = io::load_base(&base)?;
            let sample = io::load_tensor(&input)?;
            let cfg = resolve_train(&train)?;
            let (rec, _) = fit_reconstruction_lora(&base, &[sample], &cfg)?;
            io::save_adapter(&out, &rec, Some(cfg.seed))?;
            println!("reconstruction adapter -> {}", out.display());
            Ok(())
        }
        Cmd::FuseEdit {
            base,
            recon,
            semantic,
            gamma,
            scale,
            seed,
            steps,
            off_steps,
            out,
        } => {
            let base = io::load_base(&base)?;
            let rec = io::load_adapter(&recon)?;
            let sem = io::load_adapter(&semantic)?;
            let cfg = SampleConfig {
                num_steps: steps,
                off_steps,
                scale,
                gamma_real: gamma,
                seed,
            };
            let x = pairflow::sampler::generate_fused(&base, &rec, &[(&sem, scale)], &[gamma], &cfg)?;
            io::save_tensor(&out, &x)?;
            println!("fused edit gamma {} -> {}", gamma, out.display());
            Ok(())
        }
        Cmd::Compose {
            base,
            recon,
            semantic,
            gammas,
            seed,
            steps,
            off_steps,
            out,
        } => {
            let base = io::load_base(&base)?;
            let rec = io::load_adapter(&recon)?;
            let sems: Vec<_> = semantic
                .iter()
                .map(|p| io::load_adapter(p))
                .collect::<Result<_>>()?;
            let entries: Vec<(&_, f64)> = sems.iter().map(|s| (s, 1.0)).collect();
            let cfg = SampleConfig {
                num_steps: steps,
                off_steps,
                seed,
                ..Default::default()
            };
            let x = pairflow::sampler::generate_fused(&base, &rec, &entries, &gammas, &cfg)?;
            io::save_tensor(&out, &x)?;
            println!("composed {} edits -> {}", sems.len(), out.display());
            Ok(())
        }
        Cmd::Ablate {
            base,
            pairs,
            train,
            out_report,
        } => {
            let base = io::load_base(&base)?;
            let (name, set) = io::load_pairs(&pairs)?;
            let g = set
                .direction
                .ok_or_else(|| Error::InvalidArgument("pair set has no direction".into()))?;
            let cfg = resolve_train(&train)?;
            let report =
                ablation_table(&base, &set.pairs, &g, &cfg, &SampleConfig::default(), &name)?;
            io::atomic_write(&out_report, report.to_csv().as_bytes())?;
            println!("ablation report -> {}", out_report.display());
            Ok(())
        }
        Cmd::Sweep {
            base,
            semantic,
            pairs,
            scales,
            out_report,
        } => {
            let base = io::load_base(&base)?;
            let semantic = io::load_adapter(&semantic)?;
            let (name, set) = io::load_pairs(&pairs)?;
            let g = set
                .direction
                .ok_or_else(|| Error::InvalidArgument("pair set has no direction".into()))?;
            let report = scale_sweep(
                &base,
                None,
                &semantic,
                &g,
                &scales,
                EVAL_SEEDS,
                &SampleConfig::default(),
                &name,
                "full",
            )?;
            io::atomic_write(&out_report, report.to_csv().as_bytes())?;
            println!("sweep report -> {}", out_report.display());
            Ok(())
        }
        Cmd::Verify => verify(),
    }
}

fn write_square_pgm(path: &Path, x: &pairflow::Tensor) -> Result<()> {
    let side = (x.len() as f64).sqrt() as usize;
    if side * side != x.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot render length {} as a square image",
            x.len()
        )));
    }
    io::atomic_write(path, &io::to_pgm(x, side, side)?)
}

// ---------------------------------------------------------------- verify

fn verify() -> Result<()> {
    use pairflow::gradcheck::{finite_diff_grad, rel_err};
    use pairflow::losses::{content_loss, semantic_loss, PairedBatch};
    use pairflow::net::{predict_noise, AdapterStack, DenoiserParams, LoraAdapter, StackEntry};
    use pairflow::rng::{gauss, RngState};
    use pairflow::sampler::fused_noise;
    use pairflow::schedule::paired_delta;
    use pairflow::Tensor;

    let mut failures = 0;
    let mut check = |name: &str, ok: bool| {
        println!("{}: {}", name, if ok { "ok" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    let mut rng = RngState::new(42);

    // Paired differences: constant under the content-preserving path,
    // (1 - t + dt)-weighted under the standard path.
    let mut worst_cp = 0.0f64;
    let mut worst_std = 0.0f64;
    for _ in 0..10 {
        let x0a = gauss(&mut rng, &[6])?;
        let x0b = gauss(&mut rng, &[6])?;
        let eps = gauss(&mut rng, &[6])?;
        let diff = x0a.sub(&x0b)?;
        for i in 0..10 {
            for j in 0..10 {
                let t = (i + 1) as f64 / 10.0;
                let dt = t * j as f64 / 10.0;
                let cp = paired_delta(&x0a, &x0b, &eps, t, dt, NoiseSchedule::content_preserving(3.0)?)?;
                worst_cp = worst_cp.max(cp.max_abs_diff(&diff)?);
                let sd = paired_delta(&x0a, &x0b, &eps, t, dt, NoiseSchedule::Standard)?;
                let expect = diff.scale(1.0 - t + dt)?;
                worst_std = worst_std.max(sd.max_abs_diff(&expect)?);
            }
        }
    }
    check("paired-delta-cp-constant", worst_cp < 1e-12);
    check("paired-delta-standard-weight", worst_std < 1e-12);

    // Fresh adapters and scale-zero stacks are exact no-ops.
    let base = DenoiserParams::new_mlp(6, 16, 2, &mut rng);
    let fresh = LoraAdapter::init(&mut rng, &base, 2, 0.1)?;
    let mut tuned = fresh.clone();
    for (_, b) in &mut tuned.layers {
        for v in &mut b.data {
            *v = rng.next_gauss();
        }
    }
    let x = gauss(&mut rng, &[6])?;
    let plain = predict_noise(&base, &AdapterStack::empty(), &x, 0.4)?;
    let with_fresh = predict_noise(&base, &AdapterStack::single(&fresh), &x, 0.4)?;
    let mut zero_stack = AdapterStack::empty();
    zero_stack.push(StackEntry::with_scale(&tuned, 0.0));
    let with_zero = predict_noise(&base, &zero_stack, &x, 0.4)?;
    check("lora-noop-fresh", with_fresh.data() == plain.data());
    check("lora-noop-scale-zero", with_zero.data() == plain.data());

    // Fusion endpoints and affinity in gamma.
    let rec = tuned.clone();
    let mut sem = fresh.clone();
    for (_, b) in &mut sem.layers {
        for v in &mut b.data {
            *v = 0.3 * rng.next_gauss();
        }
    }
    let rec_stack = AdapterStack::single(&rec);
    let eps_rec = predict_noise(&base, &rec_stack, &x, 0.6)?;
    let mut both = AdapterStack::single(&rec);
    both.push(StackEntry::new(&sem));
    let eps_both = predict_noise(&base, &both, &x, 0.6)?;
    let f0 = fused_noise(&base, &rec, &sem, 1.0, &x, 0.6, 0.0)?;
    let f1 = fused_noise(&base, &rec, &sem, 1.0, &x, 0.6, 1.0)?;
    check("fusion-endpoint-gamma0", f0.data() == eps_rec.data());
    check("fusion-endpoint-gamma1", f1.data() == eps_both.data());
    let mut worst_affine = 0.0f64;
    for &g in &[0.25, 0.5, 0.75, 1.5, 2.0] {
        let fg = fused_noise(&base, &rec, &sem, 1.0, &x, 0.6, g)?;
        let expect = eps_rec.axpy(g, &eps_both.sub(&eps_rec)?)?;
        worst_affine = worst_affine.max(fg.max_abs_diff(&expect)?);
    }
    check("fusion-affine-in-gamma", worst_affine < 1e-12);

    // Spot gradient check for the two training losses.
    let cfg = LossConfig::with_beta(3.0)?;
    let x0a = gauss(&mut rng, &[6])?;
    let x0b = x0a.add(&gauss(&mut rng, &[6])?.scale(0.3)?)?;
    let eps0 = gauss(&mut rng, &[6])?;
    let batch = PairedBatch {
        x0a: vec![x0a],
        x0b: vec![x0b],
        eps0: vec![eps0],
        t: vec![0.45],
    };
    let mut worst_grad = 0.0f64;
    for which in 0..2 {
        let mut content = tuned.clone();
        content.scale = 0.7;
        let semantic = sem.clone();
        let analytic = if which == 0 {
            content_loss(&base, &content, &batch, &cfg)?.1.flat()
        } else {
            semantic_loss(&base, &content, &semantic, &batch, &cfg)?.1.flat()
        };
        let adapter = if which == 0 { &content } else { &semantic };
        let params = Tensor::from_vec(adapter.params_flat())?;
        let f = |p: &Tensor| -> Result<f64> {
            let mut a = adapter.clone();
            a.set_params_flat(p.data());
            Ok(if which == 0 {
                content_loss(&base, &a, &batch, &cfg)?.0
            } else {
                semantic_loss(&base, &content, &a, &batch, &cfg)?.0
            })
        };
        let numeric = finite_diff_grad(f, &params, 1e-5)?;
        worst_grad = worst_grad.max(rel_err(&analytic, numeric.data()));
    }
    check("loss-gradients-vs-finite-diff", worst_grad < 1e-4);

    if failures > 0 {
        return Err(Error::InvalidArgument(format!("{} checks failed", failures)));
    }
    println!("all checks passed");
    Ok(())
}
