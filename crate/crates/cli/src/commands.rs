//! Command implementations behind the CLI surface.

use std::path::{Path, PathBuf};

use cyclediff_core::metrics::{mae, mc_consistency, mssim_default, psnr, DATA_RANGE};
use cyclediff_core::phantom::PhantomSpec;
use cyclediff_core::volume::Volume;

use crate::ckpt;
use crate::config::{ExperimentConfig, SamplerKind};
use crate::dataset;
use crate::error::{AppError, AppResult};
use crate::report::{self, CaseMetrics, ConsistencyRow};
use crate::samplers::{Direction, VolumeSampler};
use crate::trace;
use crate::train;
use crate::vvol;

pub struct GenDataArgs {
    pub out: PathBuf,
    pub count: usize,
    pub seed: u64,
    pub extents: Option<[usize; 3]>,
    pub noise_sigma: Option<f32>,
    pub bias_amplitude: Option<f32>,
    pub ellipsoids: Option<[usize; 2]>,
}

pub fn cmd_gen_data(args: &GenDataArgs) -> AppResult<()> {
    let mut spec = PhantomSpec::default();
    if let Some(e) = args.extents {
        spec.extents = e;
    }
    if let Some(s) = args.noise_sigma {
        spec.noise_sigma = s;
    }
    if let Some(a) = args.bias_amplitude {
        spec.bias_amplitude = a;
    }
    if let Some(r) = args.ellipsoids {
        spec.ellipsoids = r;
    }
    if args.count == 0 {
        eprintln!("warning: generating an empty dataset (count = 0)");
    }
    let manifest = dataset::generate_dataset(&args.out, args.count, &spec, args.seed)?;
    eprintln!(
        "wrote {} case(s) + manifest to {}",
        manifest.count,
        args.out.display()
    );
    Ok(())
}

pub fn cmd_train(config_path: &Path, resume: bool) -> AppResult<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    cfg.prepare_paths()?;
    let pairs = dataset::load_pairs(&cfg.paths.data_dir)?;
    let final_ckpt = train::run_training(&cfg, &pairs, resume)?;
    eprintln!("final checkpoint: {}", final_ckpt.display());
    Ok(())
}

pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub direction: Direction,
    pub sampler: SamplerKind,
    pub runs: usize,
    pub steps: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub save_trace: bool,
}

pub fn cmd_sample(args: &SampleArgs) -> AppResult<()> {
    let bundle = ckpt::load_bundle(&args.checkpoint)?;
    let sampler = VolumeSampler::new(bundle, args.steps)?;
    let source = vvol::read_volume(&args.input).map_err(|e| AppError::config(e.to_string()))?;
    std::fs::create_dir_all(&args.out)?;

    let keep_traces = args.save_trace && args.sampler == SamplerKind::Cycle;
    let (mean, runs, traces) = sampler.mc_sample_volume(
        &source,
        args.direction,
        args.sampler,
        args.runs,
        args.seed,
        keep_traces,
    )?;
    for (r, v) in runs.iter().enumerate() {
        vvol::write_volume(v, &args.out.join(format!("run_{r}.vvol")))
            .map_err(|e| AppError::config(e.to_string()))?;
    }
    vvol::write_volume(&mean, &args.out.join("mean.vvol"))
        .map_err(|e| AppError::config(e.to_string()))?;
    if keep_traces {
        for (r, per_run) in traces.iter().enumerate() {
            for wt in per_run {
                trace::write_trace(
                    &wt.trace,
                    &args.out.join(format!("run_{r}_win{:03}.ztrc", wt.window)),
                )?;
            }
        }
    }
    eprintln!(
        "wrote {} run(s) + mean to {}",
        runs.len(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_evaluate(pred_dir: &Path, truth_dir: &Path, out_csv: &Path) -> AppResult<()> {
    let mut names: Vec<String> = std::fs::read_dir(truth_dir)
        .map_err(|e| AppError::config(format!("{}: {e}", truth_dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().to_string())
        .filter(|n| n.ends_with(".vvol"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(AppError::config(format!(
            "no .vvol truth volumes in {}",
            truth_dir.display()
        )));
    }
    let missing: Vec<String> = names
        .iter()
        .filter(|n| !pred_dir.join(n).exists())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(AppError::config(format!(
            "missing prediction(s): {}",
            missing.join(", ")
        )));
    }
    let mut rows = Vec::with_capacity(names.len());
    for n in &names {
        let truth = vvol::read_volume(&truth_dir.join(n)).map_err(|e| AppError::config(e.to_string()))?;
        let pred = vvol::read_volume(&pred_dir.join(n)).map_err(|e| AppError::config(e.to_string()))?;
        rows.push(CaseMetrics {
            case: n.trim_end_matches(".vvol").to_string(),
            mae: mae(&pred, &truth)?,
            psnr: psnr(&pred, &truth, DATA_RANGE)?,
            mssim: mssim_default(&pred, &truth)?,
        });
    }
    if let Some(parent) = out_csv.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    report::write_evaluate_csv(out_csv, &rows)?;
    eprintln!("wrote {} case row(s) to {}", rows.len(), out_csv.display());
    Ok(())
}

pub struct ConsistencyArgs {
    pub checkpoint: PathBuf,
    pub cases_dir: PathBuf,
    pub direction: Direction,
    pub samplers: Vec<SamplerKind>,
    pub runs: usize,
    pub steps: usize,
    pub seed: u64,
    pub limit: Option<usize>,
    pub out: PathBuf,
}

pub fn sampler_name(kind: SamplerKind) -> &'static str {
    match kind {
        SamplerKind::Cycle => "cycle",
        SamplerKind::Ancestral => "ancestral",
        SamplerKind::Ddim => "ddim",
    }
}

pub fn cmd_consistency(args: &ConsistencyArgs) -> AppResult<()> {
    if args.runs < 2 {
        return Err(AppError::config("consistency needs at least two runs"));
    }
    let bundle = ckpt::load_bundle(&args.checkpoint)?;
    let sampler = VolumeSampler::new(bundle, args.steps)?;
    let mut pairs = dataset::load_pairs(&args.cases_dir)?;
    if let Some(limit) = args.limit {
        pairs.truncate(limit);
    }
    std::fs::create_dir_all(&args.out)?;

    let mut rows = Vec::new();
    for pair in &pairs {
        let (source, truth): (&Volume, &Volume) = match args.direction {
            Direction::A2B => (&pair.a, &pair.b),
            Direction::B2A => (&pair.b, &pair.a),
        };
        for &kind in &args.samplers {
            let case_seed = cyclediff_core::rng::derive_seed(
                args.seed,
                &[pair.name.len() as u64, hash_name(&pair.name), kind as u64],
            );
            let (_, runs, _) =
                sampler.mc_sample_volume(source, args.direction, kind, args.runs, case_seed, false)?;
            let report = mc_consistency(&runs, truth)?;
            eprintln!(
                "{} / {}: uncertainty {:.5}, inconsistency {:.6}, mssim {:.4}",
                pair.name,
                sampler_name(kind),
                report.uncertainty,
                report.inconsistency,
                report.mssim
            );
            rows.push(ConsistencyRow {
                case: pair.name.clone(),
                sampler: sampler_name(kind).to_string(),
                report,
            });
        }
    }
    report::write_consistency_csv(&args.out, &rows)?;
    eprintln!("wrote consistency report to {}", args.out.display());
    Ok(())
}

fn hash_name(name: &str) -> u64 {
    name.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}
