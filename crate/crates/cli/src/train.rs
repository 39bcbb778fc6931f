//! Two-phase training loop over a phantom-pair dataset.
//!
//! Each epoch draws a fixed number of random co-registered patches per case
//! (same origin in both modalities), shuffles them, batches them, and runs
//! one optimizer step per batch. The first `phase1_epochs` train the two
//! networks independently; later epochs add the latent-exchange cycle term.
//! All draws are keyed by (seed, epoch, indices), so a resumed run continues
//! on the same stream and a rerun reproduces files bit for bit.

use std::io::Write;
use std::path::{Path, PathBuf};

use cyclediff_core::denoiser::Denoiser;
use cyclediff_core::loss::{DualTrainer, StepLosses, TrainPhase};
use cyclediff_core::rng::{self, derive_seed};
use cyclediff_core::schedule::DiffusionSchedule;
use cyclediff_core::Tensor;

use crate::ckpt;
use crate::config::ExperimentConfig;
use crate::dataset::CasePair;
use crate::error::{AppError, AppResult};

/// Stacks `[1, 1, D, H, W]` patch tensors into one `[B, 1, D, H, W]` batch.
fn stack(patches: &[Tensor<f32>]) -> Tensor<f32> {
    let per = patches[0].shape().to_vec();
    let mut shape = per.clone();
    shape[0] = patches.len();
    let mut data = Vec::with_capacity(patches.iter().map(|p| p.numel()).sum());
    for p in patches {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&shape, data).expect("stacked batch shape")
}

fn random_origin(rng: &mut rng::ChaCha8Rng, vol: [usize; 3], patch: [usize; 3]) -> [usize; 3] {
    let mut o = [0usize; 3];
    for a in 0..3 {
        o[a] = rng::uniform_usize(rng, 0, vol[a] - patch[a]);
    }
    o
}

fn crop_pair(pair: &CasePair, origin: [usize; 3], patch: [usize; 3]) -> AppResult<(Tensor<f32>, Tensor<f32>)> {
    let a = pair.a.crop(origin, patch)?;
    let b = pair.b.crop(origin, patch)?;
    Ok((a.to_tensor(), b.to_tensor()))
}

/// Builds a fresh trainer from the configuration.
pub fn fresh_trainer(cfg: &ExperimentConfig) -> AppResult<DualTrainer<f32>> {
    let schedule = DiffusionSchedule::new(cfg.schedule, cfg.train.n_steps)?;
    let net_a = Denoiser::init(cfg.denoiser.clone(), derive_seed(cfg.seed, &[0xA]))?;
    let net_b = Denoiser::init(cfg.denoiser.clone(), derive_seed(cfg.seed, &[0xB]))?;
    Ok(DualTrainer::new(
        net_a,
        net_b,
        schedule,
        cfg.train.clone(),
        cfg.optimizer.learning_rate,
        cfg.optimizer.weight_decay,
    )?)
}

/// Mean losses over one epoch.
#[derive(Default)]
struct EpochLosses {
    sums: StepLosses,
    steps: usize,
}

impl EpochLosses {
    fn push(&mut self, l: &StepLosses) {
        self.sums.l1_a += l.l1_a;
        self.sums.vlb_a += l.vlb_a;
        self.sums.l1_b += l.l1_b;
        self.sums.vlb_b += l.vlb_b;
        self.sums.cycle_a += l.cycle_a;
        self.sums.cycle_b += l.cycle_b;
        self.sums.total += l.total;
        self.steps += 1;
    }

    fn mean(&self) -> StepLosses {
        let n = self.steps.max(1) as f64;
        StepLosses {
            l1_a: self.sums.l1_a / n,
            vlb_a: self.sums.vlb_a / n,
            l1_b: self.sums.l1_b / n,
            vlb_b: self.sums.vlb_b / n,
            cycle_a: self.sums.cycle_a / n,
            cycle_b: self.sums.cycle_b / n,
            total: self.sums.total / n,
        }
    }
}

pub const LOG_SCHEMA: &str = "# cyclediff training-log schema v1";
pub const LOG_HEADER: &str = "epoch,phase,l1_a,vlb_a,l1_b,vlb_b,cycle_a,cycle_b,total";

/// Runs (or resumes) training; returns the path of the final checkpoint.
pub fn run_training(cfg: &ExperimentConfig, pairs: &[CasePair], resume: bool) -> AppResult<PathBuf> {
    let latest = cfg.paths.checkpoint_dir.join("latest.ckpt");
    let (mut trainer, start_epoch) = if resume && latest.exists() {
        let (t, done) = ckpt::load_trainer(&latest)?;
        if t.net_a.config != cfg.denoiser {
            return Err(AppError::checkpoint(
                "resume: checkpoint architecture differs from configuration",
            ));
        }
        (t, done)
    } else {
        (fresh_trainer(cfg)?, 0)
    };

    let patch = cfg.train.patch;
    for p in pairs {
        let e = p.a.extents();
        if patch[0] > e[0] || patch[1] > e[1] || patch[2] > e[2] {
            return Err(AppError::config(format!(
                "patch {patch:?} does not fit case {} ({:?})",
                p.name, e
            )));
        }
    }

    let log_path = cfg.paths.report_dir.join("training_log.csv");
    let mut log = open_log(&log_path)?;

    for epoch in start_epoch..cfg.train.total_epochs {
        let phase = cfg.train.phase(epoch);
        let t0 = std::time::Instant::now();

        // draw patch jobs: (case index, origin) per (case, draw)
        let mut jobs: Vec<(usize, [usize; 3])> = Vec::new();
        for (ci, pair) in pairs.iter().enumerate() {
            let mut r = rng::stream(cfg.seed, &[0xA1, epoch as u64, ci as u64]);
            for _ in 0..cfg.patches_per_case {
                jobs.push((ci, random_origin(&mut r, pair.a.extents(), patch)));
            }
        }
        // deterministic shuffle
        let mut shuffle_rng = rng::stream(cfg.seed, &[0xA2, epoch as u64]);
        for i in (1..jobs.len()).rev() {
            let j = rng::uniform_usize(&mut shuffle_rng, 0, i);
            jobs.swap(i, j);
        }

        let mut epoch_losses = EpochLosses::default();
        for (step, chunk) in jobs.chunks(cfg.train.batch_size).enumerate() {
            let mut pa = Vec::with_capacity(chunk.len());
            let mut pb = Vec::with_capacity(chunk.len());
            for &(ci, origin) in chunk {
                let (a, b) = crop_pair(&pairs[ci], origin, patch)?;
                pa.push(a);
                pb.push(b);
            }
            let batch_a = stack(&pa);
            let batch_b = stack(&pb);
            let step_seed = derive_seed(cfg.seed, &[0xA3, epoch as u64, step as u64]);
            let losses = trainer.train_step(&batch_a, &batch_b, phase, step_seed)?;
            epoch_losses.push(&losses);
        }

        let m = epoch_losses.mean();
        let phase_name = match phase {
            TrainPhase::Independent => "independent",
            TrainPhase::Joint => "joint",
        };
        writeln!(
            log,
            "{epoch},{phase_name},{},{},{},{},{},{},{}",
            m.l1_a, m.vlb_a, m.l1_b, m.vlb_b, m.cycle_a, m.cycle_b, m.total
        )?;
        log.flush()?;
        eprintln!(
            "epoch {epoch} ({phase_name}): total {:.4}, l1 {:.4}/{:.4}, cycle {:.4}/{:.4} [{:.1}s]",
            m.total,
            m.l1_a,
            m.l1_b,
            m.cycle_a,
            m.cycle_b,
            t0.elapsed().as_secs_f64()
        );

        let done = epoch + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.train.total_epochs
        {
            ckpt::save_trainer(
                &cfg.paths.checkpoint_dir.join(format!("epoch_{done:04}.ckpt")),
                &trainer,
                cfg.schedule,
                done,
            )?;
        }
    }

    ckpt::save_trainer(&latest, &trainer, cfg.schedule, cfg.train.total_epochs)?;
    Ok(latest)
}

fn open_log(path: &Path) -> AppResult<std::fs::File> {
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if new {
        writeln!(f, "{LOG_SCHEMA}")?;
        writeln!(f, "{LOG_HEADER}")?;
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_concatenates_leading_axis() {
        let a = Tensor::from_fn(&[1, 1, 2, 2, 2], |i| i as f32);
        let b = Tensor::from_fn(&[1, 1, 2, 2, 2], |i| 100.0 + i as f32);
        let s = stack(&[a, b]);
        assert_eq!(s.shape(), &[2, 1, 2, 2, 2]);
        assert_eq!(s.data()[0], 0.0);
        assert_eq!(s.data()[8], 100.0);
    }

    #[test]
    fn origins_are_within_bounds_and_deterministic() {
        let mut r1 = rng::stream(5, &[1]);
        let mut r2 = rng::stream(5, &[1]);
        for _ in 0..50 {
            let o1 = random_origin(&mut r1, [64, 64, 16], [32, 32, 8]);
            let o2 = random_origin(&mut r2, [64, 64, 16], [32, 32, 8]);
            assert_eq!(o1, o2);
            assert!(o1[0] <= 32 && o1[1] <= 32 && o1[2] <= 8);
        }
    }

    #[test]
    fn crop_pair_uses_same_origin_for_both_modalities() {
        let spec = cyclediff_core::phantom::PhantomSpec {
            extents: [16, 16, 8],
            noise_sigma: 0.0,
            bias_amplitude: 0.0,
            seed: 9,
            ..Default::default()
        };
        let (a, b, m) = cyclediff_core::phantom::generate_phantom_pair(&spec).unwrap();
        let pair = CasePair {
            name: "t".into(),
            a,
            b,
        };
        let (ta, tb) = crop_pair(&pair, [2, 3, 1], [8, 8, 4]).unwrap();
        // noise-free phantoms let us verify via the class mask
        let mc = m.crop([2, 3, 1], [8, 8, 4]).unwrap();
        for i in 0..ta.numel() {
            let cls = mc.data()[i] as usize;
            assert_eq!(ta.data()[i], spec.intensities_a[cls]);
            assert_eq!(tb.data()[i], spec.intensities_b[cls]);
        }
    }
}
