//! Training loop.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::total_loss;
use crate::metrics::{canny_batch, psnr};
use crate::model::{plans_for, stack, Model};
use crate::nn::{Ctx, ParamStore};
use crate::pipeline::augment::augment;
use crate::pipeline::checkpoint;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::dataset::{PairedDataset, Sample};
use crate::pipeline::enhance::{enhance_sample, sample_maps};
use crate::pipeline::optim::{Adam, MultiStep};
use crate::tensor::{DType, Graph, Real};

/// Means over the `log_every` iterations ending at `iter`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub loss: f64,
    pub psnr: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    pub log: Vec<LogEntry>,
    /// Total loss of every iteration.
    pub losses: Vec<f64>,
    /// Mean PSNR of the low-light inputs against their references.
    pub baseline_psnr: f64,
    /// Mean PSNR of the trained model on the full training pairs.
    pub final_psnr: f64,
    pub params: ParamStore<T>,
}

/// Mean of `v` over consecutive windows of `n`; a short tail is dropped.
pub fn window_means(v: &[f64], n: usize) -> Vec<f64> {
    v.chunks_exact(n.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

fn mean_psnr(pairs: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let v = pairs.collect::<Result<Vec<_>>>()?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}

/// Trains from a fresh initialisation drawn from `cfg.seed`. Checkpoints go
/// to `out` at each milestone and at the end.
pub fn train<T: Real>(cfg: &TrainConfig, samples: &[Sample<T>], out: Option<&Path>) -> Result<TrainReport<T>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("no training pairs".into()));
    }
    let model = Model::new(cfg.model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params: ParamStore<T> = model.init(&mut rng);
    let mut adam = Adam::<T>::default();
    let sched = MultiStep {
        base: cfg.learning_rate,
        total: cfg.iterations,
        milestones: cfg.milestones.clone(),
        decay: cfg.decay,
    };
    let save_at = sched.milestone_iters();
    let crop = cfg.crop_size;
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut psnrs = Vec::with_capacity(cfg.iterations);
    let mut log = Vec::new();

    for it in 0..cfg.iterations {
        let mut lows = Vec::with_capacity(cfg.batch_size);
        let mut highs = Vec::with_capacity(cfg.batch_size);
        let mut maps = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = &samples[rng.random_range(0..samples.len())];
            let a = augment(s, &mut rng, crop)?;
            maps.push(sample_maps(
                &a.low,
                cfg.model.scorer,
                a.masks.as_ref(),
                a.score.as_ref(),
            )?);
            lows.push(a.low);
            highs.push(a.high);
        }
        let plans = plans_for(&maps, crop, crop)?;
        let low = stack(&lows)?;
        let high = stack(&highs)?;
        let edges = canny_batch(&high)?;

        let g = Graph::new();
        let ctx = Ctx::new(&g, &params, true);
        let res = model.forward(&ctx, g.constant(low), &plans)?;
        let gt = g.constant(high.clone());
        let parts = total_loss(res.output, gt, &cfg.loss_weights, Some(&edges))?;
        let loss = parts.total.value().item().to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {it}")));
        }
        let grads = g.backward(parts.total)?;
        let pg = ctx.param_grads(&grads);
        let batch_psnr = psnr(&res.output.value(), &high, 1.0)?;
        drop(ctx);
        let lr = sched.lr(it);
        adam.step(&mut params, &pg, lr)?;

        losses.push(loss);
        psnrs.push(batch_psnr);
        if (it + 1) % cfg.log_every == 0 || it + 1 == cfg.iterations {
            let n = (it % cfg.log_every) + 1;
            let mean = |v: &[f64]| v[v.len() - n..].iter().sum::<f64>() / n as f64;
            let e = LogEntry {
                iter: it + 1,
                loss: mean(&losses),
                psnr: mean(&psnrs),
                lr,
            };
            log::info!("iter {} loss {:.6} psnr {:.3} lr {:.3e}", e.iter, e.loss, e.psnr, e.lr);
            log.push(e);
        }
        if let Some(p) = out.filter(|_| save_at.contains(&(it + 1)) && it + 1 < cfg.iterations) {
            checkpoint::save(p, &cfg.model, &params)?;
        }
    }
    if let Some(p) = out {
        checkpoint::save(p, &cfg.model, &params)?;
    }

    let baseline_psnr = mean_psnr(samples.iter().map(|s| psnr(&s.low, &s.high, 1.0)))?;
    let final_psnr = mean_psnr(
        samples
            .iter()
            .map(|s| enhance_sample(&model, &params, s).and_then(|e| psnr(&e.image, &s.high, 1.0))),
    )?;
    Ok(TrainReport {
        log,
        losses,
        baseline_psnr,
        final_psnr,
        params,
    })
}

/// Summary of a run independent of the working precision.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub log: Vec<LogEntry>,
    pub losses: Vec<f64>,
    pub baseline_psnr: f64,
    pub final_psnr: f64,
}

impl<T> From<TrainReport<T>> for RunSummary {
    fn from(r: TrainReport<T>) -> Self {
        RunSummary {
            log: r.log,
            losses: r.losses,
            baseline_psnr: r.baseline_psnr,
            final_psnr: r.final_psnr,
        }
    }
}

/// Loads `data` and trains in the precision named by `cfg`.
pub fn train_dataset(cfg: &TrainConfig, data: &PairedDataset, out: Option<&Path>) -> Result<RunSummary> {
    match cfg.precision {
        DType::F32 => Ok(train::<f32>(cfg, &data.load_samples()?, out)?.into()),
        DType::F64 => Ok(train::<f64>(cfg, &data.load_samples()?, out)?.into()),
    }
}
