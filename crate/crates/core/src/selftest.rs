//! Property checks shared by the `selftest` command and the acceptance run.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Composition, ScanPlans};
use crate::denet::{FfcBlock, DEFAULT_ALPHA};
use crate::error::Result;
use crate::hierarchy::{build_sort_plan, semantic_ranges, HierarchyMap, MapKind, Scorer};
use crate::losses::{soft_edge, total_loss, LossWeights, BCE_EPS};
use crate::metrics::{canny_batch, ssim as ssim_oracle};
use crate::model::{Model, ModelConfig};
use crate::nn::{uniform, Ctx, ParamStore};
use crate::pipeline::config::TrainConfig;
use crate::pipeline::dataset::Sample;
use crate::pipeline::enhance::enhance_sample;
use crate::pipeline::train::{train, window_means};
use crate::ssm::{random_weights, selective_scan, selective_scan_oracle};
use crate::tensor::fft::{fft2, irfft2_plane, rfft2_plane};
use crate::tensor::gradcheck::{self, rel_err, REL_FLOOR};
use crate::tensor::{DType, Graph, Tensor, Var};

/// Result of one named check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
    /// Runtime budget in seconds.
    pub limit: f64,
}

impl Check {
    pub fn ok(&self) -> bool {
        self.passed && self.seconds < self.limit
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {} [{:.2}s, limit {}s]",
            if self.ok() { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds,
            self.limit
        )
    }
}

fn timed(name: &str, limit: f64, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    Check {
        name: name.to_string(),
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
        limit,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_in(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Default block scans twice, vanilla SS2D four times, on a 32×32 input.
pub fn scan_count() -> Check {
    timed("scan count", 1.0, || {
        let img = rand_in(&mut rng(1), &[1, 3, 32, 32], 0.0, 1.0);
        let count = |composition| -> Result<(usize, usize)> {
            let cfg = ModelConfig {
                composition,
                denet: false,
                ..ModelConfig::default()
            };
            let model = Model::new(cfg)?;
            let params: ParamStore<f64> = model.init(&mut rng(2));
            let g = Graph::new();
            let ctx = Ctx::new(&g, &params, false);
            model.forward(&ctx, g.constant(img.clone()), &ScanPlans::identity(1, 32 * 32))?;
            Ok((g.scan_count(), composition.scans_per_block()))
        };
        let (bs, bs_block) = count(Composition::SequentialBs)?;
        let (van, van_block) = count(Composition::VanillaSs2d)?;
        let blocks = crate::backbone::NUM_BLOCKS;
        let ok = bs_block == 2 && van_block == 4 && bs == 2 * blocks && van == 4 * blocks;
        Ok((
            ok,
            format!("per block {bs_block} vs {van_block}; forward total {bs} vs {van}"),
        ))
    })
}

/// Graph scan against the scalar recurrence on random shapes.
pub fn scan_oracle(cases: usize, seed: u64) -> Check {
    timed("selective-scan oracle", 30.0, || {
        let mut r = rng(seed);
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let b = r.random_range(1..=2);
            let l = r.random_range(1..=256);
            let c = r.random_range(1..=4);
            let n = r.random_range(1..=8);
            let w = random_weights::<f64, _>(&mut r, c, n);
            let x = rand_in(&mut r, &[b, l, c], -1.0, 1.0);
            let got = selective_scan(&x, &w)?;
            let want = selective_scan_oracle(&x, &w)?;
            worst = worst.max(got.max_abs_diff(&want));
        }
        Ok((
            worst <= 1e-10,
            format!("{cases} cases, max abs diff {worst:.3e} (tol 1e-10)"),
        ))
    })
}

type OpFn = Box<dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>>;

/// Contracts `v` with a fixed random tensor so every output entry matters.
fn project<'g>(v: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let w = rand_in(&mut rng(seed), &v.shape(), -1.0, 1.0);
    v.mul(&v.graph().constant(w))?.sum()
}

/// Random values in `[lo, hi]` kept at least `gap` away from each `kink`.
fn away_from(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v = r.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

fn op_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> {
    let mut ru = rng(11);
    let mut u = |shape: &[usize]| rand_in(&mut ru, shape, -1.0, 1.0);
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> = vec![
        (
            "add",
            vec![u(&[2, 3, 4]), u(&[4])],
            Box::new(|_, v| project(v[0].add(&v[1])?, 1)),
        ),
        (
            "sub",
            vec![u(&[2, 3, 4]), u(&[3, 1])],
            Box::new(|_, v| project(v[0].sub(&v[1])?, 2)),
        ),
        (
            "mul",
            vec![u(&[2, 3, 4]), u(&[2, 1, 4])],
            Box::new(|_, v| project(v[0].mul(&v[1])?, 3)),
        ),
        ("neg", vec![u(&[3, 4])], Box::new(|_, v| project(v[0].neg()?, 4))),
        ("scale", vec![u(&[3, 4])], Box::new(|_, v| project(v[0].scale(1.7)?, 5))),
        (
            "add_scalar",
            vec![u(&[3, 4])],
            Box::new(|_, v| project(v[0].add_scalar(0.3)?, 6)),
        ),
        ("exp", vec![u(&[3, 4])], Box::new(|_, v| project(v[0].exp()?, 7))),
        (
            "sigmoid",
            vec![u(&[3, 4])],
            Box::new(|_, v| project(v[0].sigmoid()?, 8)),
        ),
        ("silu", vec![u(&[3, 4])], Box::new(|_, v| project(v[0].silu()?, 9))),
        (
            "softplus",
            vec![u(&[3, 4])],
            Box::new(|_, v| project(v[0].softplus()?, 10)),
        ),
        ("gelu", vec![u(&[3, 4])], Box::new(|_, v| project(v[0].gelu()?, 11))),
        ("tanh", vec![u(&[3, 4])], Box::new(|_, v| project(v[0].tanh()?, 12))),
        ("square", vec![u(&[3, 4])], Box::new(|_, v| project(v[0].square()?, 13))),
        (
            "matmul",
            vec![u(&[5, 4]), u(&[4, 3])],
            Box::new(|_, v| project(v[0].matmul(&v[1])?, 14)),
        ),
        (
            "matmul_batched",
            vec![u(&[2, 5, 4]), u(&[4, 3])],
            Box::new(|_, v| project(v[0].matmul(&v[1])?, 15)),
        ),
        (
            "conv2d",
            vec![u(&[2, 3, 6, 6]), u(&[4, 3, 3, 3]), u(&[4])],
            Box::new(|_, v| project(v[0].conv2d(&v[1], Some(&v[2]), 1, 1)?, 16)),
        ),
        (
            "conv2d_strided",
            vec![u(&[1, 2, 8, 8]), u(&[3, 2, 3, 3]), u(&[3])],
            Box::new(|_, v| project(v[0].conv2d(&v[1], Some(&v[2]), 2, 1)?, 17)),
        ),
        (
            "permute",
            vec![u(&[2, 3, 4])],
            Box::new(|_, v| project(v[0].permute(&[2, 0, 1])?, 18)),
        ),
        (
            "transpose",
            vec![u(&[2, 3, 4])],
            Box::new(|_, v| project(v[0].transpose(0, 2)?, 19)),
        ),
        (
            "reshape",
            vec![u(&[2, 3, 4])],
            Box::new(|_, v| project(v[0].reshape(&[6, 4])?, 20)),
        ),
        (
            "slice",
            vec![u(&[2, 5, 3])],
            Box::new(|_, v| project(v[0].slice(1, 1, 3)?, 21)),
        ),
        (
            "split",
            vec![u(&[2, 5, 3])],
            Box::new(|_, v| {
                let parts = v[0].split(1, &[2, 3])?;
                project(parts[0], 22)?.add(&project(parts[1], 23)?)
            }),
        ),
        (
            "concat",
            vec![u(&[2, 2, 3]), u(&[2, 4, 3])],
            Box::new(|g, v| project(g.concat(&[v[0], v[1]], 1)?, 24)),
        ),
        ("sum", vec![u(&[2, 3])], Box::new(|_, v| v[0].square()?.sum())),
        ("mean", vec![u(&[2, 3])], Box::new(|_, v| v[0].square()?.mean())),
        (
            "layer_norm",
            vec![u(&[2, 5, 6]), u(&[6]), u(&[6])],
            Box::new(|_, v| project(v[0].layer_norm(&v[1], &v[2])?, 25)),
        ),
        (
            "gather_tokens",
            vec![u(&[2, 7, 3])],
            Box::new(|_, v| {
                project(
                    v[0].gather_tokens(&[vec![3, 0, 6, 1, 5, 2, 4], vec![6, 5, 4, 3, 2, 1, 0]])?,
                    26,
                )
            }),
        ),
        (
            "scatter_tokens",
            vec![u(&[2, 7, 3])],
            Box::new(|_, v| {
                project(
                    v[0].scatter_tokens(&[vec![3, 0, 6, 1, 5, 2, 4], vec![1, 2, 3, 4, 5, 6, 0]])?,
                    27,
                )
            }),
        ),
        (
            "rfft2",
            vec![u(&[1, 2, 8, 8])],
            Box::new(|_, v| project(v[0].rfft2()?, 28)),
        ),
        (
            "irfft2",
            vec![u(&[1, 4, 8, 5])],
            Box::new(|_, v| project(v[0].irfft2(8)?, 29)),
        ),
        (
            "upsample2x",
            vec![u(&[1, 2, 3, 4])],
            Box::new(|_, v| project(v[0].upsample2x()?, 30)),
        ),
        (
            "pad_replicate",
            vec![u(&[1, 2, 3, 4])],
            Box::new(|_, v| project(v[0].pad_replicate(2)?, 31)),
        ),
    ];
    let mut r = rng(12);
    cases.push((
        "div",
        vec![rand_in(&mut r, &[2, 3, 4], -1.0, 1.0), rand_in(&mut r, &[4], 0.5, 1.5)],
        Box::new(|_, v| project(v[0].div(&v[1])?, 32)),
    ));
    cases.push((
        "log",
        vec![rand_in(&mut r, &[3, 4], 0.5, 2.0)],
        Box::new(|_, v| project(v[0].log()?, 33)),
    ));
    cases.push((
        "sqrt",
        vec![rand_in(&mut r, &[3, 4], 0.5, 2.0)],
        Box::new(|_, v| project(v[0].sqrt()?, 34)),
    ));
    cases.push((
        "abs",
        vec![away_from(&mut r, &[3, 4], -1.0, 1.0, &[0.0], 0.05)],
        Box::new(|_, v| project(v[0].abs()?, 35)),
    ));
    cases.push((
        "clamp",
        vec![away_from(&mut r, &[3, 4], -1.0, 1.0, &[-0.5, 0.5], 0.05)],
        Box::new(|_, v| project(v[0].clamp(-0.5, 0.5)?, 36)),
    ));
    let distinct: Vec<f64> = {
        let mut v: Vec<f64> = (0..32).map(|i| i as f64 / 32.0 - 0.5).collect();
        for i in (1..v.len()).rev() {
            v.swap(i, r.random_range(0..=i));
        }
        v
    };
    cases.push((
        "amax_trailing",
        vec![Tensor::new(&[2, 1, 4, 4], distinct).expect("32 values")],
        Box::new(|_, v| project(v[0].amax_trailing(2)?, 37)),
    ));
    cases.push((
        "selective_scan",
        vec![
            rand_in(&mut r, &[2, 6, 3], -1.0, 1.0),
            rand_in(&mut r, &[2, 6, 3], 0.1, 1.0),
            rand_in(&mut r, &[3, 4], -1.5, -0.1),
            rand_in(&mut r, &[2, 6, 4], -1.0, 1.0),
            rand_in(&mut r, &[2, 6, 4], -1.0, 1.0),
            rand_in(&mut r, &[3], -1.0, 1.0),
        ],
        Box::new(|g, v| project(g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])?, 38)),
    ));
    cases
}

pub const FD_STEP: f64 = 1e-5;

/// Central-difference check of every differentiable op.
pub fn op_gradients() -> Check {
    timed("gradients per op", 300.0, || {
        let mut worst = (0.0f64, "");
        let mut failed = Vec::new();
        for (name, inputs, f) in op_cases() {
            let r = gradcheck::check(&inputs, &f, FD_STEP, 1)?;
            if r.max_rel_err >= 1e-6 {
                failed.push(format!("{name}={:.2e}", r.max_rel_err));
            }
            if r.max_rel_err > worst.0 {
                worst = (r.max_rel_err, name);
            }
        }
        let detail = format!(
            "{} ops, worst rel err {:.3e} ({}) (tol 1e-6){}",
            op_cases().len(),
            worst.0,
            worst.1,
            if failed.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failed.join(", "))
            }
        );
        Ok((failed.is_empty(), detail))
    })
}

/// Parameters for gradient checks: initialised, then every tensor (including
/// the zero-initialised output layers) perturbed so no gradient is trivially 0.
pub fn perturbed_params(model: &Model, seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut p: ParamStore<f64> = model.init(&mut r);
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.05..0.05);
        }
    }
    p
}

fn e2e_loss(
    model: &Model,
    params: &ParamStore<f64>,
    img: &Tensor<f64>,
    gt: &Tensor<f64>,
    plans: &ScanPlans,
) -> Result<f64> {
    let g = Graph::new();
    let ctx = Ctx::new(&g, params, false);
    let out = model.forward(&ctx, g.constant(img.clone()), plans)?;
    let l = total_loss(out.output, g.constant(gt.clone()), &LossWeights::default(), None)?;
    Ok(l.total.value().item())
}

/// Backbone, detail network and total loss on a 1×3×16×16 input. Checks
/// `per_tensor` coordinates of every parameter tensor.
pub fn end_to_end_gradients(per_tensor: usize) -> Check {
    timed("gradients end-to-end", 300.0, || {
        let model = Model::new(ModelConfig::default())?;
        let params = perturbed_params(&model, 21);
        let mut r = rng(22);
        let img = rand_in(&mut r, &[1, 3, 16, 16], 0.05, 0.6);
        let gt = rand_in(&mut r, &[1, 3, 16, 16], 0.2, 0.9);
        let bmap = HierarchyMap::new(
            16,
            16,
            (0..256).map(|_| r.random_range(0.0..1.0)).collect(),
            MapKind::Brightness,
            "t",
        )?;
        let smap = HierarchyMap::new(
            16,
            16,
            (0..256).map(|_| r.random_range(0.0..1.0)).collect(),
            MapKind::Semantic,
            "t",
        )?;
        let plans = ScanPlans::from_maps(&[bmap], &[smap], 16, 16)?;

        let g = Graph::new();
        let ctx = Ctx::new(&g, &params, true);
        let out = model.forward(&ctx, g.constant(img.clone()), &plans)?;
        let l = total_loss(out.output, g.constant(gt.clone()), &LossWeights::default(), None)?;
        let grads = ctx.param_grads(&g.backward(l.total)?);

        let mut work = params.clone();
        let (mut worst, mut worst_at, mut checked) = (0.0f64, String::new(), 0usize);
        for name in params.names() {
            let n = params.get(&name).expect("listed").numel();
            let picks: Vec<usize> = (0..per_tensor.min(n)).map(|_| r.random_range(0..n)).collect();
            for i in picks {
                let orig = params.get(&name).expect("listed").data()[i];
                work.get_mut(&name).expect("listed").data_mut()[i] = orig + FD_STEP;
                let fp = e2e_loss(&model, &work, &img, &gt, &plans)?;
                work.get_mut(&name).expect("listed").data_mut()[i] = orig - FD_STEP;
                let fm = e2e_loss(&model, &work, &img, &gt, &plans)?;
                work.get_mut(&name).expect("listed").data_mut()[i] = orig;
                let numeric = (fp - fm) / (2.0 * FD_STEP);
                let analytic = grads.get(&name).expect("gradient").data()[i];
                let e = rel_err(analytic, numeric, REL_FLOOR);
                if e > worst {
                    worst = e;
                    worst_at = format!("{name}[{i}] (analytic {analytic:.6e}, numeric {numeric:.6e})");
                }
                checked += 1;
            }
        }
        Ok((
            worst < 1e-4,
            format!(
                "{checked} coordinates over {} tensors, worst rel err {worst:.3e} at {worst_at} (tol 1e-4)",
                params.len()
            ),
        ))
    })
}

/// Sort-plan round trips, constant maps and the semantic grading ranges.
pub fn permutations(maps: usize, seed: u64) -> Check {
    timed("permutations", 10.0, || {
        let mut r = rng(seed);
        let mut bad = 0usize;
        for k in 0..maps {
            let (h, w) = (r.random_range(1..=32), r.random_range(1..=32));
            // quantised scores on every other map to force ties
            let levels = if k % 2 == 0 { 0 } else { r.random_range(2..8) };
            let vals: Vec<f64> = (0..h * w)
                .map(|_| {
                    let v: f64 = r.random_range(0.0..1.0);
                    if levels > 0 {
                        (v * levels as f64).floor() / levels as f64
                    } else {
                        v
                    }
                })
                .collect();
            let map = HierarchyMap::new(h, w, vals.clone(), MapKind::Brightness, "t")?;
            let plan = build_sort_plan(&map)?;
            let seq: Vec<u64> = vals.iter().map(|v| v.to_bits()).collect();
            let sorted = plan.apply(&seq);
            let sorted_ok = sorted.windows(2).all(|p| f64::from_bits(p[0]) <= f64::from_bits(p[1]));
            if plan.undo(&sorted) != seq || plan.apply(&plan.undo(&seq)) != seq || !sorted_ok {
                bad += 1;
            }
        }
        let constant = HierarchyMap::constant(9, 13, 0.5, MapKind::Semantic, "t")?;
        let identity = build_sort_plan(&constant)?.is_identity();
        let ranges_ok = [0usize, 1, 2, 5].iter().all(|&n| {
            let got = semantic_ranges(n);
            got.len() == n + 1
                && got
                    .iter()
                    .enumerate()
                    .all(|(i, &(lo, hi))| lo == i as f64 / (n + 1) as f64 && hi == (i + 1) as f64 / (n + 1) as f64)
        });
        Ok((
            bad == 0 && identity && ranges_ok,
            format!(
                "{maps} maps, {bad} round-trip failures; constant map identity: {identity}; ranges exact: {ranges_ok}"
            ),
        ))
    })
}

/// FFT round trips, Parseval, and an identity spectral branch.
pub fn fft_ffc() -> Check {
    timed("fft/ffc", 10.0, || {
        let mut r = rng(31);
        let (mut trip, mut parseval) = (0.0f64, 0.0f64);
        for n in [8usize, 16] {
            for _ in 0..10 {
                let x: Vec<f64> = (0..n * n).map(|_| r.random_range(-1.0..1.0)).collect();
                let (mut re, mut im) = (x.clone(), vec![0.0; n * n]);
                fft2(&mut re, &mut im, n, n, false);
                let energy: f64 = x.iter().map(|v| v * v).sum();
                let spectral: f64 = re.iter().zip(&im).map(|(a, b)| a * a + b * b).sum::<f64>() / (n * n) as f64;
                parseval = parseval.max((energy - spectral).abs());
                fft2(&mut re, &mut im, n, n, true);
                let scale = (n * n) as f64;
                for (a, b) in re.iter().zip(&x) {
                    trip = trip.max((a / scale - b).abs());
                }
                for v in &im {
                    trip = trip.max((v / scale).abs());
                }
                let (sre, sim) = rfft2_plane(&x, n, n);
                for (a, b) in irfft2_plane(&sre, &sim, n, n).iter().zip(&x) {
                    trip = trip.max((a - b).abs());
                }
            }
        }
        let block = FfcBlock::new("ffc", 8, DEFAULT_ALPHA)?;
        let mut store = ParamStore::<f64>::new();
        block.init(&mut store, &mut r);
        block.set_identity_spectral(&mut store);
        let mut ident = 0.0f64;
        for n in [8usize, 16] {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &store, false);
            let x = uniform::<f64, _>(&mut r, &[2, 4, n, n], 1.0);
            let y = block.spectral_branch(&ctx, g.constant(x.clone()))?;
            ident = ident.max(y.value().max_abs_diff(&x));
        }
        Ok((
            trip < 1e-10 && parseval < 1e-9 && ident < 1e-10,
            format!("round trip {trip:.2e} (tol 1e-10), Parseval {parseval:.2e} (tol 1e-9), spectral identity {ident:.2e} (tol 1e-10)"),
        ))
    })
}

/// Default-weighted total against L1, SSIM and BCE recomputed by scalar loops.
pub fn loss_defaults() -> Check {
    timed("loss defaults", 5.0, || {
        let w = LossWeights::default();
        let mut r = rng(41);
        let pred = rand_in(&mut r, &[2, 3, 16, 16], 0.0, 1.0);
        let gt = rand_in(&mut r, &[2, 3, 16, 16], 0.0, 1.0);
        let g = Graph::new();
        let total = total_loss(g.constant(pred.clone()), g.constant(gt.clone()), &w, None)?
            .total
            .value()
            .item();

        let l1 = pred
            .data()
            .iter()
            .zip(gt.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / pred.numel() as f64;
        let ssim = ssim_oracle(&pred, &gt)?;
        let probs = soft_edge(g.constant(pred.clone()))?.value();
        let target = canny_batch(&gt)?;
        let bce = probs
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / probs.numel() as f64;
        let expect = 1.0 * l1 + 0.5 * (1.0 - ssim) + 0.1 * bce;
        let diff = (total - expect).abs();
        let weights = w.as_array();
        Ok((
            diff <= 1e-12 && weights == [1.0, 0.5, 0.1],
            format!("|total - recomputed| = {diff:.2e} (tol 1e-12); weights {weights:?}"),
        ))
    })
}

/// Trainable scalar count of the default model.
pub fn param_budget() -> Check {
    timed("parameter budget", 5.0, || {
        let n = Model::new(ModelConfig::default())?.param_count();
        Ok((n < 1_000_000, format!("{n} trainable scalars (limit 1000000)")))
    })
}

/// Smooth textured reference with a darkened, slightly tinted low-light copy.
pub fn synthetic_pair(k: usize, size: usize) -> Sample<f64> {
    let s = size as f64;
    let high = Tensor::from_fn(&[3, size, size], |i| {
        let (c, y, x) = (i / (size * size), (i / size) % size, i % size);
        let (fy, fx) = (y as f64 / s, x as f64 / s);
        let phase = k as f64 * 1.3 + c as f64 * 0.7;
        let wave = 0.25 * ((fx * 6.0 + phase).sin() * (fy * 4.0 - phase).cos());
        let block = if (x * 4 / size + y * 4 / size + k).is_multiple_of(2) {
            0.15
        } else {
            -0.1
        };
        (0.5 + wave + block).clamp(0.02, 0.98)
    });
    let low = high.map(|v| 0.12 * v.powf(1.3) + 0.01);
    Sample {
        name: format!("synthetic_{k}"),
        low,
        high,
        masks: None,
        score: None,
    }
}

/// Settings of the overfit experiment.
pub fn overfit_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        precision: DType::F64,
        ..TrainConfig::default()
    };
    cfg.model.channels = OVERFIT_CHANNELS;
    cfg
}

/// Channel width used by the overfit experiment.
pub const OVERFIT_CHANNELS: usize = 8;
/// Iterations per window when testing that the loss decreases.
pub const LOSS_WINDOW: usize = 100;

/// Overfit two synthetic 64×64 pairs. With `rerun`, trains again from the
/// same seed and requires a bit-identical log and weights; the time budget
/// covers both runs.
pub fn overfit(rerun: bool) -> Check {
    let cfg = overfit_config();
    let samples: Vec<Sample<f64>> = (0..2).map(|k| synthetic_pair(k, 64)).collect();
    timed("overfit", 600.0, || {
        let rep = train(&cfg, &samples, None)?;
        let windows = window_means(&rep.losses, LOSS_WINDOW);
        let decreasing = windows.windows(2).all(|w| w[1] < w[0]);
        let gain = rep.final_psnr - rep.baseline_psnr;
        let mut detail = format!(
            "{} iterations, PSNR {:.2} dB vs baseline {:.2} dB (gain {:.2}, need >= 5); window means {:?}",
            cfg.iterations,
            rep.final_psnr,
            rep.baseline_psnr,
            gain,
            windows.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        );
        let mut ok = gain >= 5.0 && decreasing;
        if rerun {
            let b = train(&cfg, &samples, None)?;
            let same_log = rep.log == b.log
                && rep
                    .losses
                    .iter()
                    .map(|v| v.to_bits())
                    .eq(b.losses.iter().map(|v| v.to_bits()));
            let same_params = rep.params == b.params;
            ok &= same_log && same_params;
            detail.push_str(&format!(
                "; rerun log identical: {same_log}, weights identical: {same_params}"
            ));
        }
        Ok((ok, detail))
    })
}

/// Every composition and both built-in scorers train and enhance end to end;
/// the two sequential orders give different outputs.
pub fn ablations(iterations: usize) -> Check {
    timed("ablations", 600.0, || {
        let samples: Vec<Sample<f64>> = (0..2).map(|k| synthetic_pair(k, 64)).collect();
        let mut runs = Vec::new();
        let mut variants: Vec<(Composition, Scorer)> = Composition::ALL.iter().map(|&c| (c, Scorer::Luma)).collect();
        variants.push((Composition::SequentialBs, Scorer::Histogram));
        for (composition, scorer) in variants {
            let mut cfg = overfit_config();
            cfg.iterations = iterations;
            cfg.log_every = iterations;
            cfg.model.composition = composition;
            cfg.model.scorer = scorer;
            let rep = train(&cfg, &samples, None)?;
            let model = Model::new(cfg.model.clone())?;
            let e = enhance_sample(&model, &rep.params, &samples[0])?;
            if !e.image.is_finite() {
                return Ok((
                    false,
                    format!("{}/{} produced non-finite output", composition.name(), scorer.name()),
                ));
            }
            runs.push(format!("{}/{}", composition.name(), scorer.name()));
        }

        // both orders share parameter names, so one store drives both
        let bs = Model::new(ModelConfig {
            composition: Composition::SequentialBs,
            ..ModelConfig::default()
        })?;
        let sb = Model::new(ModelConfig {
            composition: Composition::SequentialSb,
            ..ModelConfig::default()
        })?;
        let params = perturbed_params(&bs, 51);
        let mut r = rng(52);
        let img = rand_in(&mut r, &[1, 3, 16, 16], 0.0, 1.0);
        let bmap = HierarchyMap::new(
            16,
            16,
            (0..256).map(|_| r.random_range(0.0..1.0)).collect(),
            MapKind::Brightness,
            "t",
        )?;
        let smap = HierarchyMap::new(
            16,
            16,
            (0..256).map(|_| r.random_range(0.0..1.0)).collect(),
            MapKind::Semantic,
            "t",
        )?;
        let plans = ScanPlans::from_maps(&[bmap], &[smap], 16, 16)?;
        let forward = |m: &Model| -> Result<Tensor<f64>> {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &params, false);
            Ok((*m.forward(&ctx, g.constant(img.clone()), &plans)?.output.value()).clone())
        };
        let diff = forward(&bs)?.max_abs_diff(&forward(&sb)?);
        Ok((
            diff > 1e-6,
            format!(
                "{} runs of {iterations} iterations ok ({}); BS vs SB max output diff {diff:.3e}",
                runs.len(),
                runs.join(", ")
            ),
        ))
    })
}

/// Fast checks run by the `selftest` command.
pub fn quick() -> Vec<Check> {
    vec![
        scan_count(),
        scan_oracle(100, 7),
        op_gradients(),
        end_to_end_gradients(2),
        permutations(1000, 8),
        fft_ffc(),
        loss_defaults(),
        param_budget(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_pair_is_dark_and_bounded() {
        let s = synthetic_pair(0, 32);
        assert!(s
            .low
            .data()
            .iter()
            .zip(s.high.data())
            .all(|(l, h)| l < h && *h <= 1.0 && *l >= 0.0));
    }

    #[test]
    fn check_line_reports_budget() {
        let c = Check {
            name: "x".into(),
            passed: true,
            detail: "d".into(),
            seconds: 2.0,
            limit: 1.0,
        };
        assert!(c.line().starts_with("FAIL x"));
    }
}
