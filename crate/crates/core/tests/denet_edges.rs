use bsmamba::hierarchy::luma;
use bsmamba::metrics::{canny_reference, edge_f1};
use bsmamba::model::Model;
use bsmamba::pipeline::dataset::Sample;
use bsmamba::pipeline::enhance::enhance_sample;
use bsmamba::pipeline::train::train;
use bsmamba::selftest::{overfit_config, synthetic_pair};
use bsmamba::tensor::Tensor;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn edges(img: &Tensor<f64>) -> bsmamba::metrics::EdgeMap {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    canny_reference(&luma(img).unwrap(), h, w).unwrap()
}

fn mean_f1(denet: bool, samples: &[Sample<f64>]) -> f64 {
    let mut cfg = overfit_config();
    cfg.model.denet = denet;
    let rep = train(&cfg, samples, None).unwrap();
    let model = Model::new(cfg.model).unwrap();
    let f1: f64 = samples
        .iter()
        .map(|s| {
            let out = enhance_sample(&model, &rep.params, s).unwrap().image;
            edge_f1(&edges(&out), &edges(&s.high)).unwrap()
        })
        .sum();
    f1 / samples.len() as f64
}

#[test]
fn detail_network_keeps_edges_after_overfit() {
    let samples: Vec<Sample<f64>> = (0..2).map(|k| synthetic_pair(k, 64)).collect();
    let with = mean_f1(true, &samples);
    let without = mean_f1(false, &samples);
    eprintln!("edge F1 with detail network {with:.4}, without {without:.4}");
    assert!(with >= without, "with {with} < without {without}");
}
