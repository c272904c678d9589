//! Straight-line reference implementations over raw parameter arrays.

use mdmoe::data::Example;
use mdmoe::encoder::Encoder;
use mdmoe::metric::ConfidenceKind;
use mdmoe::model::Model;

fn features(ex: &Example) -> (&[f64], usize) {
    match ex {
        Example::Vector { features, label } => (features, label.expect("labeled")),
        _ => panic!("flat oracle handles vector input only"),
    }
}

pub fn encode(model: &Model, x: &[f64]) -> Vec<f64> {
    let Encoder::Mlp(enc) = &model.params.encoder else {
        panic!("flat oracle handles the MLP encoder only")
    };
    (0..enc.w1.rows())
        .map(|i| {
            let mut s = enc.b1[(0, i)];
            for (j, xj) in x.iter().enumerate() {
                s += enc.w1[(i, j)] * xj;
            }
            s.max(0.0)
        })
        .collect()
}

pub fn posterior(model: &Model, l: usize, h: &[f64]) -> Vec<f64> {
    let e = &model.params.experts[l];
    let z: Vec<f64> = (0..e.w.rows())
        .map(|c| {
            let b = e.bias.as_ref().map_or(0.0, |b| b[(0, c)]);
            b + (0..h.len()).map(|i| e.w[(c, i)] * h[i]).sum::<f64>()
        })
        .collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ez: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = ez.iter().sum();
    ez.iter().map(|v| v / s).collect()
}

/// `sqrt(Σ_r (Σ_i U[i][r] (h_i − c_i))² + 1e-12)`
pub fn distance(model: &Model, l: usize, h: &[f64], c: &[f64]) -> f64 {
    let u = model.metric(l);
    let mut sq = 0.0;
    for r in 0..u.cols() {
        let mut p = 0.0;
        for i in 0..h.len() {
            p += u[(i, r)] * (h[i] - c[i]);
        }
        sq += p * p;
    }
    (sq + 1e-12).sqrt()
}

fn mean(rows: &[&Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r.iter()) {
            *a += b;
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

/// Leave-one-source-out mixture loss with batch statistics, one batch per
/// source.
pub fn moe_loss(model: &Model, sources: &[Vec<Example>]) -> f64 {
    let k = sources.len();
    let classes = model.config.num_classes;
    let enc: Vec<Vec<(Vec<f64>, usize)>> = sources
        .iter()
        .map(|b| {
            b.iter()
                .map(|ex| {
                    let (x, y) = features(ex);
                    (encode(model, x), y)
                })
                .collect()
        })
        .collect();
    let means: Vec<Vec<f64>> = enc
        .iter()
        .map(|b| mean(&b.iter().map(|(h, _)| h).collect::<Vec<_>>()))
        .collect();
    let class_means: Vec<Vec<Vec<f64>>> = enc
        .iter()
        .map(|b| {
            (0..classes)
                .map(|c| mean(&b.iter().filter(|(_, y)| *y == c).map(|(h, _)| h).collect::<Vec<_>>()))
                .collect()
        })
        .collect();
    let mut total = 0.0;
    for t in 0..k {
        let others: Vec<usize> = (0..k).filter(|&l| l != t).collect();
        let mut sum_t = 0.0;
        for (h, y) in &enc[t] {
            let conf: Vec<f64> = others
                .iter()
                .map(|&l| match model.config.confidence {
                    ConfidenceKind::NegativeDistance => -distance(model, l, h, &means[l]),
                    ConfidenceKind::MaxClusterDifference => {
                        (distance(model, l, h, &class_means[l][1]) - distance(model, l, h, &class_means[l][0])).abs()
                    }
                })
                .collect();
            let max = conf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = conf.iter().map(|e| (e - max).exp()).sum();
            let mut p = 0.0;
            for (i, &l) in others.iter().enumerate() {
                p += (conf[i] - max).exp() / z * posterior(model, l, h)[*y];
            }
            sum_t -= p.ln();
        }
        total += sum_t / enc[t].len() as f64;
    }
    total / k as f64
}

/// Each source's batch scored by its own expert.
pub fn mtl_loss(model: &Model, sources: &[Vec<Example>]) -> f64 {
    let mut total = 0.0;
    for (l, b) in sources.iter().enumerate() {
        let s: f64 = b
            .iter()
            .map(|ex| {
                let (x, y) = features(ex);
                -posterior(model, l, &encode(model, x))[y].ln()
            })
            .sum();
        total += s / b.len() as f64;
    }
    total / sources.len() as f64
}
