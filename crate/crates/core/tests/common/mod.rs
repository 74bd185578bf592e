//! Independent oracles shared by the integration and acceptance tests. They
//! recompute everything from first principles with plain loops and share no
//! code with the library beyond its public data types.
#![allow(dead_code, clippy::needless_range_loop)]

use particul::classifier::{Selector, ToyCnn};
use particul::detectors::{detector_loss, loss_gradient};
use particul::tensor::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct convolutional forward pass: inputs shifted by −0.5, 3×3 kernels
/// with zero padding 1, ReLU, then global max pooling and the dense head.
pub fn naive_forward(m: &ToyCnn, pixels: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (mut h, mut w, mut c) = (m.input_height, m.input_width, m.input_channels);
    let mut act: Vec<f64> = pixels.iter().map(|v| v - 0.5).collect();
    for s in &m.stages {
        let oh = (h + 2 - 3) / s.stride + 1;
        let ow = (w + 2 - 3) / s.stride + 1;
        let mut out = vec![0.0; oh * ow * s.out_channels];
        for y in 0..oh {
            for x in 0..ow {
                for co in 0..s.out_channels {
                    let mut acc = s.bias[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (y * s.stride + ky) as isize - 1;
                            let ix = (x * s.stride + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                let v = act[(iy as usize * w + ix as usize) * c + ci];
                                let wt = s.weights[((ky * 3 + kx) * c + ci) * s.out_channels + co];
                                acc += v * wt;
                            }
                        }
                    }
                    out[(y * ow + x) * s.out_channels + co] = acc.max(0.0);
                }
            }
        }
        act = out;
        h = oh;
        w = ow;
        c = s.out_channels;
    }
    let n = m.fc_bias.len();
    let mut logits = m.fc_bias.clone();
    for d in 0..c {
        let pooled = (0..h * w)
            .map(|l| act[l * c + d])
            .fold(f64::NEG_INFINITY, f64::max);
        for k in 0..n {
            logits[k] += pooled * m.fc_weights[d * n + k];
        }
    }
    (act, logits)
}

/// Detector objective recomputed from its definition: per detector, a spatial
/// softmax of the 1×1 correlation, its 3×3 zero-padded box sum, one minus the
/// peak averaged over detectors, plus `λ·max(0, peak of the stacked sums − 1)`.
pub fn oracle_detector_loss(f: &FeatureMap, kernels: &[Vec<f64>], lambda: f64) -> f64 {
    let (h, w, d) = (f.height(), f.width(), f.depth());
    let mut stacked = vec![0.0; h * w];
    let mut locality = 0.0;
    for k in kernels {
        let act: Vec<f64> = (0..h * w)
            .map(|l| (0..d).map(|j| f.data()[l * d + j] * k[j]).sum())
            .collect();
        let z: f64 = act.iter().map(|a| a.exp()).sum();
        let prob: Vec<f64> = act.iter().map(|a| a.exp() / z).collect();
        let mut peak: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                            s += prob[yy as usize * w + xx as usize];
                        }
                    }
                }
                stacked[y * w + x] += s;
                peak = peak.max(s);
            }
        }
        locality += 1.0 - peak;
    }
    let top = stacked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    locality / kernels.len() as f64 + lambda * (top - 1.0).max(0.0)
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`: componentwise agreement relative to the
/// gradient's scale.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn central_difference(x: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn random_fmap(r: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap {
    FeatureMap::new(
        h,
        w,
        d,
        (0..h * w * d).map(|_| r.random_range(0.0..2.0)).collect(),
    )
    .unwrap()
}

/// One seeded detector-loss instance. Odd seeds use nearly parallel kernels so
/// the unicity term is active.
pub fn detector_instance(seed: u64) -> (FeatureMap, Vec<Vec<f64>>) {
    let mut r = rng(seed);
    let (h, w, d, p) = (4, 4, 6, 3);
    let f = random_fmap(&mut r, h, w, d);
    let base: Vec<f64> = (0..d).map(|_| r.random_range(-1.5..1.5)).collect();
    let kernels = (0..p)
        .map(|_| {
            if seed % 2 == 1 {
                base.iter()
                    .map(|b| b + r.random_range(-0.05..0.05))
                    .collect()
            } else {
                (0..d).map(|_| r.random_range(-1.5..1.5)).collect()
            }
        })
        .collect();
    (f, kernels)
}

/// Relative error of the analytic detector-loss gradient against central
/// differences, and whether the unicity term was active.
pub fn detector_fd_error(seed: u64) -> (f64, bool) {
    let (f, kernels) = detector_instance(seed);
    let lambda = 1.0;
    let grad = loss_gradient(&f, &kernels, lambda).unwrap();
    let (p, d) = (kernels.len(), f.depth());
    let flat: Vec<f64> = kernels.concat();
    let numeric = central_difference(&flat, 1e-6, |x| {
        let ks: Vec<Vec<f64>> = x.chunks(d).map(<[f64]>::to_vec).collect();
        detector_loss(&f, &ks, lambda).unwrap()
    });
    assert_eq!(numeric.len(), p * d);
    let unicity = particul::detectors::unicity_loss(&f, &kernels).unwrap() > 0.0;
    (relative_error(&grad.concat(), &numeric), unicity)
}

pub fn random_model(seed: u64) -> ToyCnn {
    let mut m = ToyCnn::init(8, 8, 3, &[4, 5], 3, seed).unwrap();
    let mut r = rng(seed ^ 0xB1A5);
    for s in &mut m.stages {
        s.bias
            .iter_mut()
            .for_each(|b| *b = r.random_range(-0.1..0.1));
    }
    m.fc_bias
        .iter_mut()
        .for_each(|b| *b = r.random_range(-0.5..0.5));
    m
}

pub fn random_pixels(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random::<f64>()).collect()
}

/// Relative error of the input gradient for a logit (even seeds) or a
/// detector kernel (odd seeds).
pub fn input_fd_error(seed: u64) -> f64 {
    let m = random_model(seed);
    let x = random_pixels(seed + 1000, 8 * 8 * 3);
    let kernel: Vec<f64> = {
        let mut r = rng(seed + 2000);
        (0..m.depth()).map(|_| r.random_range(-1.0..1.0)).collect()
    };
    let sel = if seed.is_multiple_of(2) {
        Selector::Logit((seed as usize / 2) % 3)
    } else {
        Selector::Detector(&kernel)
    };
    let analytic = m.raw_input_gradient(&x, sel).unwrap();
    let numeric = central_difference(&x, 1e-6, |v| m.raw_selected_value(v, sel).unwrap());
    relative_error(&analytic, &numeric)
}

/// `P(iod > ood) + ½·P(iod = ood)` over all pairs.
pub fn mann_whitney(iod: &[f64], ood: &[f64]) -> f64 {
    let mut s = 0.0;
    for &a in iod {
        for &b in ood {
            s += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (iod.len() * ood.len()) as f64
}

/// `(tp, fp)` at every distinct score, from the highest threshold down, by
/// counting each set against each threshold.
fn threshold_sweep(iod: &[f64], ood: &[f64]) -> Vec<(usize, usize)> {
    let mut ts: Vec<f64> = iod.iter().chain(ood).copied().collect();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    ts.iter()
        .map(|&t| {
            (
                iod.iter().filter(|&&v| v >= t).count(),
                ood.iter().filter(|&&v| v >= t).count(),
            )
        })
        .collect()
}

pub fn sweep_aupr(iod: &[f64], ood: &[f64]) -> f64 {
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in threshold_sweep(iod, ood) {
        let recall = tp as f64 / iod.len() as f64;
        if tp > 0 {
            area += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        }
        prev_recall = recall;
    }
    area
}

/// Smallest FPR over all thresholds reaching the target TPR.
pub fn sweep_fpr_at_tpr(iod: &[f64], ood: &[f64], target: f64) -> f64 {
    threshold_sweep(iod, ood)
        .into_iter()
        .filter(|&(tp, _)| tp as f64 / iod.len() as f64 >= target)
        .map(|(_, fp)| fp as f64 / ood.len() as f64)
        .fold(f64::INFINITY, f64::min)
}

/// Pearson correlation of average ranks, ranks found by counting.
pub fn rank_pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let below = v.iter().filter(|&&b| b < a).count() as f64;
                let equal = v.iter().filter(|&&b| b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Scores drawn from a few levels so ties are common.
pub fn tied_scores(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(0..12) as f64 / 4.0).collect()
}

/// One seeded metric instance with `1 ≤ |iod|, |ood| ≤ 100`.
pub fn metric_instance(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let (a, b) = (r.random_range(1..=100), r.random_range(1..=100));
    if seed.is_multiple_of(2) {
        (tied_scores(&mut r, a), tied_scores(&mut r, b))
    } else {
        let iod = (0..a).map(|_| r.random::<f64>() + 0.2).collect();
        let ood = (0..b).map(|_| r.random::<f64>()).collect();
        (iod, ood)
    }
}
