//! Shared oracles for integration and acceptance tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat;
use vesde::schedules::{EdmWeighting, GridKind, TimeGrid, VarianceSchedule, WeightingSpec};
use vesde::score_net::ScoreNet;
use vesde::training::{make_batch, DataSource, TrainBatch};

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Fallback step used only when the `±FD_STEP` stencil crosses a ReLU kink.
pub const FD_KINK_STEP: f64 = 1e-9;

pub struct Instance {
    pub schedule: VarianceSchedule,
    pub grid: TimeGrid,
    pub batch: TrainBatch,
    pub weighting: WeightingSpec,
    pub net: ScoreNet,
}

/// Random small instance with `d, m, L, n, N` in `1..=8` on the EDM grid.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=8);
    let m = rng.random_range(1..=8);
    let depth = rng.random_range(1..=8);
    let n = rng.random_range(1..=8);
    let big_n = rng.random_range(1..=8);
    let schedule = VarianceSchedule::edm(0.002, 80.0).unwrap();
    let grid = TimeGrid::build(&schedule, GridKind::Polynomial { rho: 7.0 }, big_n).unwrap();
    let src = DataSource::gaussian(vec![0.0; d], 1.0).unwrap();
    let batch = make_batch(&src, n, &grid, &schedule, seed ^ 0x5eed).unwrap();
    let weighting = WeightingSpec::edm(&grid, &schedule, &EdmWeighting::default(), 1.0).unwrap();
    let net = ScoreNet::init(d, m, depth, seed).unwrap();
    Instance {
        schedule,
        grid,
        batch,
        weighting,
        net,
    }
}

fn tf(v: f64) -> TwoFloat {
    TwoFloat::from(v)
}

fn relu_pattern_and_out(layers: &[Vec<Vec<TwoFloat>>], input: &[TwoFloat], pattern: &mut Vec<bool>) -> Vec<TwoFloat> {
    let mut h: Vec<TwoFloat> = input.to_vec();
    let last = layers.len() - 1;
    for (l, w) in layers.iter().enumerate() {
        let mut next = Vec::with_capacity(w.len());
        for row in w {
            let mut acc = tf(0.0);
            for (a, b) in row.iter().zip(&h) {
                acc += *a * *b;
            }
            next.push(acc);
        }
        if l < last {
            for v in next.iter_mut() {
                let on = *v > tf(0.0);
                pattern.push(on);
                if !on {
                    *v = tf(0.0);
                }
            }
        }
        h = next;
    }
    h
}

fn to_dd(a: &ndarray::Array2<f64>) -> Vec<Vec<TwoFloat>> {
    a.rows().into_iter().map(|r| r.iter().map(|&v| tf(v)).collect()).collect()
}

/// Loss and activation pattern in double-double arithmetic, with hidden weight
/// `(layer, r, c)` shifted by `shift` (exactly, in double-double).
fn dd_loss(inst: &Instance, perturb: Option<(usize, usize, usize, TwoFloat)>) -> (TwoFloat, Vec<bool>) {
    let net = &inst.net;
    let mut layers = vec![to_dd(net.w_in())];
    for h in net.hidden() {
        layers.push(to_dd(h));
    }
    layers.push(to_dd(net.w_out()));
    if let Some((l, r, c, shift)) = perturb {
        layers[l + 1][r][c] += shift;
    }
    let b = &inst.batch;
    let big_n = b.time_count();
    let inputs = b.inputs();
    let mut pattern = Vec::new();
    let mut total = tf(0.0);
    for col in 0..b.n() * big_n {
        let (i, j) = (col / big_n, col % big_n);
        let x: Vec<TwoFloat> = inputs.column(col).iter().map(|&v| tf(v)).collect();
        let out = relu_pattern_and_out(&layers, &x, &mut pattern);
        let sb = tf(b.sigma_bars()[j]);
        let xi = b.noise(i, j);
        let mut sq = tf(0.0);
        for (o, &e) in out.iter().zip(xi.iter()) {
            let r = sb * *o + tf(e);
            sq += r * r;
        }
        total += tf(inst.weighting.beta[j]) * sq;
    }
    (total / tf(2.0 * b.n() as f64), pattern)
}

pub struct FdReport {
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, usize, f64, f64)>,
    /// Entries whose `±FD_STEP` stencil crossed a kink and used `FD_KINK_STEP`.
    pub kink_fallbacks: usize,
}

/// Compares every analytic hidden-layer gradient entry with a central finite
/// difference evaluated in double-double arithmetic.
pub fn fd_check(inst: &Instance) -> FdReport {
    let lg = inst.net.loss_and_grad(&inst.batch, &inst.weighting).unwrap();
    let (_, base_pattern) = dd_loss(inst, None);
    let m = inst.net.width();
    let mut report = FdReport {
        entries: 0,
        max_rel_err: 0.0,
        worst: None,
        kink_fallbacks: 0,
    };
    for l in 0..inst.net.depth() {
        for r in 0..m {
            for c in 0..m {
                let fd_at = |h: f64| {
                    let (lp, pp) = dd_loss(inst, Some((l, r, c, tf(h))));
                    let (lm, pm) = dd_loss(inst, Some((l, r, c, tf(-h))));
                    let fd = f64::from((lp - lm) / tf(2.0 * h));
                    (fd, pp == base_pattern && pm == base_pattern)
                };
                let (mut fd, smooth) = fd_at(FD_STEP);
                if !smooth {
                    report.kink_fallbacks += 1;
                    fd = fd_at(FD_KINK_STEP).0;
                }
                let an = lg.grads[l][[r, c]];
                let scale = an.abs().max(fd.abs());
                let err = if scale == 0.0 { 0.0 } else { (fd - an).abs() / scale };
                report.entries += 1;
                if err > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(err);
                    if err >= report.max_rel_err {
                        report.worst = Some((l, r, c, an, fd));
                    }
                }
            }
        }
    }
    report
}
