//! Direct-loop oracles for the superpixel, projection, smoothness, edge and
//! mutual-information formulas. Each check runs random instances of at most
//! 4x4 pixels and 3 superpixels and returns the largest deviation seen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgseg::seg_head::mi_loss;
use sgseg::sp_graph::tv_loss;
use sgseg::superpixel::{
    clustering_loss, edge_loss, hard_superpixelate, pool_superpixel_features, project_to_image, smoothness_loss,
    soft_superpixelate, AssignmentMap, CLUSTERING_LAMBDA, SMOOTHNESS_SIGMA,
};
use sgseg_tensor::{Graph, Tensor, Var};

pub const TRIALS: usize = 40;
const EPS: f64 = 1e-8;

pub struct OracleCheck {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: fn(u64) -> f64,
}

pub const CHECKS: [OracleCheck; 9] = [
    OracleCheck { name: "hard superpixelation", tolerance: 1e-12, run: hard_superpixelation },
    OracleCheck { name: "soft superpixelation", tolerance: 1e-12, run: soft_superpixelation },
    OracleCheck { name: "feature pooling", tolerance: 1e-12, run: pooling },
    OracleCheck { name: "projection", tolerance: 1e-12, run: projection },
    OracleCheck { name: "clustering loss", tolerance: 1e-12, run: clustering },
    OracleCheck { name: "smoothness loss", tolerance: 1e-12, run: smoothness },
    OracleCheck { name: "edge loss", tolerance: 1e-10, run: edge },
    OracleCheck { name: "tv loss", tolerance: 1e-12, run: tv },
    OracleCheck { name: "mutual information", tolerance: 1e-12, run: mutual_information },
];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

/// Random row-stochastic `[h, w, n]` map with entries bounded away from 0.
fn rand_probs(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize) -> Tensor {
    let mut t = Tensor::from_fn(&[h, w, n], |_| rng.gen_range(0.05..1.0));
    for px in t.data_mut().chunks_mut(n) {
        let s: f64 = px.iter().sum();
        px.iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=3))
}

fn at(t: &Tensor, y: usize, x: usize, c: usize) -> f64 {
    let s = t.shape();
    t.data()[(y * s[1] + x) * s[2] + c]
}

/// Evaluates `f` on constant inputs and returns the value of its output.
fn eval(inputs: &[&Tensor], f: impl FnOnce(&mut Graph, &[Var]) -> Var) -> Tensor {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).clone()
}

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Mean feature vector of every superpixel: Σ P F / max(Σ P, ε).
fn oracle_means(f: &Tensor, p: &Tensor) -> Vec<Vec<f64>> {
    let (h, w, c, n) = (f.shape()[0], f.shape()[1], f.shape()[2], p.shape()[2]);
    (0..n)
        .map(|s| {
            let mut mass = 0.0;
            let mut num = vec![0.0; c];
            for y in 0..h {
                for x in 0..w {
                    let q = at(p, y, x, s);
                    mass += q;
                    for (ch, v) in num.iter_mut().enumerate() {
                        *v += q * at(f, y, x, ch);
                    }
                }
            }
            num.into_iter().map(|v| v / mass.max(EPS)).collect()
        })
        .collect()
}

pub fn hard_superpixelation(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let (h, w, n) = dims(&mut rng);
        let img = rand_tensor(&mut rng, &[h, w, 3]);
        let p = rand_probs(&mut rng, h, w, n);
        let got = hard_superpixelate(&img, &AssignmentMap::new(p.clone()).unwrap()).unwrap();
        let mut want = Vec::new();
        let label = |y, x| (0..n).fold(0, |b, s| if at(&p, y, x, s) > at(&p, y, x, b) { s } else { b });
        for y in 0..h {
            for x in 0..w {
                let l = label(y, x);
                for ch in 0..3 {
                    let (mut sum, mut count) = (0.0, 0.0);
                    for yy in 0..h {
                        for xx in 0..w {
                            if label(yy, xx) == l {
                                sum += at(&img, yy, xx, ch);
                                count += 1.0;
                            }
                        }
                    }
                    want.push(sum / count);
                }
            }
        }
        worst = worst.max(max_dev(got.data(), &want));
    }
    worst
}

pub fn soft_superpixelation(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let (h, w, n) = dims(&mut rng);
        let img = rand_tensor(&mut rng, &[h, w, 3]);
        let p = rand_probs(&mut rng, h, w, n);
        let got = eval(&[&img, &p], |g, v| soft_superpixelate(g, v[0], v[1]).unwrap());
        let means = oracle_means(&img, &p);
        let mut want = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    want.push((0..n).map(|s| at(&p, y, x, s) * means[s][ch]).sum());
                }
            }
        }
        worst = worst.max(max_dev(got.data(), &want));
    }
    worst
}

pub fn pooling(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let (h, w, n) = dims(&mut rng);
        let f = rand_tensor(&mut rng, &[h, w, 4]);
        let p = rand_probs(&mut rng, h, w, n);
        let mut g = Graph::new();
        let (fv, pv) = (g.constant(f.clone()), g.constant(p.clone()));
        let pooled = pool_superpixel_features(&mut g, fv, pv).unwrap();
        let want: Vec<f64> = oracle_means(&f, &p).concat();
        worst = worst.max(max_dev(g.value(pooled.feats).data(), &want));
        let mass: f64 = g.value(pooled.mass).data().iter().sum();
        if (mass - (h * w) as f64).abs() > 1e-4 {
            return f64::INFINITY;
        }
    }
    worst
}

pub fn projection(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let (h, w, n) = dims(&mut rng);
        let d = rng.gen_range(1..=3);
        let p = rand_probs(&mut rng, h, w, n);
        let f = Tensor::from_fn(&[n, d], |_| rng.gen_range(-1.0..1.0));
        let got = eval(&[&p, &f], |g, v| project_to_image(g, v[0], v[1]).unwrap());
        let mut want = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for k in 0..d {
                    want.push((0..n).map(|s| at(&p, y, x, s) * f.data()[s * d + k]).sum());
                }
            }
        }
        if got.shape() != [h, w, d] {
            return f64::INFINITY;
        }
        worst = worst.max(max_dev(got.data(), &want));
    }
    worst
}

pub fn clustering(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let (h, w, n) = dims(&mut rng);
        let p = rand_probs(&mut rng, h, w, n);
        let got = eval(&[&p], |g, v| clustering_loss(g, v[0], CLUSTERING_LAMBDA).unwrap()).item();
        let hw = (h * w) as f64;
        let mut pixel = 0.0;
        let mut mean = vec![0.0; n];
        for y in 0..h {
            for x in 0..w {
                for (s, m) in mean.iter_mut().enumerate() {
                    let q = at(&p, y, x, s);
                    pixel -= q * q.ln();
                    *m += q / hw;
                }
            }
        }
        let want = pixel / hw + CLUSTERING_LAMBDA * mean.iter().map(|m| m * m.ln()).sum::<f64>();
        worst = worst.max((got - want).abs());
    }
    worst
}

pub fn smoothness(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let (h, w, n) = dims(&mut rng);
        let img = Tensor::from_fn(&[h, w, 3], |_| rng.gen_range(0.0..4.0));
        let p = rand_probs(&mut rng, h, w, n);
        let got = eval(&[&p, &img], |g, v| smoothness_loss(g, v[0], v[1], SMOOTHNESS_SIGMA).unwrap()).item();
        let mut want = 0.0;
        for y in 0..h {
            for x in 0..w {
                for (dy, dx) in [(0, 1), (1, 0)] {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= h || xx >= w {
                        continue;
                    }
                    let l1: f64 = (0..n).map(|s| (at(&p, yy, xx, s) - at(&p, y, x, s)).abs()).sum();
                    let d2: f64 = (0..3).map(|c| (at(&img, yy, xx, c) - at(&img, y, x, c)).powi(2)).sum();
                    want += l1 * (-d2 / SMOOTHNESS_SIGMA).exp();
                }
            }
        }
        want /= (h * w) as f64;
        worst = worst.max((got - want).abs());
    }
    worst
}

/// Zero-padded 4-neighbor Laplacian, softmax over positions per channel.
fn oracle_edge_distribution(t: &Tensor) -> Vec<Vec<f64>> {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let px = |y: isize, x: isize, ch: usize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            at(t, y as usize, x as usize, ch)
        }
    };
    (0..c)
        .map(|ch| {
            let mut lap = Vec::with_capacity(h * w);
            for y in 0..h as isize {
                for x in 0..w as isize {
                    lap.push(px(y - 1, x, ch) + px(y + 1, x, ch) + px(y, x - 1, ch) + px(y, x + 1, ch) - 4.0 * px(y, x, ch));
                }
            }
            let z: f64 = lap.iter().map(|v| v.exp()).sum();
            lap.iter().map(|v| v.exp() / z).collect()
        })
        .collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

pub fn edge(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let img = rand_tensor(&mut rng, &[h, w, 3]);
        let rec = rand_tensor(&mut rng, &[h, w, 3]);
        let sp = rand_tensor(&mut rng, &[h, w, 3]);
        let got = eval(&[&img, &rec, &sp], |g, v| edge_loss(g, v[0], v[1], v[2]).unwrap()).item();
        let (ei, er, es) = (
            oracle_edge_distribution(&img),
            oracle_edge_distribution(&rec),
            oracle_edge_distribution(&sp),
        );
        let want: f64 = (0..3).map(|c| kl(&ei[c], &er[c]) + kl(&ei[c], &es[c])).sum::<f64>() / 3.0;
        if got < -1e-15 {
            return f64::INFINITY;
        }
        worst = worst.max((got - want).abs());
    }
    worst
}

pub fn tv(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let m = Tensor::from_fn(&[h, w, 2], |_| rng.gen_range(-1.0..1.0));
        let got = eval(&[&m], |g, v| tv_loss(g, v[0]).unwrap()).item();
        let mut want = 0.0;
        for y in 0..h {
            for x in 0..w {
                for c in 0..2 {
                    if x + 1 < w {
                        want += (at(&m, y, x + 1, c) - at(&m, y, x, c)).abs();
                    }
                    if y + 1 < h {
                        want += (at(&m, y + 1, x, c) - at(&m, y, x, c)).abs();
                    }
                }
            }
        }
        want /= (h * w) as f64;
        worst = worst.max((got - want).abs());
    }
    worst
}

pub fn mutual_information(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let k = rng.gen_range(2..=3);
        let a = rand_probs(&mut rng, h, w, k);
        let b = rand_probs(&mut rng, h, w, k);
        let got = eval(&[&a, &b], |g, v| mi_loss(g, v[0], v[1]).unwrap()).item();
        let hw = (h * w) as f64;
        let mut joint = vec![vec![0.0; k]; k];
        for y in 0..h {
            for x in 0..w {
                for i in 0..k {
                    for j in 0..k {
                        let v = at(&a, y, x, i) * at(&b, y, x, j) + at(&a, y, x, j) * at(&b, y, x, i);
                        joint[i][j] += 0.5 * v / hw;
                    }
                }
            }
        }
        let mut mi = 0.0;
        for i in 0..k {
            for j in 0..k {
                let pi: f64 = joint[i].iter().sum();
                let pj: f64 = (0..k).map(|r| joint[r][j]).sum();
                mi += joint[i][j] * (joint[i][j] / (pi * pj)).ln();
            }
        }
        worst = worst.max((got + mi).abs());
    }
    worst
}
