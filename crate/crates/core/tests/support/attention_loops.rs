//! Loop-based direct evaluations of the attention modules, shared by the
//! oracle tests and the acceptance suite.

#![allow(dead_code)]

use c2datt::attention::{attention_forward, AttentionVars, Pooling};
use c2datt::autograd::{BnMode, Graph, BN_EPS, STD_EPS};
use c2datt::rng::{self, Rng};
use c2datt::Tensor;
use rand::Rng as _;

/// Agreement required between graph and loop evaluations.
pub const ORACLE_TOL: f64 = 1e-5;

pub struct X {
    pub n: usize,
    pub c: usize,
    pub f: usize,
    pub t: usize,
    pub data: Vec<f64>,
}

impl X {
    pub fn at(&self, n: usize, c: usize, f: usize, t: usize) -> f64 {
        self.data[((n * self.c + c) * self.f + f) * self.t + t]
    }
}

pub fn pool(v: &[f64], pooling: Pooling) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    match pooling {
        Pooling::Avg => m,
        Pooling::Std => (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64 + STD_EPS).sqrt(),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `sigmoid(W2 relu(W1 s))` with row-major `W1: [d, D]`, `W2: [D, d]`.
pub fn excite(s: &[f64], w1: &[f64], w2: &[f64], d: usize) -> Vec<f64> {
    let dim = s.len();
    let h: Vec<f64> = (0..d)
        .map(|j| (0..dim).map(|i| w1[j * dim + i] * s[i]).sum::<f64>().max(0.0))
        .collect();
    (0..dim).map(|i| sigmoid((0..d).map(|j| w2[i * d + j] * h[j]).sum())).collect()
}

pub fn se_oracle(x: &X, w1: &[f64], w2: &[f64], d: usize, pooling: Pooling) -> Vec<Vec<f64>> {
    (0..x.n)
        .map(|n| {
            let s: Vec<f64> = (0..x.c)
                .map(|c| {
                    let v: Vec<f64> = (0..x.f).flat_map(|f| (0..x.t).map(move |t| (f, t))).map(|(f, t)| x.at(n, c, f, t)).collect();
                    pool(&v, pooling)
                })
                .collect();
            excite(&s, w1, w2, d)
        })
        .collect()
}

pub fn fwse_oracle(x: &X, w1: &[f64], w2: &[f64], d: usize, pooling: Pooling) -> Vec<Vec<f64>> {
    (0..x.n)
        .map(|n| {
            let s: Vec<f64> = (0..x.f)
                .map(|f| {
                    let v: Vec<f64> = (0..x.c).flat_map(|c| (0..x.t).map(move |t| (c, t))).map(|(c, t)| x.at(n, c, f, t)).collect();
                    pool(&v, pooling)
                })
                .collect();
            excite(&s, w1, w2, d)
        })
        .collect()
}

/// Zero-padded "same" correlation over a `[cin, H, W]` stack with
/// `w: [cout, cin, k, k]`.
pub fn conv_same(img: &[Vec<f64>], h: usize, w: usize, wt: &[f64], cout: usize, k: usize) -> Vec<Vec<f64>> {
    let cin = img.len();
    let p = (k - 1) as isize / 2;
    (0..cout)
        .map(|o| {
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for i in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y as isize + ky as isize - p, xx as isize + kx as isize - p);
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += wt[((o * cin + i) * k + ky) * k + kx] * img[i][sy as usize * w + sx as usize];
                                }
                            }
                        }
                    }
                    out[y * w + xx] = acc;
                }
            }
            out
        })
        .collect()
}

pub struct C2dWeights<'a> {
    pub conv1: &'a [f64],
    pub gamma: &'a [f64],
    pub beta: &'a [f64],
    pub conv2: &'a [f64],
    pub d: usize,
    pub k: usize,
}

/// Weight plane `[N][C * F]` with train-mode batch statistics.
pub fn c2d_oracle(x: &X, p: &C2dWeights, pooling: Pooling) -> Vec<Vec<f64>> {
    let (c, f) = (x.c, x.f);
    let planes: Vec<Vec<Vec<f64>>> = (0..x.n)
        .map(|n| {
            let z: Vec<f64> = (0..c * f)
                .map(|i| pool(&(0..x.t).map(|t| x.at(n, i / f, i % f, t)).collect::<Vec<_>>(), pooling))
                .collect();
            conv_same(&[z], c, f, p.conv1, p.d, p.k)
        })
        .collect();
    let mut normed = planes.clone();
    for j in 0..p.d {
        let all: Vec<f64> = planes.iter().flat_map(|pl| pl[j].iter().copied()).collect();
        let m = all.iter().sum::<f64>() / all.len() as f64;
        let v = all.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / all.len() as f64;
        for pl in normed.iter_mut() {
            for a in pl[j].iter_mut() {
                *a = (p.gamma[j] * (*a - m) / (v + BN_EPS).sqrt() + p.beta[j]).max(0.0);
            }
        }
    }
    normed
        .iter()
        .map(|h| conv_same(h, c, f, p.conv2, 1, p.k)[0].iter().map(|&e| sigmoid(e)).collect())
        .collect()
}

pub fn randn(r: &mut Rng, n: usize) -> Vec<f64> {
    rng::normal_vec(r, n, 1.0)
}

pub fn random_x(r: &mut Rng) -> X {
    let (n, c, f, t) = (r.gen_range(1..4), r.gen_range(1..6), r.gen_range(2..7), r.gen_range(2..8));
    X { n, c, f, t, data: randn(r, n * c * f * t) }
}

pub fn tensor(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, v.to_vec()).unwrap()
}

pub fn check_y(x: &X, y: &Tensor<f64>, weight: impl Fn(usize, usize, usize) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for n in 0..x.n {
        for c in 0..x.c {
            for f in 0..x.f {
                for t in 0..x.t {
                    let expect = x.at(n, c, f, t) * weight(n, c, f);
                    let got = y.data()[((n * x.c + c) * x.f + f) * x.t + t];
                    worst = worst.max((expect - got).abs());
                }
            }
        }
    }
    worst
}

pub fn pooling_of(r: &mut Rng) -> Pooling {
    if r.gen_bool(0.5) {
        Pooling::Avg
    } else {
        Pooling::Std
    }
}

/// Largest deviation over `cases` random inputs.
pub fn se_worst(seed: u64, cases: usize) -> f64 {
    let mut r = rng::seeded(seed);
    let mut overall = 0.0f64;
    for _ in 0..cases {
        let x = random_x(&mut r);
        let d = r.gen_range(1..4);
        let pooling = pooling_of(&mut r);
        let (w1, w2) = (randn(&mut r, d * x.c), randn(&mut r, x.c * d));
        let mut g = Graph::<f64>::new();
        let xv = g.constant(tensor(&[x.n, x.c, x.f, x.t], &x.data));
        let fc1 = g.constant(tensor(&[d, x.c], &w1));
        let fc2 = g.constant(tensor(&[x.c, d], &w2));
        let out = attention_forward(&mut g, xv, AttentionVars::Se { fc1, fc2 }, pooling, BnMode::Train).unwrap();
        let omega = se_oracle(&x, &w1, &w2, d, pooling);
        let worst = check_y(&x, g.value(out.y), |n, c, _| omega[n][c]);
        overall = overall.max(worst);
    }
    overall
}

/// Largest deviation over `cases` random inputs.
pub fn fwse_worst(seed: u64, cases: usize) -> f64 {
    let mut r = rng::seeded(seed);
    let mut overall = 0.0f64;
    for _ in 0..cases {
        let x = random_x(&mut r);
        let d = r.gen_range(1..4);
        let pooling = pooling_of(&mut r);
        let (w1, w2) = (randn(&mut r, d * x.f), randn(&mut r, x.f * d));
        let mut g = Graph::<f64>::new();
        let xv = g.constant(tensor(&[x.n, x.c, x.f, x.t], &x.data));
        let fc1 = g.constant(tensor(&[d, x.f], &w1));
        let fc2 = g.constant(tensor(&[x.f, d], &w2));
        let out = attention_forward(&mut g, xv, AttentionVars::Fwse { fc1, fc2 }, pooling, BnMode::Train).unwrap();
        let omega = fwse_oracle(&x, &w1, &w2, d, pooling);
        let worst = check_y(&x, g.value(out.y), |n, _, f| omega[n][f]);
        overall = overall.max(worst);
    }
    overall
}

/// Largest deviation over `cases` random inputs; infinite when a weight
/// leaves (0, 1).
pub fn c2d_worst(seed: u64, cases: usize) -> f64 {
    let mut r = rng::seeded(seed);
    let mut overall = 0.0f64;
    for _ in 0..cases {
        let mut x = random_x(&mut r);
        // BN over a single plane position is undefined; keep N * C * F >= 2.
        x.c = x.c.max(2);
        x.data = randn(&mut r, x.n * x.c * x.f * x.t);
        let (d, k) = (r.gen_range(1..5), [1, 3, 5][r.gen_range(0..3)]);
        let pooling = pooling_of(&mut r);
        let conv1 = randn(&mut r, d * k * k);
        let conv2 = randn(&mut r, d * k * k);
        let gamma: Vec<f64> = (0..d).map(|_| r.gen_range(0.5..1.5)).collect();
        let beta = randn(&mut r, d);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(tensor(&[x.n, x.c, x.f, x.t], &x.data));
        let vars = AttentionVars::C2d {
            conv1: g.constant(tensor(&[d, 1, k, k], &conv1)),
            gamma: g.constant(tensor(&[d], &gamma)),
            beta: g.constant(tensor(&[d], &beta)),
            conv2: g.constant(tensor(&[1, d, k, k], &conv2)),
        };
        let out = attention_forward(&mut g, xv, vars, pooling, BnMode::Train).unwrap();
        let p = C2dWeights { conv1: &conv1, gamma: &gamma, beta: &beta, conv2: &conv2, d, k };
        let omega = c2d_oracle(&x, &p, pooling);
        let worst = check_y(&x, g.value(out.y), |n, c, f| omega[n][c * x.f + f]);
        let om = g.value(out.omega.unwrap());
        let in_range = om.shape() == [x.n, x.c, x.f] && om.data().iter().all(|&v| v > 0.0 && v < 1.0);
        overall = overall.max(if in_range { worst } else { f64::INFINITY });
    }
    overall
}

/// Omega for all three variants on `x: [2, 4, 4, T]` with fixed weights.
pub fn omegas(x: &Tensor<f64>, pooling: Pooling) -> Vec<Vec<f64>> {
    let mut r = rng::seeded(5);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let mut c = |g: &mut Graph<f64>, s: &[usize]| {
        let n = s.iter().product();
        g.constant(tensor(s, &randn(&mut r, n)))
    };
    let se = AttentionVars::Se { fc1: c(&mut g, &[2, 4]), fc2: c(&mut g, &[4, 2]) };
    let fw = AttentionVars::Fwse { fc1: c(&mut g, &[2, 4]), fc2: c(&mut g, &[4, 2]) };
    let cd = AttentionVars::C2d {
        conv1: c(&mut g, &[2, 1, 3, 3]),
        gamma: c(&mut g, &[2]),
        beta: c(&mut g, &[2]),
        conv2: c(&mut g, &[1, 2, 3, 3]),
    };
    [se, fw, cd]
        .into_iter()
        .map(|v| {
            let o = attention_forward(&mut g, xv, v, pooling, BnMode::Train).unwrap().omega.unwrap();
            g.value(o).data().to_vec()
        })
        .collect()
}


/// Whether reordering the frames of dyadic `vals` (`[2, 4, 4, 8]`, in
/// eighths) by `perm` leaves every variant's weights bit-identical.
pub fn permutation_exact(vals: &[i32], perm: &[usize], pooling: Pooling) -> bool {
    let t = 8;
    let data: Vec<f64> = vals.iter().map(|&v| v as f64 / 8.0).collect();
    let x = tensor(&[2, 4, 4, t], &data);
    let permuted: Vec<f64> = (0..data.len()).map(|i| data[i - i % t + perm[i % t]]).collect();
    let xp = tensor(&[2, 4, 4, t], &permuted);
    omegas(&x, pooling) == omegas(&xp, pooling)
}
