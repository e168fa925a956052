//! Oracle suites: the fast kernels against the brute-force references in
//! [`crate::oracle`]. Used by `trinas selftest` and the test suite.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cost::{flops_of, LayerShape};
use crate::opspace::{build_block, CATALOGUE};
use crate::oracle::{check_gradient, naive_conv2d};
use crate::seeding::substream;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Random conv geometry: `(x_shape, w_shape, stride, dilation, groups, padding)`.
pub fn random_geometry(rng: &mut ChaCha8Rng) -> ([usize; 4], [usize; 4], usize, usize, usize, usize) {
    let k: usize = [1, 3, 5][rng.random_range(0..3)];
    let d: usize = rng.random_range(1..=3);
    let s = rng.random_range(1..=2);
    let groups = [1, 2][rng.random_range(0..2)];
    let c_in = groups * rng.random_range(1..=3);
    let c_out = groups * rng.random_range(1..=3);
    // depthwise every so often
    let (c_out, groups) = if rng.random_bool(0.25) { (c_in, c_in) } else { (c_out, groups) };
    let span = d * (k - 1) + 1;
    let pad = if rng.random_bool(0.7) { d * (k - 1) / 2 } else { rng.random_range(0..=span) };
    let min_extent = span.saturating_sub(2 * pad).max(1);
    let h = rng.random_range(min_extent..=min_extent + 5);
    let w = rng.random_range(min_extent..=min_extent + 5);
    let n = rng.random_range(1..=2);
    ([n, c_in, h, w], [c_out, c_in / groups, k, k], s, d, groups, pad)
}

/// Tape convolution against the naive seven-loop reference.
pub fn conv_suite(seed: u64, trials: usize) -> SuiteReport {
    let mut rng = substream(seed, "selftest/conv");
    let mut failures = Vec::new();
    for t in 0..trials {
        let (xs, ws, s, d, g, p) = random_geometry(&mut rng);
        let x = randn(&mut rng, xs.iter().product());
        let w = randn(&mut rng, ws.iter().product());
        let (want, shape, _) = naive_conv2d(&x, xs, &w, ws, s, d, g, p);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(xs.to_vec(), x).expect("sized");
        let wv = tape.constant(ws.to_vec(), w).expect("sized");
        match tape.conv2d(xv, wv, s, d, g, p) {
            Ok(y) => {
                let worst = tape
                    .value(y)
                    .iter()
                    .zip(&want)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if tape.shape(y) != shape || worst > 1e-10 {
                    failures.push(format!("trial {t}: x {xs:?} w {ws:?} s{s} d{d} g{g} p{p}: max abs diff {worst:e}"));
                }
            }
            Err(e) => failures.push(format!("trial {t}: {e}")),
        }
    }
    SuiteReport {
        name: "convolution vs brute force",
        checks: trials,
        failures,
    }
}

/// A small graph touching every differentiable primitive the supernet uses:
/// grouped conv with bias and relu, max-pool, upsample, softmax mixing,
/// global pooling, linear, cross-entropy and smooth-L1.
fn probe_loss(tape: &mut Tape<f64>, theta: &[f64], requires_grad: bool) -> (Var, Var) {
    let leaf = tape.leaf(if requires_grad {
        Tensor::new(vec![theta.len()], theta.to_vec()).expect("sized").with_grad()
    } else {
        Tensor::new(vec![theta.len()], theta.to_vec()).expect("sized")
    });
    let mut at = 0;
    let mut take = |tape: &mut Tape<f64>, shape: Vec<usize>| -> Var {
        let n: usize = shape.iter().product();
        let v = slice(tape, leaf, at, n, shape);
        at += n;
        v
    };
    let x = take(tape, vec![2, 2, 6, 6]);
    let w1 = take(tape, vec![4, 1, 3, 3]);
    let b1 = take(tape, vec![4]);
    let w2 = take(tape, vec![4, 1, 3, 3]);
    let b2 = take(tape, vec![4]);
    let mixw = take(tape, vec![2]);
    let fc = take(tape, vec![3, 4]);
    let fb = take(tape, vec![3]);
    let bw = take(tape, vec![4, 4]);

    let h = tape.conv2d_bias_act(x, w1, b1, 1, 1, 2, 1, true).expect("probe shapes");
    let dw = tape.conv2d_bias_act(h, w2, b2, 1, 2, 4, 2, true).expect("probe shapes");
    let pooled = tape.maxpool2d(h, 2, 2).expect("probe shapes");
    let up = tape.upsample2x(pooled).expect("probe shapes");
    let sq = tape.square(up);
    let m = tape.softmax_rows(mixw).expect("row");
    let mixed = tape.weighted_sum(&[dw, sq], m).expect("same shapes");
    let g = tape.global_avg_pool(mixed).expect("probe shapes");
    let logits = tape.linear(g, fc, Some(fb)).expect("probe shapes");
    let ce = tape.cross_entropy(logits, &[2, 0]).expect("labels in range");
    let boxes = tape.linear(g, bw, None).expect("probe shapes");
    let target = tape.constant(vec![2, 4], vec![0.5, 0.5, 0.2, 0.3, 0.1, 0.9, 0.4, 0.4]).expect("sized");
    let sl = tape.smooth_l1(boxes, target).expect("same shapes");
    let sl = tape.mean(sl);
    (tape.add(ce, sl).expect("scalars"), leaf)
}

fn slice(tape: &mut Tape<f64>, leaf: Var, at: usize, n: usize, shape: Vec<usize>) -> Var {
    // one-hot selection keeps everything on the tape
    let len = tape.shape(leaf)[0];
    let mut sel = vec![0.0; n * len];
    for i in 0..n {
        sel[i * len + at + i] = 1.0;
    }
    let sel = tape.constant(vec![n, len], sel).expect("sized");
    let row = tape.reshape(leaf, vec![1, len]).expect("same size");
    let picked = tape.linear(row, sel, None).expect("shapes");
    tape.reshape(picked, shape).expect("same size")
}

/// Reverse-mode gradients against central differences on [`probe_loss`].
pub fn gradient_suite(seed: u64, trials: usize) -> SuiteReport {
    let mut rng = substream(seed, "selftest/grad");
    let n = 2 * 2 * 36 + 36 + 4 + 36 + 4 + 2 + 12 + 3 + 16;
    let mut failures = Vec::new();
    let mut checks = 0;
    for t in 0..trials {
        let theta = randn(&mut rng, n);
        let mut tape = Tape::new();
        let (loss, leaf) = probe_loss(&mut tape, &theta, true);
        let grads = tape.backward(loss).expect("scalar loss");
        let analytic = grads.get(leaf).expect("leaf gradient").to_vec();
        let mut f = |p: &[f64]| {
            let mut tp = Tape::new();
            let (l, _) = probe_loss(&mut tp, p, false);
            tp.scalar(l)
        };
        let coords: Vec<usize> = (0..8).map(|_| rng.random_range(0..n)).collect();
        let check = check_gradient(&mut f, &theta, &analytic, &coords, 1e-5);
        checks += coords.len();
        // relu kinks and max-pool ties make a few coordinates non-smooth;
        // require agreement either relatively or to the difference's noise floor
        for ((&c, &a), &num) in check.coordinates.iter().zip(&check.analytic).zip(&check.numeric) {
            if (a - num).abs() > 1e-6 && crate::oracle::relative_error(a, num) > 1e-4 {
                failures.push(format!("trial {t} coordinate {c}: analytic {a:e} numeric {num:e}"));
            }
        }
    }
    SuiteReport {
        name: "gradients vs finite differences",
        checks,
        failures,
    }
}

/// Closed-form MAC counts against the multiplies the brute-force
/// convolution performs, for every catalogue op.
pub fn flops_suite(seed: u64, shapes: usize) -> SuiteReport {
    let mut rng = substream(seed, "selftest/flops");
    let mut failures = Vec::new();
    let mut checks = 0;
    for _ in 0..shapes {
        let stride = rng.random_range(1..=2);
        let c_in = rng.random_range(1..=6);
        let c_out = if stride == 1 && rng.random_bool(0.5) { c_in } else { rng.random_range(1..=6) };
        let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let shape = LayerShape::new(c_in, c_out, h, w, stride);
        for op in CATALOGUE {
            checks += 1;
            let mut store = ParamStore::<f64>::new();
            let block = match build_block(&op, c_in, c_out, stride, "probe", &mut store, &mut rng) {
                Ok(b) => b,
                Err(e) => {
                    failures.push(format!("{op} at {shape:?}: {e}"));
                    continue;
                }
            };
            let mut xs = [1, c_in, h * stride, w * stride];
            let mut mults = 0;
            for u in &block.convs {
                let wt = store.get(u.weight);
                let ws: [usize; 4] = wt.shape().try_into().expect("4-d weight");
                let x = vec![0.0; xs.iter().product()];
                let (_, out, m) = naive_conv2d(&x, xs, wt.data(), ws, u.stride, u.dilation, u.groups, u.padding);
                mults += m;
                xs = out;
            }
            let want = flops_of(&op, &shape);
            if mults != want || xs[2..] != [h, w] {
                failures.push(format!("{op} at {shape:?}: closed form {want}, counted {mults}, output {xs:?}"));
            }
        }
    }
    SuiteReport {
        name: "MAC counts vs brute force",
        checks,
        failures,
    }
}

pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    vec![conv_suite(seed, 200), gradient_suite(seed, 10), flops_suite(seed, 20)]
}
