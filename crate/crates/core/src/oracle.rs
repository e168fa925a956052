//! Reference implementations used to cross-check the fast paths: a naive
//! seven-loop convolution over an explicitly padded input (which also counts
//! its multiplies) and a central finite-difference gradient checker.
//!
//! Nothing here shares code with the kernels it checks.

/// Naive grouped, dilated, strided convolution. Returns the output and the
/// number of multiplies performed (padded taps included).
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    x_shape: [usize; 4],
    w: &[f64],
    w_shape: [usize; 4],
    stride: usize,
    dilation: usize,
    groups: usize,
    padding: usize,
) -> (Vec<f64>, [usize; 4], u64) {
    let [n, c_in, h, wd] = x_shape;
    let [c_out, cin_g, k, _] = w_shape;
    let hp = h + 2 * padding;
    let wp = wd + 2 * padding;
    let mut padded = vec![0.0; n * c_in * hp * wp];
    for b in 0..n {
        for c in 0..c_in {
            for i in 0..h {
                for j in 0..wd {
                    padded[((b * c_in + c) * hp + i + padding) * wp + j + padding] =
                        x[((b * c_in + c) * h + i) * wd + j];
                }
            }
        }
    }
    let span = dilation * (k - 1) + 1;
    let oh = (hp - span) / stride + 1;
    let ow = (wp - span) / stride + 1;
    let cout_g = c_out / groups;
    let mut out = vec![0.0; n * c_out * oh * ow];
    let mut mults = 0u64;
    for b in 0..n {
        for oc in 0..c_out {
            let g = oc / cout_g;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for icg in 0..cin_g {
                        let ic = g * cin_g + icg;
                        for ki in 0..k {
                            for kj in 0..k {
                                let xi = i * stride + ki * dilation;
                                let xj = j * stride + kj * dilation;
                                acc += padded[((b * c_in + ic) * hp + xi) * wp + xj]
                                    * w[((oc * cin_g + icg) * k + ki) * k + kj];
                                mults += 1;
                            }
                        }
                    }
                    out[((b * c_out + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (out, [n, c_out, oh, ow], mults)
}

/// Central finite difference of `f` at `x` along coordinate `i`.
pub fn central_difference<F>(f: &mut F, x: &mut [f64], i: usize, h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Relative error with an absolute floor so that exact zeros compare sanely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / scale
}

/// Outcome of a finite-difference comparison over a set of coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub coordinates: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_relative_error: f64,
}

/// Compares `analytic[i]` with central differences of `f` for each `i` in
/// `coords`.
pub fn check_gradient<F>(f: &mut F, x: &[f64], analytic: &[f64], coords: &[usize], h: f64) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = x.to_vec();
    let mut a = Vec::with_capacity(coords.len());
    let mut num = Vec::with_capacity(coords.len());
    let mut worst = 0.0f64;
    for &i in coords {
        let d = central_difference(f, &mut point, i, h);
        worst = worst.max(relative_error(analytic[i], d));
        a.push(analytic[i]);
        num.push(d);
    }
    GradCheck {
        coordinates: coords.to_vec(),
        analytic: a,
        numeric: num,
        max_relative_error: worst,
    }
}

/// Loss a candidate subset can reach on the scalar chain task
/// `y = e^s · g_{o_1} · … · g_{o_L} · x`, target `y = x`: averaged over every
/// discrete decode, 0 when the gain product is positive (some `s` fits it
/// exactly) and 1 otherwise (the best scale is then `y = 0`, leaving
/// `E[x²] = 1`).
pub fn chain_subset_loss(gains: &[f64], subset: &[usize], layers: usize) -> f64 {
    let k = subset.len();
    let total = k.pow(layers as u32);
    let mut bad = 0usize;
    for code in 0..total {
        let mut c = code;
        let mut product = 1.0;
        for _ in 0..layers {
            product *= gains[subset[c % k]];
            c /= k;
        }
        if product <= 0.0 {
            bad += 1;
        }
    }
    bad as f64 / total as f64
}

/// Every `k`-subset of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// All `k`-subsets of minimal [`chain_subset_loss`].
pub fn best_chain_subsets(gains: &[f64], k: usize, layers: usize) -> Vec<Vec<usize>> {
    let scored: Vec<(Vec<usize>, f64)> = subsets(gains.len(), k)
        .into_iter()
        .map(|s| {
            let l = chain_subset_loss(gains, &s, layers);
            (s, l)
        })
        .collect();
    let best = scored.iter().map(|(_, l)| *l).fold(f64::INFINITY, f64::min);
    scored.into_iter().filter(|(_, l)| *l == best).map(|(s, _)| s).collect()
}
