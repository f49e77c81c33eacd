//! Rolling-window kernels. Each kernel receives one column and the window
//! length and fills an output column. Windows require `N` full observations;
//! a window holding any NaN yields NaN, except for `Count`.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView1, Axis};

use crate::expr::Operator;

pub(super) fn unary(op: Operator, x: &Array2<f64>, w: usize, q: f64) -> Array2<f64> {
    let mut out = Array2::from_elem(x.dim(), f64::NAN);
    for (src, mut dst) in x.axis_iter(Axis(1)).zip(out.axis_iter_mut(Axis(1))) {
        let col = column(src);
        let res = unary_column(op, &col, w, q);
        for (d, v) in dst.iter_mut().zip(res) {
            *d = v;
        }
    }
    out
}

pub(super) fn pairwise(op: Operator, x: &Array2<f64>, y: &Array2<f64>, w: usize) -> Array2<f64> {
    let mut out = Array2::from_elem(x.dim(), f64::NAN);
    for ((xs, ys), mut dst) in x
        .axis_iter(Axis(1))
        .zip(y.axis_iter(Axis(1)))
        .zip(out.axis_iter_mut(Axis(1)))
    {
        let (a, b) = (column(xs), column(ys));
        let res = pairwise_column(op, &a, &b, w);
        for (d, v) in dst.iter_mut().zip(res) {
            *d = v;
        }
    }
    out
}

fn column(v: ArrayView1<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// `prefix[i]` = number of NaNs among the first `i` values.
fn nan_prefix(x: &[f64]) -> Vec<usize> {
    let mut p = Vec::with_capacity(x.len() + 1);
    p.push(0);
    for v in x {
        p.push(p.last().unwrap() + usize::from(v.is_nan()));
    }
    p
}

/// Applies `f` to every complete, NaN-free window.
fn windowed(x: &[f64], w: usize, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut out = vec![f64::NAN; x.len()];
    if w == 0 || w > x.len() {
        return out;
    }
    let nans = nan_prefix(x);
    for t in w - 1..x.len() {
        if nans[t + 1] - nans[t + 1 - w] == 0 {
            out[t] = f(&x[t + 1 - w..=t]);
        }
    }
    out
}

fn unary_column(op: Operator, x: &[f64], w: usize, q: f64) -> Vec<f64> {
    use Operator::*;
    match op {
        Mean => windowed(x, w, |s| sum(s) / s.len() as f64),
        Sum => windowed(x, w, sum),
        Std => windowed(x, w, |s| sample_var(s).sqrt()),
        Var => windowed(x, w, sample_var),
        Max => extremum(x, w, true, false),
        Min => extremum(x, w, false, false),
        IdxMax => extremum(x, w, true, true),
        IdxMin => extremum(x, w, false, true),
        Med => windowed(x, w, median),
        Mad => windowed(x, w, mean_abs_dev),
        Rank => windowed(x, w, window_rank),
        Quantile => windowed(x, w, |s| quantile(s, q)),
        Count => count(x, w),
        Ref => lag(x, w, |_, past| past),
        Delta => lag(x, w, |now, past| now - past),
        Slope => windowed(x, w, |s| regress(s).map_or(f64::NAN, |r| r.slope)),
        Resi => windowed(x, w, |s| regress(s).map_or(f64::NAN, |r| r.last_residual)),
        Rsquare => windowed(x, w, |s| regress(s).map_or(f64::NAN, |r| r.r_squared)),
        Skew => windowed(x, w, skew),
        Kurt => windowed(x, w, kurt),
        _ => unreachable!("{op} is not a single-input rolling operator"),
    }
}

fn pairwise_column(op: Operator, x: &[f64], y: &[f64], w: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![f64::NAN; n];
    if w == 0 || w > n {
        return out;
    }
    let joint: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| if a.is_nan() || b.is_nan() { f64::NAN } else { 0.0 })
        .collect();
    let nans = nan_prefix(&joint);
    for t in w - 1..n {
        if nans[t + 1] - nans[t + 1 - w] != 0 {
            continue;
        }
        let (xs, ys) = (&x[t + 1 - w..=t], &y[t + 1 - w..=t]);
        out[t] = match op {
            Operator::Cov => covariance(xs, ys),
            Operator::Corr => correlation(xs, ys),
            _ => unreachable!("{op} is not a pairwise rolling operator"),
        };
    }
    out
}

fn sum(s: &[f64]) -> f64 {
    s.iter().sum()
}

fn all_equal(s: &[f64]) -> bool {
    s.iter().all(|v| *v == s[0])
}

fn sample_var(s: &[f64]) -> f64 {
    let n = s.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = sum(s) / n as f64;
    s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
}

fn median(s: &[f64]) -> f64 {
    let mut v = s.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean_abs_dev(s: &[f64]) -> f64 {
    let m = sum(s) / s.len() as f64;
    s.iter().map(|v| (v - m).abs()).sum::<f64>() / s.len() as f64
}

/// Average-rank percentile of the last value within its window, in (0, 1].
fn window_rank(s: &[f64]) -> f64 {
    let cur = *s.last().unwrap();
    let less = s.iter().filter(|v| **v < cur).count();
    let equal = s.iter().filter(|v| **v == cur).count();
    (less as f64 + (equal as f64 + 1.0) / 2.0) / s.len() as f64
}

fn quantile(s: &[f64], q: f64) -> f64 {
    let mut v = s.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

fn count(x: &[f64], w: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; x.len()];
    if w == 0 || w > x.len() {
        return out;
    }
    let mut valid = 0usize;
    for t in 0..x.len() {
        valid += usize::from(!x[t].is_nan());
        if t >= w {
            valid -= usize::from(!x[t - w].is_nan());
        }
        if t + 1 >= w {
            out[t] = valid as f64;
        }
    }
    out
}

fn lag(x: &[f64], w: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|t| {
            if t < w {
                f64::NAN
            } else {
                let v = f(x[t], x[t - w]);
                if v.is_finite() {
                    v
                } else {
                    f64::NAN
                }
            }
        })
        .collect()
}

/// Rolling max/min (or the number of rows since it) with a monotone deque.
/// Ties resolve to the most recent row.
fn extremum(x: &[f64], w: usize, is_max: bool, want_index: bool) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![f64::NAN; n];
    if w == 0 || w > n {
        return out;
    }
    let nans = nan_prefix(x);
    let mut dq: VecDeque<usize> = VecDeque::new();
    for t in 0..n {
        if t >= w && dq.front() == Some(&(t - w)) {
            dq.pop_front();
        }
        if !x[t].is_nan() {
            while let Some(&b) = dq.back() {
                let dominated = if is_max { x[b] <= x[t] } else { x[b] >= x[t] };
                if dominated {
                    dq.pop_back();
                } else {
                    break;
                }
            }
            dq.push_back(t);
        }
        if t + 1 >= w && nans[t + 1] - nans[t + 1 - w] == 0 {
            let front = *dq.front().expect("window is non-empty");
            out[t] = if want_index {
                (t - front) as f64
            } else {
                x[front]
            };
        }
    }
    out
}

struct Regression {
    slope: f64,
    last_residual: f64,
    r_squared: f64,
}

/// OLS of the window values on the time index `0..N`.
fn regress(s: &[f64]) -> Option<Regression> {
    let n = s.len();
    if n < 2 {
        return None;
    }
    let t_mean = (n - 1) as f64 / 2.0;
    let y_mean = sum(s) / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, y) in s.iter().enumerate() {
        let dt = i as f64 - t_mean;
        sxy += dt * (y - y_mean);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * t_mean;
    let fitted = |i: usize| intercept + slope * i as f64;
    let last_residual = s[n - 1] - fitted(n - 1);
    // sxy^2 / (sxx * syy) equals 1 - SSres/SStot for OLS with an intercept
    // but works on centred deviations only, so near-constant windows do not
    // cancel catastrophically.
    let r_squared = if all_equal(s) {
        f64::NAN
    } else {
        let syy: f64 = s.iter().map(|y| (y - y_mean).powi(2)).sum();
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    Some(Regression {
        slope,
        last_residual,
        r_squared,
    })
}

/// Central moments m2, m3, m4 (divisor N) about the window mean.
fn central_moments(s: &[f64]) -> (f64, f64, f64) {
    let n = s.len() as f64;
    let m = sum(s) / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in s {
        let d = v - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    (m2 / n, m3 / n, m4 / n)
}

/// Adjusted Fisher-Pearson sample skewness.
fn skew(s: &[f64]) -> f64 {
    let n = s.len();
    if n < 3 || all_equal(s) {
        return f64::NAN;
    }
    let (m2, m3, _) = central_moments(s);
    let nf = n as f64;
    let g1 = m3 / m2.powf(1.5);
    g1 * (nf * (nf - 1.0)).sqrt() / (nf - 2.0)
}

/// Bias-corrected sample excess kurtosis.
fn kurt(s: &[f64]) -> f64 {
    let n = s.len();
    if n < 4 || all_equal(s) {
        return f64::NAN;
    }
    let (m2, _, m4) = central_moments(s);
    let nf = n as f64;
    let g2 = m4 / (m2 * m2) - 3.0;
    ((nf + 1.0) * g2 + 6.0) * (nf - 1.0) / ((nf - 2.0) * (nf - 3.0))
}

fn covariance(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return f64::NAN;
    }
    let mx = sum(x) / n as f64;
    let my = sum(y) / n as f64;
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / (n - 1) as f64
}

fn correlation(x: &[f64], y: &[f64]) -> f64 {
    if x.len() < 2 || all_equal(x) || all_equal(y) {
        return f64::NAN;
    }
    let n = x.len() as f64;
    let mx = sum(x) / n;
    let my = sum(y) / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    let r = sxy / (sxx * syy).sqrt();
    if r.is_finite() {
        r.clamp(-1.0, 1.0)
    } else {
        f64::NAN
    }
}
