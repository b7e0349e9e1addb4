//! Smooth under-approximation of robustness.
//!
//! `min` is replaced by a log-sum-exp soft minimum and `max` by a
//! softmax-weighted mean. Both sit at or below the exact aggregation, so the
//! smooth robustness never exceeds the exact value, and the gap shrinks like
//! `1/b`.

use crate::stl::{EvalNamed, Formula, StlError, Trace};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothConfig {
    /// Sharpness of the soft aggregations.
    pub b: f64,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self { b: 15.0 }
    }
}

/// `m - ln(Σ exp(-b (x_i - m))) / b` with `m` the smallest primal value.
pub fn softmin<S: EvalNamed>(xs: &[S], b: f64) -> S {
    assert!(!xs.is_empty(), "softmin of nothing");
    if xs.len() == 1 {
        return xs[0];
    }
    let m = xs.iter().map(|x| x.value()).fold(f64::INFINITY, f64::min);
    let mut sum = ((xs[0] - m) * -b).exp();
    for &x in &xs[1..] {
        sum = sum + ((x - m) * -b).exp();
    }
    -(sum.ln() / b) + m
}

/// `Σ x_i w_i / Σ w_i` with `w_i = exp(b (x_i - M))`, `M` the largest primal value.
pub fn softmax_lb<S: EvalNamed>(xs: &[S], b: f64) -> S {
    assert!(!xs.is_empty(), "softmax of nothing");
    if xs.len() == 1 {
        return xs[0];
    }
    let m = xs.iter().map(|x| x.value()).fold(f64::NEG_INFINITY, f64::max);
    let w0 = ((xs[0] - m) * b).exp();
    let (mut num, mut den) = (xs[0] * w0, w0);
    for &x in &xs[1..] {
        let w = ((x - m) * b).exp();
        num = num + x * w;
        den = den + w;
    }
    num / den
}

pub fn smooth_robustness<S: EvalNamed>(f: &Formula, tr: &Trace<S>, cfg: &SmoothConfig) -> Result<S, StlError> {
    smooth_robustness_at(f, tr, 0, cfg)
}

pub fn smooth_robustness_at<S: EvalNamed>(
    f: &Formula,
    tr: &Trace<S>,
    k: usize,
    cfg: &SmoothConfig,
) -> Result<S, StlError> {
    f.check_dimension(tr.dim())?;
    let needed = k + f.horizon();
    if needed > tr.horizon() {
        return Err(StlError::TraceTooShort {
            needed,
            horizon: tr.horizon(),
        });
    }
    Ok(signal(f, tr, k, k, cfg.b)[0])
}

fn signal<S: EvalNamed>(f: &Formula, tr: &Trace<S>, from: usize, to: usize, b: f64) -> Vec<S> {
    let n = to - from + 1;
    match f {
        Formula::Pred(p) => (from..=to).map(|k| p.eval(tr.state(k))).collect(),
        Formula::And(cs) | Formula::Or(cs) => {
            let sigs: Vec<Vec<S>> = cs.iter().map(|c| signal(c, tr, from, to, b)).collect();
            let and = matches!(f, Formula::And(_));
            (0..n)
                .map(|i| {
                    let xs: Vec<S> = sigs.iter().map(|s| s[i]).collect();
                    if and {
                        softmin(&xs, b)
                    } else {
                        softmax_lb(&xs, b)
                    }
                })
                .collect()
        }
        Formula::Eventually(iv, c) | Formula::Always(iv, c) => {
            let s = signal(c, tr, from + iv.lo, to + iv.hi, b);
            let ev = matches!(f, Formula::Eventually(..));
            (0..n)
                .map(|i| {
                    let w = &s[i..i + iv.width()];
                    if ev {
                        softmax_lb(w, b)
                    } else {
                        softmin(w, b)
                    }
                })
                .collect()
        }
        Formula::Until(iv, l, r) | Formula::Release(iv, l, r) => {
            let until = matches!(f, Formula::Until(..));
            let sl = signal(l, tr, from, to + iv.hi, b);
            let sr = signal(r, tr, from + iv.lo, to + iv.hi, b);
            (0..n)
                .map(|i| {
                    let k = from + i;
                    let outer: Vec<S> = (k + iv.lo..=k + iv.hi)
                        .map(|kp| {
                            let mut inner: Vec<S> = sl[i..kp - from].to_vec();
                            inner.push(sr[kp - from - iv.lo]);
                            if until {
                                softmin(&inner, b)
                            } else {
                                softmax_lb(&inner, b)
                            }
                        })
                        .collect();
                    if until {
                        softmax_lb(&outer, b)
                    } else {
                        softmin(&outer, b)
                    }
                })
                .collect()
        }
    }
}

/// Number of nested aggregations on the deepest path; until and release count twice.
pub fn aggregation_depth(f: &Formula) -> usize {
    match f {
        Formula::Pred(_) => 0,
        Formula::And(cs) | Formula::Or(cs) => 1 + cs.iter().map(aggregation_depth).max().unwrap_or(0),
        Formula::Eventually(_, c) | Formula::Always(_, c) => 1 + aggregation_depth(c),
        Formula::Until(_, l, r) | Formula::Release(_, l, r) => 2 + aggregation_depth(l).max(aggregation_depth(r)),
    }
}

/// Largest number of operands of any single aggregation.
pub fn max_fan_in(f: &Formula) -> usize {
    match f {
        Formula::Pred(_) => 1,
        Formula::And(cs) | Formula::Or(cs) => cs.iter().map(max_fan_in).max().unwrap_or(1).max(cs.len()),
        Formula::Eventually(iv, c) | Formula::Always(iv, c) => iv.width().max(max_fan_in(c)),
        Formula::Until(iv, l, r) | Formula::Release(iv, l, r) => iv
            .width()
            .max(iv.hi + 1)
            .max(max_fan_in(l))
            .max(max_fan_in(r)),
    }
}

/// Upper bound on `robustness - smooth_robustness`, summing `ln(n)/b` along
/// the worst path. Never larger than `depth * ln(fan_in) / b`.
pub fn gap_bound(f: &Formula, b: f64) -> f64 {
    let l = |n: usize| (n as f64).ln() / b;
    match f {
        Formula::Pred(_) => 0.0,
        Formula::And(cs) | Formula::Or(cs) => {
            l(cs.len()) + cs.iter().map(|c| gap_bound(c, b)).fold(0.0, f64::max)
        }
        Formula::Eventually(iv, c) | Formula::Always(iv, c) => l(iv.width()) + gap_bound(c, b),
        Formula::Until(iv, lhs, rhs) | Formula::Release(iv, lhs, rhs) => {
            l(iv.width()) + l(iv.hi + 1) + gap_bound(lhs, b).max(gap_bound(rhs, b))
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tape;
    use crate::stl::{parse, random_formula, robustness};

    #[test]
    fn softmin_of_two() {
        let v = softmin(&[1.0, 2.0], 10.0);
        let closed = -0.1 * ((-10.0f64).exp() + (-20.0f64).exp()).ln();
        assert!((v - closed).abs() < 1e-15 && (v - 0.99999546).abs() < 1e-8, "{v}");
        assert_eq!(softmin(&[3.5], 10.0), 3.5);
        assert_eq!(softmax_lb(&[3.5], 10.0), 3.5);
    }

    #[test]
    fn soft_aggregations_stay_below_exact() {
        let xs = [0.3, -1.2, 2.0, 2.0, 0.0];
        for b in [0.5, 1.0, 15.0, 200.0] {
            let n = xs.len() as f64;
            let smin = softmin(&xs, b);
            let smax = softmax_lb(&xs, b);
            assert!(smin <= -1.2 && -1.2 - smin <= n.ln() / b + 1e-12);
            assert!(smax <= 2.0 && 2.0 - smax <= n.ln() / b + 1e-12);
        }
    }

    #[test]
    fn huge_sharpness_does_not_overflow() {
        let v = softmin(&[1e3, -1e3, 0.0], 1e4);
        assert!(v.is_finite() && (v + 1e3).abs() < 1e-9);
        let w = softmax_lb(&[1e3, -1e3, 0.0], 1e4);
        assert!(w.is_finite() && (w - 1e3).abs() < 1e-9);
    }

    #[test]
    fn lower_bound_and_gap_on_random_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let f = random_formula(&mut rng, 4);
            let xs: Vec<f64> = (0..=f.horizon() + 2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let tr = Trace::scalar(&xs).unwrap();
            let exact = robustness(&f, &tr).unwrap();
            let d = aggregation_depth(&f) as f64;
            let w = max_fan_in(&f) as f64;
            for b in [1.0, 15.0, 100.0] {
                let s = smooth_robustness(&f, &tr, &SmoothConfig { b }).unwrap();
                let gap = exact - s;
                let bound = gap_bound(&f, b);
                assert!(gap >= -1e-12, "{f}: smooth {s} above exact {exact}");
                assert!(gap <= bound + 1e-9, "{f}: gap {gap} > {bound}");
                assert!(bound <= d * w.ln() / b + 1e-12);
            }
        }
    }

    #[test]
    fn taped_evaluation_matches_plain_bit_for_bit() {
        let f = parse("U[1,3](x0 > -1, G[0,2](x0 + 0.5*x1 > 0)) && F[0,4](x1 < 1)").unwrap();
        let states: Vec<Vec<f64>> = (0..8).map(|k| vec![(k as f64 * 0.7).sin(), (k as f64).cos()]).collect();
        let cfg = SmoothConfig::default();
        let plain = smooth_robustness(&f, &Trace::new(states.clone()).unwrap(), &cfg).unwrap();
        let tape = Tape::new();
        let vars: Vec<Vec<_>> = states.iter().map(|s| tape.vars(s)).collect();
        let taped = smooth_robustness(&f, &Trace::new(vars).unwrap(), &cfg).unwrap();
        assert_eq!(plain.to_bits(), taped.value().to_bits());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f = parse("F[0,3](G[0,2](x0 > 0.2)) && U[0,3](x0 < 1.5, x0 > 0.8)").unwrap();
        let xs = [0.1, 0.5, 0.9, 1.2, 0.7, 0.4, 1.1];
        let cfg = SmoothConfig { b: 4.0 };
        let tape = Tape::new();
        let vars = tape.vars(&xs);
        let out = smooth_robustness(&f, &Trace::scalar(&vars).unwrap(), &cfg).unwrap();
        let grad = tape.backward(out, &vars).unwrap();
        let eval = |xs: &[f64]| smooth_robustness(&f, &Trace::scalar(xs).unwrap(), &cfg).unwrap();
        for i in 0..xs.len() {
            let h = 1e-6;
            let mut hi = xs.to_vec();
            let mut lo = xs.to_vec();
            hi[i] += h;
            lo[i] -= h;
            let fd = (eval(&hi) - eval(&lo)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "x{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn depth_and_fan_in() {
        let f = parse("F[0,3](G[0,9](x0 > 0)) && U[2,5](x0 > 0, x0 < 1)").unwrap();
        assert_eq!(aggregation_depth(&f), 3);
        assert_eq!(max_fan_in(&f), 10);
    }
}
