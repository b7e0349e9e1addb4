//! Exact quantitative and Boolean semantics.
//!
//! Robustness is computed bottom-up as signals: each sub-formula is evaluated
//! once over the window of time-steps its parent needs. The same routine
//! returns either bare values or values tagged with the predicate and time that
//! produced them, so [`robustness`] and [`critical`] never disagree.

use super::{Formula, Predicate, StlError, Trace};

/// The predicate and time-step whose value equals the robustness.
#[derive(Debug, Clone, Copy)]
pub struct CriticalWitness<'f> {
    pub time: usize,
    pub predicate: &'f Predicate,
    pub value: f64,
}

impl PartialEq for CriticalWitness<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && std::ptr::eq(self.predicate, other.predicate) && self.value == other.value
    }
}

trait Value<'f>: Copy {
    fn leaf(value: f64, time: usize, pred: &'f Predicate) -> Self;
    fn get(&self) -> f64;
}

impl<'f> Value<'f> for f64 {
    fn leaf(value: f64, _: usize, _: &'f Predicate) -> Self {
        value
    }
    fn get(&self) -> f64 {
        *self
    }
}

impl<'f> Value<'f> for CriticalWitness<'f> {
    fn leaf(value: f64, time: usize, predicate: &'f Predicate) -> Self {
        CriticalWitness { time, predicate, value }
    }
    fn get(&self) -> f64 {
        self.value
    }
}

// Candidates arrive in tie-break order; only a strict improvement replaces.
fn min_of<'f, V: Value<'f>>(it: impl IntoIterator<Item = V>) -> V {
    let mut it = it.into_iter();
    let mut best = it.next().expect("non-empty aggregation");
    for c in it {
        if c.get() < best.get() {
            best = c;
        }
    }
    best
}

fn max_of<'f, V: Value<'f>>(it: impl IntoIterator<Item = V>) -> V {
    let mut it = it.into_iter();
    let mut best = it.next().expect("non-empty aggregation");
    for c in it {
        if c.get() > best.get() {
            best = c;
        }
    }
    best
}

fn check(f: &Formula, tr: &Trace, k: usize) -> Result<(), StlError> {
    f.check_dimension(tr.dim())?;
    let needed = k + f.horizon();
    if needed > tr.horizon() {
        return Err(StlError::TraceTooShort {
            needed,
            horizon: tr.horizon(),
        });
    }
    Ok(())
}

/// Values of `f` at times `from..=to`.
fn signal<'f, V: Value<'f>>(f: &'f Formula, tr: &Trace, from: usize, to: usize) -> Vec<V> {
    match f {
        Formula::Pred(p) => (from..=to).map(|k| V::leaf(p.eval(tr.state(k)), k, p)).collect(),
        Formula::And(cs) | Formula::Or(cs) => {
            let sigs: Vec<Vec<V>> = cs.iter().map(|c| signal(c, tr, from, to)).collect();
            (0..=to - from)
                .map(|i| {
                    let it = sigs.iter().map(|s| s[i]);
                    if matches!(f, Formula::And(_)) {
                        min_of(it)
                    } else {
                        max_of(it)
                    }
                })
                .collect()
        }
        Formula::Eventually(iv, c) | Formula::Always(iv, c) => {
            let s: Vec<V> = signal(c, tr, from + iv.lo, to + iv.hi);
            (0..=to - from)
                .map(|i| {
                    let window = s[i..i + iv.width()].iter().copied();
                    if matches!(f, Formula::Eventually(..)) {
                        max_of(window)
                    } else {
                        min_of(window)
                    }
                })
                .collect()
        }
        Formula::Until(iv, l, r) | Formula::Release(iv, l, r) => {
            let until = matches!(f, Formula::Until(..));
            let sl: Vec<V> = signal(l, tr, from, to + iv.hi);
            let sr: Vec<V> = signal(r, tr, from + iv.lo, to + iv.hi);
            (0..=to - from)
                .map(|i| {
                    let k = from + i;
                    let candidates = (k + iv.lo..=k + iv.hi).map(|kp| {
                        let left = sl[i..kp - from].iter().copied();
                        let right = std::iter::once(sr[kp - from - iv.lo]);
                        if until {
                            min_of(left.chain(right))
                        } else {
                            max_of(left.chain(right))
                        }
                    });
                    if until {
                        max_of(candidates)
                    } else {
                        min_of(candidates)
                    }
                })
                .collect()
        }
    }
}

/// Robustness of `f` on `tr` at time 0.
pub fn robustness(f: &Formula, tr: &Trace) -> Result<f64, StlError> {
    robustness_at(f, tr, 0)
}

pub fn robustness_at(f: &Formula, tr: &Trace, k: usize) -> Result<f64, StlError> {
    check(f, tr, k)?;
    Ok(signal::<f64>(f, tr, k, k)[0])
}

/// The critical predicate and time-step at time 0.
///
/// Ties go to the smaller time-step, then to the operand written first.
pub fn critical<'f>(f: &'f Formula, tr: &Trace) -> Result<CriticalWitness<'f>, StlError> {
    check(f, tr, 0)?;
    Ok(signal::<CriticalWitness<'f>>(f, tr, 0, 0)[0])
}

/// Boolean satisfaction at time 0.
pub fn satisfies(f: &Formula, tr: &Trace) -> Result<bool, StlError> {
    holds(f, tr, 0)
}

/// Boolean satisfaction at time `k`, evaluated directly from the definitions.
pub fn holds(f: &Formula, tr: &Trace, k: usize) -> Result<bool, StlError> {
    check(f, tr, k)?;
    Ok(holds_unchecked(f, tr, k))
}

fn holds_unchecked(f: &Formula, tr: &Trace, k: usize) -> bool {
    match f {
        Formula::Pred(p) => {
            let h = p.eval(tr.state(k));
            if p.strict {
                h > 0.0
            } else {
                h >= 0.0
            }
        }
        Formula::And(cs) => cs.iter().all(|c| holds_unchecked(c, tr, k)),
        Formula::Or(cs) => cs.iter().any(|c| holds_unchecked(c, tr, k)),
        Formula::Eventually(iv, c) => (k + iv.lo..=k + iv.hi).any(|t| holds_unchecked(c, tr, t)),
        Formula::Always(iv, c) => (k + iv.lo..=k + iv.hi).all(|t| holds_unchecked(c, tr, t)),
        Formula::Until(iv, l, r) => (k + iv.lo..=k + iv.hi)
            .any(|t| holds_unchecked(r, tr, t) && (k..t).all(|u| holds_unchecked(l, tr, u))),
        Formula::Release(iv, l, r) => (k + iv.lo..=k + iv.hi)
            .all(|t| holds_unchecked(r, tr, t) || (k..t).any(|u| holds_unchecked(l, tr, u))),
    }
}
