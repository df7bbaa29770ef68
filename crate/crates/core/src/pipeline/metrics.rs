//! Confusion counts, rates and the Matthews correlation coefficient.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_predictions(predicted: &[bool], actual: &[bool]) -> Self {
        let mut c = ConfusionCounts::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.fp + self.tn
    }

    pub fn total(&self) -> u64 {
        self.positives() + self.negatives()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub tpr: f64,
    pub fpr: f64,
    pub mcc: f64,
}

/// TPR, FPR and MCC, each correctly rounded. A rate with an empty
/// denominator is 0, and MCC is 0 whenever a marginal is empty.
pub fn score(c: &ConfusionCounts) -> Result<Scores> {
    if c.total() == 0 {
        return Err(Error::EmptyTestSet);
    }
    let rate = |a: u64, b: u64| if b == 0 { 0.0 } else { ratio(a, b) };
    Ok(Scores { tpr: rate(c.tp, c.positives()), fpr: rate(c.fp, c.negatives()), mcc: mcc(c) })
}

fn ratio(a: u64, b: u64) -> f64 {
    if a < (1 << 53) && b < (1 << 53) {
        return a as f64 / b as f64;
    }
    round_to_nearest(a as f64 / b as f64, |(m, e)| {
        // compare a / b against m * 2^e
        cmp_scaled(&(BigUint::from(a)), &(m * BigUint::from(b)), e)
    })
}

pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, fp, tn, fn_) = (c.tp as u128, c.fp as u128, c.tn as u128, c.fn_ as u128);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0) {
        return 0.0;
    }
    let (pos, neg) = (tp * tn, fp * fn_);
    let (mag, sign) = if pos >= neg { (pos - neg, 1.0) } else { (neg - pos, -1.0) };
    if mag == 0 {
        return 0.0;
    }
    let den = BigUint::from(factors[0] * factors[1]) * BigUint::from(factors[2] * factors[3]);
    let num2 = BigUint::from(mag) * BigUint::from(mag);
    let estimate = mag as f64 / ((factors[0] * factors[1]) as f64).sqrt() / ((factors[2] * factors[3]) as f64).sqrt();
    let m = round_to_nearest(estimate, |(mm, e)| {
        // compare mag / sqrt(den) against mm * 2^e via mag^2 vs (mm * 2^e)^2 * den
        cmp_scaled(&num2, &(&mm * &mm * &den), 2 * e)
    });
    sign * m.min(1.0)
}

/// `x = m * 2^e` exactly.
fn dyadic(x: f64) -> (u64, i32) {
    if x == 0.0 {
        return (0, 0);
    }
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    if exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp - 1075)
    }
}

/// Ordering of `lhs` against `rhs * 2^e`.
fn cmp_scaled(lhs: &BigUint, rhs: &BigUint, e: i32) -> std::cmp::Ordering {
    if e >= 0 {
        lhs.cmp(&(rhs << e as u32))
    } else {
        (lhs << (-e) as u32).cmp(rhs)
    }
}

/// Walks from `estimate` to the float nearest the target value, given
/// `vs_mid(mid)` = ordering of the target against `mid`. Ties go to the
/// even mantissa.
fn round_to_nearest(estimate: f64, vs_mid: impl Fn((BigUint, i32)) -> std::cmp::Ordering) -> f64 {
    use std::cmp::Ordering::*;
    let mut m = estimate.max(0.0);
    loop {
        let up = m.next_up();
        match vs_mid(midpoint(m, up)) {
            Greater => {
                m = up;
                continue;
            }
            Equal if m.to_bits() & 1 == 1 => return up,
            _ => {}
        }
        if m > 0.0 {
            let down = m.next_down();
            match vs_mid(midpoint(down, m)) {
                Less => {
                    m = down;
                    continue;
                }
                Equal if m.to_bits() & 1 == 1 => return down,
                _ => {}
            }
        }
        return m;
    }
}

/// Exact midpoint of two non-negative doubles as `m * 2^e`.
fn midpoint(x: f64, y: f64) -> (BigUint, i32) {
    let ((mx, ex), (my, ey)) = (dyadic(x), dyadic(y));
    let e = ex.min(ey);
    ((BigUint::from(mx) << (ex - e) as u32) + (BigUint::from(my) << (ey - e) as u32), e - 1)
}
