//! Lane polynomials: one coefficient vector per 60-bit lane, shared x-coordinates.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{batch_inverse, Fp};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanePolynomial {
    /// `lanes[l][k]` is the coefficient of `x^k` in lane `l`.
    lanes: Vec<Vec<Fp>>,
}

impl LanePolynomial {
    /// Every lane must carry the same nonzero number of coefficients.
    pub fn from_lanes(lanes: Vec<Vec<Fp>>) -> Result<Self> {
        let len = lanes.first().map_or(0, Vec::len);
        if len == 0 || lanes.iter().any(|l| l.len() != len) {
            return Err(Error::invalid("lane coefficient vectors must share a nonzero length"));
        }
        Ok(LanePolynomial { lanes })
    }

    pub fn lanes(&self) -> &[Vec<Fp>] {
        &self.lanes
    }

    pub fn lane_count(&self) -> usize {
        self.lanes.len()
    }

    pub fn degree(&self) -> usize {
        self.lanes[0].len() - 1
    }

    /// Bandwidth cost of shipping the coefficients, in blocks.
    pub fn coefficient_blocks(&self) -> usize {
        self.degree() + 1
    }

    /// Horner evaluation of every lane at `x`.
    pub fn eval(&self, x: Fp) -> Vec<Fp> {
        self.lanes.iter().map(|c| c.iter().rev().fold(Fp::ZERO, |acc, &k| acc * x + k)).collect()
    }
}

pub fn poly_eval(poly: &LanePolynomial, x: Fp) -> Vec<Fp> {
    poly.eval(x)
}

/// The unique lane polynomial of degree `points.len() - 1` through `points`.
///
/// O(n² · lanes): the master polynomial `∏(x - x_i)` is divided by each
/// `(x - x_i)` in turn and the barycentric weights are inverted in one batch.
pub fn lagrange_interpolate(points: &[(Fp, Vec<Fp>)]) -> Result<LanePolynomial> {
    let n = points.len();
    if n == 0 {
        return Err(Error::invalid("interpolation needs at least one point"));
    }
    let width = points[0].1.len();
    if width == 0 || points.iter().any(|(_, y)| y.len() != width) {
        return Err(Error::invalid("all points must carry the same nonzero lane count"));
    }
    let mut seen = HashSet::with_capacity(n);
    for (x, _) in points {
        if !seen.insert(*x) {
            return Err(Error::invalid(format!("duplicate x-coordinate {x:?}")));
        }
    }

    // master[k] is the coefficient of x^k in ∏(x - x_i), degree n.
    let mut master = vec![Fp::ZERO; n + 1];
    master[0] = Fp::ONE;
    for (i, (xi, _)) in points.iter().enumerate() {
        for k in (1..=i + 1).rev() {
            master[k] = master[k - 1] - *xi * master[k];
        }
        master[0] = -(*xi * master[0]);
    }

    let denoms: Vec<Fp> = points
        .iter()
        .enumerate()
        .map(|(i, (xi, _))| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .fold(Fp::ONE, |acc, (_, (xj, _))| acc * (*xi - *xj))
        })
        .collect();
    let weights = batch_inverse(&denoms);

    let mut lanes = vec![vec![Fp::ZERO; n]; width];
    let mut quotient = vec![Fp::ZERO; n];
    for (i, (xi, ys)) in points.iter().enumerate() {
        // master / (x - xi) by synthetic division, high to low.
        let mut carry = Fp::ZERO;
        for k in (0..n).rev() {
            carry = master[k + 1] + carry * *xi;
            quotient[k] = carry;
        }
        for (lane, &y) in lanes.iter_mut().zip(ys) {
            let scale = y * weights[i];
            if scale.is_zero() {
                continue;
            }
            for (c, &q) in lane.iter_mut().zip(&quotient) {
                *c = *c + scale * q;
            }
        }
    }
    Ok(LanePolynomial { lanes })
}
