use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use super::{ContinuousSystem, ModelError, Result};
use crate::linalg::{self, Mat};

/// Polynomial ratio with coefficients listed from the highest power down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rational {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

impl Rational {
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Self {
        Self { num, den }
    }

    pub fn eval(&self, s: Complex<f64>) -> Complex<f64> {
        poly_eval(&self.num, s) / poly_eval(&self.den, s)
    }
}

/// Matrix of rational entries; `None` is an identically zero entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub entries: Vec<Vec<Option<Rational>>>,
}

impl TransferMatrix {
    pub fn outputs(&self) -> usize {
        self.entries.len()
    }

    pub fn inputs(&self) -> usize {
        self.entries.first().map_or(0, |r| r.len())
    }

    pub fn eval(&self, s: Complex<f64>) -> nalgebra::DMatrix<Complex<f64>> {
        nalgebra::DMatrix::from_fn(self.outputs(), self.inputs(), |i, j| {
            self.entries[i][j].as_ref().map_or(Complex::new(0.0, 0.0), |r| r.eval(s))
        })
    }
}

fn poly_eval(p: &[f64], s: Complex<f64>) -> Complex<f64> {
    p.iter().fold(Complex::new(0.0, 0.0), |acc, &c| acc * s + c)
}

fn trim(p: &[f64]) -> Vec<f64> {
    let scale = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let first = p.iter().position(|v| v.abs() > 1e-12 * scale).unwrap_or(p.len());
    if first == p.len() {
        vec![0.0]
    } else {
        p[first..].to_vec()
    }
}

fn degree(p: &[f64]) -> usize {
    trim(p).len() - 1
}

fn is_zero(p: &[f64]) -> bool {
    p.iter().all(|&v| v == 0.0)
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Polynomial long division, returns (quotient, remainder).
fn poly_divmod(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let b = trim(b);
    let mut rem = trim(a);
    if rem.len() < b.len() {
        return (vec![0.0], rem);
    }
    let qlen = rem.len() - b.len() + 1;
    let mut quot = vec![0.0; qlen];
    for i in 0..qlen {
        let f = rem[i] / b[0];
        quot[i] = f;
        for (j, &bj) in b.iter().enumerate() {
            rem[i + j] -= f * bj;
        }
    }
    let tail = rem[qlen..].to_vec();
    (quot, if tail.is_empty() { vec![0.0] } else { tail })
}

fn monic(p: &[f64]) -> Vec<f64> {
    let p = trim(p);
    let lead = p[0];
    p.iter().map(|v| v / lead).collect()
}

/// Monic greatest common divisor by the Euclidean algorithm, with
/// remainders below a relative tolerance treated as zero.
fn poly_gcd(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut x = monic(a);
    let mut y = monic(b);
    if x.len() < y.len() {
        std::mem::swap(&mut x, &mut y);
    }
    loop {
        if y.len() == 1 {
            // Nonzero constant: coprime.
            return vec![1.0];
        }
        let (_, r) = poly_divmod(&x, &y);
        let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if r.iter().all(|v| v.abs() <= 1e-9 * scale) {
            return monic(&y);
        }
        x = y;
        y = monic(&r);
    }
}

fn poly_lcm(a: &[f64], b: &[f64]) -> Vec<f64> {
    let g = poly_gcd(a, b);
    let (q, _) = poly_divmod(&monic(b), &g);
    monic(&poly_mul(&monic(a), &q))
}

/// State-space realization of a proper transfer matrix.
///
/// Each output row is realized in observable canonical form over the least
/// common multiple of its denominators; the stacked realization is then
/// restricted to its controllable subspace (rank tolerance 1e-9). When
/// nothing is uncontrollable the canonical coordinates are kept unchanged.
pub fn realize_transfer_function(tf: &TransferMatrix) -> Result<ContinuousSystem> {
    let p = tf.outputs();
    let m = tf.inputs();
    if p == 0 || m == 0 || tf.entries.iter().any(|r| r.len() != m) {
        return Err(ModelError::Validation("transfer matrix must be rectangular and nonempty".into()));
    }
    for (i, row) in tf.entries.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            if let Some(r) = e {
                if is_zero(&r.den) {
                    return Err(ModelError::Validation(format!("entry ({i},{j}) has a zero denominator")));
                }
                if !is_zero(&r.num) && degree(&r.num) > degree(&r.den) {
                    return Err(ModelError::Validation(format!("entry ({i},{j}) is improper")));
                }
            }
        }
    }

    let mut blocks: Vec<(Mat, Mat, Vec<f64>)> = Vec::with_capacity(p);
    for row in &tf.entries {
        let dens: Vec<&Vec<f64>> = row.iter().flatten().filter(|r| !is_zero(&r.num)).map(|r| &r.den).collect();
        let lcm = dens.iter().fold(vec![1.0], |acc, d| poly_lcm(&acc, d));
        let k = lcm.len() - 1;
        let mut a = Mat::zeros(k, k);
        for i in 0..k {
            a[(i, 0)] = -lcm[i + 1];
            if i + 1 < k {
                a[(i, i + 1)] = 1.0;
            }
        }
        let mut b = Mat::zeros(k, m);
        let mut feedthrough = vec![0.0; m];
        for (j, e) in row.iter().enumerate() {
            let Some(r) = e else { continue };
            if is_zero(&r.num) {
                continue;
            }
            let den = trim(&r.den);
            let (cofactor, _) = poly_divmod(&lcm, &monic(&den));
            let scaled: Vec<f64> = trim(&r.num).iter().map(|v| v / den[0]).collect();
            let num = poly_mul(&scaled, &cofactor);
            let mut padded = vec![0.0; (k + 1).saturating_sub(num.len())];
            padded.extend_from_slice(&num[num.len().saturating_sub(k + 1)..]);
            feedthrough[j] = padded[0];
            for i in 0..k {
                b[(i, j)] = padded[i + 1] - padded[0] * lcm[i + 1];
            }
        }
        blocks.push((a, b, feedthrough));
    }

    let n: usize = blocks.iter().map(|b| b.0.nrows()).sum();
    if n == 0 {
        return Err(ModelError::Validation("transfer matrix is static, no states to realize".into()));
    }
    let mut a = Mat::zeros(n, n);
    let mut b = Mat::zeros(n, m);
    let mut c = Mat::zeros(p, n);
    let mut d = Mat::zeros(p, m);
    let mut off = 0;
    for (i, (ab, bb, db)) in blocks.iter().enumerate() {
        let k = ab.nrows();
        a.view_mut((off, off), (k, k)).copy_from(ab);
        b.view_mut((off, 0), (k, m)).copy_from(bb);
        if k > 0 {
            c[(i, off)] = 1.0;
        }
        for j in 0..m {
            d[(i, j)] = db[j];
        }
        off += k;
    }

    let basis = linalg::controllable_basis(&a, &b, 1e-9);
    if basis.ncols() < n {
        let at = basis.transpose();
        let a_r = &at * &a * &basis;
        let b_r = &at * &b;
        let c_r = &c * &basis;
        return ContinuousSystem::with_output(a_r, b_r, c_r, d);
    }
    ContinuousSystem::with_output(a, b, c, d)
}
