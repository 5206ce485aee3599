//! Dense row-major tensors plus the small set of numeric kernels the rest of
//! the crate builds on: stable softmax, Shannon entropy, and deterministic
//! top-k selection.

use crate::{Error, Result};
use rand::Rng;

/// Dense n-dimensional array of f64, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "expected rank 2, got {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Symmetric uniform init scaled by 1/sqrt(fan_in).
    pub fn rand_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable softmax with max-subtraction. Rejects non-finite input.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidArg("softmax of empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(masked_softmax_unchecked(v, None))
}

/// Softmax over the kept entries only; masked entries get probability 0.
/// Masked-out logits are treated as negative infinity.
pub fn masked_softmax(v: &[f64], keep: &[bool]) -> Result<Vec<f64>> {
    if v.len() != keep.len() {
        return Err(Error::Shape(format!(
            "logits len {} vs mask len {}",
            v.len(),
            keep.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    if !keep.iter().any(|&b| b) {
        return Err(Error::InvalidArg(
            "masked softmax with all entries masked".into(),
        ));
    }
    Ok(masked_softmax_unchecked(v, Some(keep)))
}

pub(crate) fn masked_softmax_unchecked(v: &[f64], keep: Option<&[bool]>) -> Vec<f64> {
    let kept = |i: usize| keep.is_none_or(|k| k[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &x) in v.iter().enumerate() {
        if kept(i) && x > max {
            max = x;
        }
    }
    let mut out = vec![0.0; v.len()];
    let mut sum = 0.0;
    for (i, &x) in v.iter().enumerate() {
        if kept(i) {
            let e = (x - max).exp();
            out[i] = e;
            sum += e;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    out
}

/// Shannon entropy −Σ p ln p (natural log), with 0·ln 0 = 0.
///
/// The input must be a probability vector: non-negative, summing to 1
/// within 1e-6.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::InvalidArg("entropy of empty vector".into()));
    }
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::InvalidArg(
            "entropy input must be non-negative and finite".into(),
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArg(format!(
            "entropy input sums to {sum}, expected 1 within 1e-6"
        )));
    }
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// Indices of the k largest values, sorted by descending value then ascending
/// index. Ties break toward the lower index.
pub fn arg_topk(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::InvalidArg(format!(
            "arg_topk k={} out of range for length {}",
            k,
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| {
        v[b].partial_cmp(&v[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}
