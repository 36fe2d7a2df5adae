//! Dense row-major tensors and the permutation abstraction.
//!
//! Storage is `f32`; dot products and norms accumulate in `f64` so that
//! downstream functional-equivalence checks hold at tight tolerances.

use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Dense tensor: positive dims, flat row-major `f32` storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero dim in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) into {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    fn require_matrix(&self, role: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("{role} must be 2-d, got {other:?}"))),
        }
    }

    /// Element of a 2-d tensor.
    pub fn at2(&self, row: usize, col: usize) -> f32 {
        let cols = self.shape[1];
        self.data[row * cols + col]
    }

    pub fn set2(&mut self, row: usize, col: usize, value: f32) {
        let cols = self.shape[1];
        self.data[row * cols + col] = value;
    }

    /// Matrix product with deterministic row-major, left-to-right accumulation
    /// carried in `f64`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("left operand")?;
        let (k2, n) = other.require_matrix("right operand")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "inner dims disagree: {m}x{k} . {k2}x{n}"
            )));
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += self.data[i * k + p] as f64 * other.data[p * n + j] as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("transpose operand")?;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }
}

/// Dot product with `f64` accumulation.
pub fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

pub fn l2_norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l1_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64).abs()).sum()
}

/// Cosine similarity in [-1, 1].
///
/// Zero-norm inputs yield 0.0 rather than NaN, so fully-pruned neurons cannot
/// poison a similarity matrix.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine wants equal lengths, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Bijection on `{0..N-1}`; `map[i] = pi(i)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation {
            map: (0..n).collect(),
        }
    }

    pub fn from_map(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        if n == 0 {
            return Err(Error::Validation("empty permutation".into()));
        }
        let mut seen = vec![false; n];
        for &t in &map {
            if t >= n || seen[t] {
                return Err(Error::Validation(format!(
                    "map {map:?} is not a bijection on 0..{n}"
                )));
            }
            seen[t] = true;
        }
        Ok(Permutation { map })
    }

    /// Transposition of `a` and `b` on `{0..n-1}`.
    pub fn swap(n: usize, a: usize, b: usize) -> Self {
        let mut map: Vec<usize> = (0..n).collect();
        map.swap(a, b);
        Permutation { map }
    }

    /// Uniformly random permutation from a seeded stream.
    pub fn random(n: usize, rng: &mut CounterRng) -> Self {
        let mut map: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut map);
        Permutation { map }
    }

    pub fn size(&self) -> usize {
        self.map.len()
    }

    pub fn apply(&self, i: usize) -> usize {
        self.map[i]
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &t)| i == t)
    }

    /// Binary matrix with a single 1 per row at `(i, pi(i))`.
    pub fn matrix_view(&self) -> Tensor {
        let n = self.map.len();
        let mut t = Tensor::zeros(vec![n, n]);
        for (i, &j) in self.map.iter().enumerate() {
            t.set2(i, j, 1.0);
        }
        t
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0usize; self.map.len()];
        for (i, &j) in self.map.iter().enumerate() {
            inv[j] = i;
        }
        Permutation { map: inv }
    }

    /// `self . other`: first `other`, then `self`.
    pub fn compose(&self, other: &Permutation) -> Result<Permutation> {
        if self.size() != other.size() {
            return Err(Error::Shape(format!(
                "compose wants equal sizes, got {} and {}",
                self.size(),
                other.size()
            )));
        }
        Ok(Permutation {
            map: other.map.iter().map(|&i| self.map[i]).collect(),
        })
    }
}
