//! Dense matrix/vector helpers, activations, and the named-parameter
//! machinery shared by every model.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`. Gradients are produced by
//! hand-written backpropagation in each model module; [`finite_diff_gradient`]
//! and [`gradient_check`] are the oracle those implementations answer to.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "matrix entry {bad} is not finite ({})",
                data[bad]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("Matrix::from_rows", "ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `out = W x + b` without shape checks; callers validate once up front.
    pub(crate) fn affine_into(&self, x: &[f64], b: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x) + b[r];
        }
    }

    /// `self += a ⊗ z` (outer product accumulate).
    pub(crate) fn add_outer(&mut self, a: &[f64], z: &[f64]) {
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, &zc) in row.iter_mut().zip(z) {
                *w += ar * zc;
            }
        }
    }

    /// `out += Wᵀ a`.
    pub(crate) fn add_transpose_mul(&self, a: &[f64], out: &mut [f64]) {
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += ar * w;
            }
        }
    }
}

/// Inner product over the common prefix, accumulated in four independent lanes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `W x + b`.
pub fn affine(w: &Matrix, x: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if w.cols != x.len() {
        return Err(Error::dim(
            "affine",
            format!("W is {}x{} but x has length {}", w.rows, w.cols, x.len()),
        ));
    }
    if w.rows != b.len() {
        return Err(Error::dim(
            "affine",
            format!("W is {}x{} but b has length {}", w.rows, w.cols, b.len()),
        ));
    }
    let mut out = vec![0.0; w.rows];
    w.affine_into(x, b, &mut out);
    Ok(out)
}

/// Logistic function, branching on sign so `exp` never overflows.
#[inline]
pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(z: &[f64]) -> Vec<f64> {
    z.iter().copied().map(sigmoid_scalar).collect()
}

pub fn tanh_act(z: &[f64]) -> Vec<f64> {
    z.iter().map(|v| v.tanh()).collect()
}

pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Anything that owns named, shaped arrays of trainable values.
///
/// Both visitors must walk the arrays in the same order; optimizer state and
/// gradient bundles rely on it.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64]));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &mut [f64]));

    fn fill_zero(&mut self) {
        self.visit_params_mut("", &mut |_, _, v| v.fill(0.0));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, _, v| n += v.len());
        n
    }
}

/// One named array: a parameter, its gradient, or an optimizer moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered collection of named arrays, shape-matched to a model's parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradientBundle {
    arrays: Vec<NamedArray>,
}

impl GradientBundle {
    pub fn new(arrays: Vec<NamedArray>) -> Result<Self> {
        for (i, a) in arrays.iter().enumerate() {
            if a.shape.iter().product::<usize>() != a.values.len() {
                return Err(Error::dim(
                    "GradientBundle::new",
                    format!(
                        "{} has shape {:?} but {} values",
                        a.name,
                        a.shape,
                        a.values.len()
                    ),
                ));
            }
            if arrays[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Comparison(format!("duplicate name {}", a.name)));
            }
        }
        Ok(GradientBundle { arrays })
    }

    /// Snapshot of the values currently held by `p`.
    pub fn of<P: Parameterized + ?Sized>(p: &P) -> Self {
        let mut arrays = Vec::new();
        p.visit_params("", &mut |name, shape, values| {
            arrays.push(NamedArray {
                name,
                shape: shape.to_vec(),
                values: values.to_vec(),
            })
        });
        GradientBundle { arrays }
    }

    pub fn zeros_like<P: Parameterized + ?Sized>(p: &P) -> Self {
        let mut b = GradientBundle::of(p);
        b.arrays.iter_mut().for_each(|a| a.values.fill(0.0));
        b
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [NamedArray] {
        &mut self.arrays
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.arrays.iter().map(|a| a.values.len()).sum()
    }

    /// All values concatenated in bundle order.
    pub fn flatten(&self) -> Vec<f64> {
        self.arrays
            .iter()
            .flat_map(|a| a.values.iter().copied())
            .collect()
    }

    /// Copy every array into the identically named parameter of `p`.
    pub fn assign_to<P: Parameterized + ?Sized>(&self, p: &mut P) -> Result<()> {
        let mut seen = 0usize;
        let mut failure = None;
        p.visit_params_mut("", &mut |name, shape, values| {
            if failure.is_some() {
                return;
            }
            match self.get(&name) {
                Some(a) if a.shape == shape => {
                    values.copy_from_slice(&a.values);
                    seen += 1;
                }
                Some(a) => {
                    failure = Some(format!(
                        "{name}: stored shape {:?}, model expects {shape:?}",
                        a.shape
                    ))
                }
                None => failure = Some(format!("missing parameter {name}")),
            }
        });
        if let Some(msg) = failure {
            return Err(Error::Comparison(msg));
        }
        if seen != self.arrays.len() {
            return Err(Error::Comparison(format!(
                "{} stored arrays but the model has {seen}",
                self.arrays.len()
            )));
        }
        Ok(())
    }

    /// Checks that both bundles carry the same names in the same order with equal shapes.
    pub fn check_same_layout(&self, other: &GradientBundle) -> Result<()> {
        if self.arrays.len() != other.arrays.len() {
            return Err(Error::Comparison(format!(
                "{} arrays vs {}",
                self.arrays.len(),
                other.arrays.len()
            )));
        }
        for (a, b) in self.arrays.iter().zip(&other.arrays) {
            if a.name != b.name {
                return Err(Error::Comparison(format!("name {} vs {}", a.name, b.name)));
            }
            if a.shape != b.shape {
                return Err(Error::Comparison(format!(
                    "{}: shape {:?} vs {:?}",
                    a.name, a.shape, b.shape
                )));
            }
        }
        Ok(())
    }
}

fn with_coordinate<P: Parameterized>(
    p: &mut P,
    array: usize,
    index: usize,
    f: impl FnOnce(&mut f64),
) {
    let mut k = 0;
    let mut f = Some(f);
    p.visit_params_mut("", &mut |_, _, values| {
        if k == array {
            if let Some(f) = f.take() {
                f(&mut values[index]);
            }
        }
        k += 1;
    });
}

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
pub fn finite_diff_gradient<P, F>(mut f: F, params: &P, eps: f64) -> Result<GradientBundle>
where
    P: Parameterized + Clone,
    F: FnMut(&P) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut grad = GradientBundle::zeros_like(params);
    let mut work = params.clone();
    for (k, array) in grad.arrays.iter_mut().enumerate() {
        for j in 0..array.values.len() {
            let mut original = 0.0;
            with_coordinate(&mut work, k, j, |v| {
                original = *v;
                *v = original + eps;
            });
            let plus = f(&work);
            with_coordinate(&mut work, k, j, |v| *v = original - eps);
            let minus = f(&work);
            with_coordinate(&mut work, k, j, |v| *v = original);
            for value in [plus, minus] {
                if !value.is_finite() {
                    return Err(Error::Evaluation {
                        param: array.name.clone(),
                        index: j,
                        value,
                    });
                }
            }
            array.values[j] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(grad)
}

/// Hex SHA-256 over every parameter's name, shape, and value bits.
pub fn param_fingerprint<P: Parameterized + ?Sized>(p: &P) -> String {
    let mut hasher = Sha256::new();
    p.visit_params("", &mut |name, shape, values| {
        hasher.update(name.as_bytes());
        for s in shape {
            hasher.update((*s as u64).to_le_bytes());
        }
        for v in values {
            hasher.update(v.to_bits().to_le_bytes());
        }
    });
    hex(&hasher.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Floor on the denominator of the relative error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// Largest relative disagreement `|a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
pub fn gradient_check(analytic: &GradientBundle, numeric: &GradientBundle) -> Result<f64> {
    analytic.check_same_layout(numeric)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.arrays.iter().zip(&numeric.arrays) {
        for (&x, &y) in a.values.iter().zip(&n.values) {
            let denom = x.abs().max(y.abs()).max(RELATIVE_ERROR_FLOOR);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    Ok(worst)
}

/// Visits a matrix as a `[rows, cols]` array.
pub(crate) fn visit_matrix(
    prefix: &str,
    name: &str,
    m: &Matrix,
    f: &mut dyn FnMut(String, &[usize], &[f64]),
) {
    f(format!("{prefix}{name}"), &m.shape(), m.as_slice());
}

pub(crate) fn visit_matrix_mut(
    prefix: &str,
    name: &str,
    m: &mut Matrix,
    f: &mut dyn FnMut(String, &[usize], &mut [f64]),
) {
    let shape = m.shape();
    f(format!("{prefix}{name}"), &shape, m.as_mut_slice());
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[derive(Clone)]
    struct Scalar(f64);

    impl Parameterized for Scalar {
        fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
            f(format!("{prefix}p"), &[1], std::slice::from_ref(&self.0));
        }
        fn visit_params_mut(
            &mut self,
            prefix: &str,
            f: &mut dyn FnMut(String, &[usize], &mut [f64]),
        ) {
            f(
                format!("{prefix}p"),
                &[1],
                std::slice::from_mut(&mut self.0),
            );
        }
    }

    fn bundle(values: &[f64]) -> GradientBundle {
        GradientBundle::new(vec![NamedArray {
            name: "p".into(),
            shape: vec![values.len()],
            values: values.to_vec(),
        }])
        .unwrap()
    }

    #[test]
    fn affine_examples() {
        let out = affine(&Matrix::identity(2), &[3.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(out, vec![3.0, -1.0]);
        let out = affine(&Matrix::zeros(2, 2), &[0.3, 9.0], &[5.0, 7.0]).unwrap();
        assert_eq!(out, vec![5.0, 7.0]);
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(
            affine(&w, &[1.0, 1.0], &[1.0, 0.0]).unwrap(),
            vec![4.0, 7.0]
        );
    }

    #[test]
    fn affine_shape_errors_name_operands() {
        let err = affine(&Matrix::zeros(2, 3), &[1.0, 2.0], &[0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("x has length 2"), "{err}");
        let err = affine(&Matrix::zeros(2, 2), &[1.0, 2.0], &[0.0]).unwrap_err();
        assert!(err.to_string().contains("b has length 1"), "{err}");
    }

    #[test]
    fn matrix_rejects_bad_data() {
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(&[0.0]), vec![0.5]);
        assert!((sigmoid(&[30.0])[0] - 1.0).abs() < 1e-9);
        let z = 1.7;
        assert!((sigmoid_scalar(-z) + sigmoid_scalar(z) - 1.0).abs() < 1e-15);
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
    }

    #[test]
    fn tanh_examples() {
        assert_eq!(tanh_act(&[0.0]), vec![0.0]);
        assert_eq!(tanh_act(&[-0.9])[0], -tanh_act(&[0.9])[0]);
        assert!((tanh_act(&[20.0])[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_examples() {
        for c in [-3.0, 0.0, 250.0] {
            for w in softmax(&[c, c, c]).unwrap() {
                assert!((w - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let w = softmax(&[0.0, 2f64.ln()]).unwrap();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-12 && (w[1] - 2.0 / 3.0).abs() < 1e-12);
        let a = softmax(&[0.3, -1.2]).unwrap();
        let b = softmax(&[100.3, 98.8]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(softmax(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_diff_gradient(|p: &Scalar| p.0 * p.0, &Scalar(3.0), 1e-5).unwrap();
        assert!((g.arrays()[0].values[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_gradient(|_: &Scalar| 4.2, &Scalar(3.0), 1e-5).unwrap();
        assert_eq!(g.flatten(), vec![0.0]);
        assert!(finite_diff_gradient(|_: &Scalar| 0.0, &Scalar(3.0), 0.0).is_err());
        let err =
            finite_diff_gradient(|p: &Scalar| (p.0 - 3.0).ln(), &Scalar(3.0), 1e-5).unwrap_err();
        assert!(matches!(err, Error::Evaluation { .. }));
    }

    #[test]
    fn gradient_check_examples() {
        assert_eq!(
            gradient_check(&bundle(&[1.0, -2.0]), &bundle(&[1.0, -2.0])).unwrap(),
            0.0
        );
        assert_eq!(
            gradient_check(&bundle(&[2.0]), &bundle(&[1.0])).unwrap(),
            0.5
        );
        let e = gradient_check(&bundle(&[0.0]), &bundle(&[1e-9])).unwrap();
        assert!(e <= 0.1 + 1e-15, "{e}");
        assert!(gradient_check(&bundle(&[0.0]), &bundle(&[0.0, 1.0])).is_err());
        let other = GradientBundle::new(vec![NamedArray {
            name: "q".into(),
            shape: vec![1],
            values: vec![0.0],
        }])
        .unwrap();
        assert!(matches!(
            gradient_check(&bundle(&[0.0]), &other),
            Err(Error::Comparison(_))
        ));
    }

    #[test]
    fn bundle_assign_round_trip() {
        let mut s = Scalar(1.0);
        bundle(&[5.0]).assign_to(&mut s).unwrap();
        assert_eq!(s.0, 5.0);
        assert!(bundle(&[1.0, 2.0]).assign_to(&mut s).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(scores in prop::collection::vec(-50.0f64..50.0, 1..64)) {
            let w = softmax(&scores).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&v| v >= 0.0));
        }

        // Beyond |z| ≈ 19 tanh rounds to ±1 in f64.
        #[test]
        fn activations_stay_in_open_ranges(z in -15.0f64..15.0) {
            let s = sigmoid_scalar(z);
            prop_assert!(s > 0.0 && s < 1.0);
            let t = z.tanh();
            prop_assert!(t > -1.0 && t < 1.0);
        }

        #[test]
        fn affine_is_linear(
            w in prop::collection::vec(-2.0f64..2.0, 6),
            x in prop::collection::vec(-2.0f64..2.0, 3),
            y in prop::collection::vec(-2.0f64..2.0, 3),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let w = Matrix::new(2, 3, w).unwrap();
            let zero = [0.0, 0.0];
            let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = affine(&w, &mix, &zero).unwrap();
            let ax = affine(&w, &x, &zero).unwrap();
            let ay = affine(&w, &y, &zero).unwrap();
            for i in 0..2 {
                prop_assert!((lhs[i] - (alpha * ax[i] + beta * ay[i])).abs() < 1e-10);
            }
        }
    }
}
