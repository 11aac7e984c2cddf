//! Small dense linear-algebra helpers on `Vec<f64>` rows.

use nalgebra::DMatrix;

use crate::fields::{dot, norm};

/// Default relative singular-value threshold.
pub const RANK_TOL: f64 = 1e-9;

fn padded_square(rows: &[Vec<f64>], m: usize) -> DMatrix<f64> {
    let n = rows.len().max(m);
    DMatrix::from_fn(n, m, |i, j| rows.get(i).map_or(0.0, |r| r[j]))
}

/// Singular values of the matrix whose rows are `rows` (each of length `m`).
pub fn singular_values(rows: &[Vec<f64>], m: usize) -> Vec<f64> {
    if m == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = padded_square(rows, m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Numerical rank: singular values above `rel_tol` times the largest.
pub fn rank(rows: &[Vec<f64>], m: usize, rel_tol: f64) -> usize {
    let s = singular_values(rows, m);
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rel_tol * top).count()
}

/// Orthonormal basis of `{λ : ⟨λ, r⟩ = 0 for every row r}` in canonical form.
pub fn null_space(rows: &[Vec<f64>], m: usize, rel_tol: f64) -> Vec<Vec<f64>> {
    if m == 0 {
        return Vec::new();
    }
    let a = padded_square(rows, m);
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let top = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cut = if top == 0.0 { 0.0 } else { rel_tol * top };
    let basis: Vec<Vec<f64>> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= cut)
        .map(|(i, _)| v_t.row(i).iter().copied().collect())
        .collect();
    canonical_basis(&basis)
}

/// Reduced row echelon form with partial pivoting; zero rows dropped.
pub fn rref(rows: &[Vec<f64>], tol: f64) -> Vec<Vec<f64>> {
    let mut a: Vec<Vec<f64>> = rows.to_vec();
    let n = a.len();
    let m = a.first().map_or(0, Vec::len);
    let mut r = 0;
    for c in 0..m {
        if r == n {
            break;
        }
        let (p, best) = (r..n)
            .map(|i| (i, a[i][c].abs()))
            .fold((r, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best <= tol {
            for row in a.iter_mut().skip(r) {
                row[c] = 0.0;
            }
            continue;
        }
        a.swap(r, p);
        let piv = a[r][c];
        for v in a[r].iter_mut() {
            *v /= piv;
        }
        for i in 0..n {
            if i != r {
                let f = a[i][c];
                if f != 0.0 {
                    for j in 0..m {
                        a[i][j] -= f * a[r][j];
                    }
                }
            }
        }
        r += 1;
    }
    a.truncate(r);
    a
}

/// Classical Gram–Schmidt with re-orthogonalisation; dependent vectors dropped.
pub fn gram_schmidt(vectors: &[Vec<f64>], tol: f64) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &out {
                let c = dot(&w, q);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let n = norm(&w);
        if n > tol {
            out.push(w.iter().map(|x| x / n).collect());
        }
    }
    out
}

/// Make the largest-magnitude entry positive (first one on ties).
pub fn normalize_sign(v: &mut [f64]) {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best + 1e-12 {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Deterministic orthonormal basis of `span(vectors)`: RREF, then
/// Gram–Schmidt, then sign normalisation. Entries below `1e-14` are zeroed.
pub fn canonical_basis(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if vectors.is_empty() {
        return Vec::new();
    }
    let scale = vectors.iter().map(|v| norm(v)).fold(0.0, f64::max).max(1.0);
    let reduced = rref(vectors, 1e-10 * scale);
    let mut basis = gram_schmidt(&reduced, 1e-12);
    for b in &mut basis {
        for x in b.iter_mut() {
            if x.abs() < 1e-14 {
                *x = 0.0;
            }
        }
        normalize_sign(b);
    }
    basis
}
