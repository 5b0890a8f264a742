//! Per-mode affine fits `w_i ≈ k_i·w_ref + d_i` and their epoch-wise
//! recursive refinement.

use crate::error::{Error, Result};
use crate::scalar::{c, Real};

/// Symmetric 2×2 matrix `[[a, b], [b, c]]`, the running `w̃ w̃ᵀ` of a mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gram2<T> {
    pub a: T,
    pub b: T,
    pub c: T,
}

/// Relative ridge added to the Gram diagonal at fit time.
pub const RIDGE: f64 = 1e-12;

impl<T: Real> Gram2<T> {
    pub fn zero() -> Self {
        Self { a: T::zero(), b: T::zero(), c: T::zero() }
    }

    /// `Σ_t [w_t, 1]ᵀ[w_t, 1]` plus a ridge scaled to the trace.
    pub fn from_reference(w: &[T]) -> Self {
        let mut g = Self::zero();
        for &x in w {
            g.add_outer(x);
        }
        let eps = c::<T>(RIDGE * 0.5) * (g.a + g.c);
        g.a += eps;
        g.c += eps;
        g
    }

    pub fn add_outer(&mut self, w: T) {
        self.a += w * w;
        self.b += w;
        self.c += T::one();
    }

    pub fn plus_outer(mut self, w: T) -> Self {
        self.add_outer(w);
        self
    }

    pub fn det(&self) -> T {
        self.a * self.c - self.b * self.b
    }

    pub fn is_psd(&self) -> bool {
        self.a >= T::zero() && self.c >= T::zero() && self.det() >= -T::epsilon() * (self.a * self.c).abs()
    }

    /// `r · G` for a row vector `r = [k, d]`.
    pub fn left_mul(&self, r: [T; 2]) -> [T; 2] {
        [r[0] * self.a + r[1] * self.b, r[0] * self.b + r[1] * self.c]
    }

    /// Solves `x · G = r` (equivalently `G x = r`, G being symmetric).
    pub fn solve(&self, r: [T; 2]) -> [T; 2] {
        let det = self.det();
        [(self.c * r[0] - self.b * r[1]) / det, (self.a * r[1] - self.b * r[0]) / det]
    }
}

/// Least-squares fit of each row against the reference. Returns one
/// `[k, d]` per row and the ridged Gram used for later updates.
pub fn fit_affine<T: Real>(rows: &[&[T]], reference: &[T]) -> Result<(Vec<[T; 2]>, Gram2<T>)> {
    if reference.len() < 2 {
        return Err(Error::TooFewEpochs { need: 2, got: reference.len() });
    }
    let g = Gram2::from_reference(reference);
    let coefs = rows
        .iter()
        .map(|row| {
            if row.len() != reference.len() {
                return Err(Error::Config("trajectory length differs from reference".into()));
            }
            let mut r = [T::zero(); 2];
            for (&x, &w) in row.iter().zip(reference) {
                r[0] += x * w;
                r[1] += x;
            }
            Ok(g.solve(r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((coefs, g))
}

/// One epoch of the recursive least-squares update for a whole mode:
/// `K̃ ← (K̃·G + x·[w, 1])·(G + [w, 1]ᵀ[w, 1])⁻¹`, then `G` absorbs the outer
/// product. `values[i]` is the new observation of the row behind `coefs[i]`.
pub fn recursive_update<T: Real>(coefs: &mut [[T; 2]], gram: &mut Gram2<T>, values: &[T], w_ref: T) -> Result<()> {
    if !w_ref.is_finite() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("trajectory update".into()));
    }
    let next = gram.plus_outer(w_ref);
    for (k, &x) in coefs.iter_mut().zip(values) {
        let lhs = gram.left_mul(*k);
        *k = next.solve([lhs[0] + x * w_ref, lhs[1] + x]);
    }
    *gram = next;
    Ok(())
}
