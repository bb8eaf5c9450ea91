//! Low-rank adapters and their gated contribution to a frozen linear map.
//!
//! An adapter models a weight increment `ΔW = (α/r)·B·A` with `A ∈ ℝ^{r×k}`
//! drawn Gaussian and `B ∈ ℝ^{d×r}` starting at zero, so a freshly attached
//! adapter never changes the base model's outputs. In the training path the
//! increment is applied factored, `W·x + g·(α/r)·B·(A·x)`, and never
//! materialized.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_matrix, take_u64, Matrix, SeededRng};

/// The six adaptable linear maps of a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    /// Query projection.
    Q,
    /// Key projection.
    K,
    /// Value projection.
    V,
    /// Feed-forward intermediate (up) projection.
    I,
    /// Attention output projection.
    O,
    /// Feed-forward dense (down) projection.
    D,
}

impl Family {
    pub const ALL: [Family; 6] = [Family::Q, Family::K, Family::V, Family::I, Family::O, Family::D];
    pub const COUNT: usize = 6;

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Family> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Q => "Q",
            Family::K => "K",
            Family::V => "V",
            Family::I => "I",
            Family::O => "O",
            Family::D => "D",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `ΔW = (alpha / rank) · b · a`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    a: Matrix,
    b: Matrix,
    rank: usize,
    alpha: f64,
    dropout_p: f64,
}

/// Creates an adapter for a `d×k` weight: `a` Gaussian scaled by `1/√r`, `b` zero.
pub fn init_adapter(d: usize, k: usize, r: usize, alpha: f64, rng: &mut SeededRng) -> Result<LowRankAdapter> {
    let max = d.min(k);
    if r == 0 || r > max {
        return Err(Error::Rank { rank: r, max });
    }
    let a = gaussian_matrix(r, k, rng)?.scale(1.0 / (r as f64).sqrt());
    Ok(LowRankAdapter {
        a,
        b: Matrix::zeros(d, r),
        rank: r,
        alpha,
        dropout_p: 0.0,
    })
}

impl LowRankAdapter {
    /// Assembles an adapter from explicit factors.
    pub fn from_parts(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        let rank = a.rows();
        if rank == 0 || b.cols() != rank {
            return Err(Error::Dimension(format!(
                "a is {}x{} but b is {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        Ok(Self {
            a,
            b,
            rank,
            alpha,
            dropout_p: 0.0,
        })
    }

    pub fn with_dropout(mut self, p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        self.dropout_p = p;
        Ok(self)
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    /// Output dimension `d`.
    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension `k`.
    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// The materialized increment `(α/r)·B·A`.
    pub fn delta(&self) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("adapter factors are conformal")
            .scale(self.scaling())
    }

    pub fn param_count(&self) -> usize {
        self.a.data().len() + self.b.data().len()
    }

    /// Appends `a` then `b`, row-major.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.a.data());
        out.extend_from_slice(self.b.data());
    }

    /// Overwrites `a` then `b` from the front of `params`; returns the count consumed.
    pub fn read_params(&mut self, params: &[f64]) -> Result<usize> {
        let na = self.a.data().len();
        let n = self.param_count();
        if params.len() < n {
            return Err(Error::Dimension(format!("need {n} parameters, got {}", params.len())));
        }
        self.a.data_mut().copy_from_slice(&params[..na]);
        self.b.data_mut().copy_from_slice(&params[na..n]);
        Ok(n)
    }

    /// Binary section: `u64 rank`, `f64 alpha`, `f64 dropout`, then `a` and `b`.
    pub fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.rank as u64).to_le_bytes());
        out.extend_from_slice(&self.alpha.to_le_bytes());
        out.extend_from_slice(&self.dropout_p.to_le_bytes());
        self.a.write_le(out);
        self.b.write_le(out);
    }

    pub fn read_le(input: &mut &[u8]) -> Result<LowRankAdapter> {
        let rank = take_u64(input)? as usize;
        let alpha = f64::from_bits(take_u64(input)?);
        let dropout_p = f64::from_bits(take_u64(input)?);
        let a = Matrix::read_le(input)?;
        let b = Matrix::read_le(input)?;
        if a.rows() != rank {
            return Err(Error::Format(format!("adapter rank {rank} but a has {} rows", a.rows())));
        }
        LowRankAdapter::from_parts(a, b, alpha)
            .map_err(|e| Error::Format(e.to_string()))?
            .with_dropout(dropout_p)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

/// `w0·x + gate·(α/r)·B·(A·x)`, computed factored.
pub fn gated_forward(w0: &Matrix, adapter: &LowRankAdapter, gate: f64, x: &Matrix) -> Result<Matrix> {
    let (out, _) = GatedLinear::new(w0, Some(adapter), gate)?.forward(x, None)?;
    Ok(out)
}

/// Gradients of a scalar loss with respect to an adapter's factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub a: Matrix,
    pub b: Matrix,
}

impl AdapterGrad {
    pub fn zeros_like(adapter: &LowRankAdapter) -> Self {
        Self {
            a: Matrix::zeros(adapter.a.rows(), adapter.a.cols()),
            b: Matrix::zeros(adapter.b.rows(), adapter.b.cols()),
        }
    }

    pub fn accumulate(&mut self, other: &AdapterGrad) -> Result<()> {
        self.a.add_scaled(&other.a, 1.0)?;
        self.b.add_scaled(&other.b, 1.0)
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.a.data());
        out.extend_from_slice(self.b.data());
    }
}

/// Values retained by [`GatedLinear::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BranchCache {
    /// Adapter-branch input after dropout (equal to `x` without dropout).
    x_branch: Matrix,
    /// Inverted-dropout mask, already scaled by `1/(1-p)`.
    mask: Option<Matrix>,
    /// `A · x_branch`.
    ax: Matrix,
}

/// One frozen linear map with an optional gated adapter.
#[derive(Debug, Clone, Copy)]
pub struct GatedLinear<'a> {
    base: &'a Matrix,
    adapter: Option<&'a LowRankAdapter>,
    gate: f64,
}

impl<'a> GatedLinear<'a> {
    pub fn new(base: &'a Matrix, adapter: Option<&'a LowRankAdapter>, gate: f64) -> Result<Self> {
        if let Some(ad) = adapter {
            if ad.out_dim() != base.rows() || ad.in_dim() != base.cols() {
                return Err(Error::Dimension(format!(
                    "adapter is {}x{} but base weight is {}x{}",
                    ad.out_dim(),
                    ad.in_dim(),
                    base.rows(),
                    base.cols()
                )));
            }
        }
        Ok(Self { base, adapter, gate })
    }

    /// Forward pass; `dropout_rng` enables the adapter's input dropout.
    pub fn forward(&self, x: &Matrix, dropout_rng: Option<&mut SeededRng>) -> Result<(Matrix, Option<BranchCache>)> {
        let mut out = self.base.matmul(x)?;
        let Some(ad) = self.adapter else {
            return Ok((out, None));
        };
        let mask = match dropout_rng {
            Some(rng) if ad.dropout_p > 0.0 => {
                let keep = 1.0 - ad.dropout_p;
                Some(Matrix::from_fn(x.rows(), x.cols(), |_, _| {
                    if rng.uniform() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                }))
            }
            _ => None,
        };
        let x_branch = match &mask {
            Some(m) => x.hadamard(m)?,
            None => x.clone(),
        };
        let ax = ad.a.matmul(&x_branch)?;
        let bax = ad.b.matmul(&ax)?;
        out.add_scaled(&bax, self.gate * ad.scaling())?;
        Ok((out, Some(BranchCache { x_branch, mask, ax })))
    }

    /// Returns `(∂L/∂x, ∂L/∂(A,B), ∂L/∂gate)` given `∂L/∂out`.
    pub fn backward(&self, cache: Option<&BranchCache>, grad_out: &Matrix) -> Result<(Matrix, Option<AdapterGrad>, f64)> {
        let mut dx = self.base.t_matmul(grad_out)?;
        let (Some(ad), Some(cache)) = (self.adapter, cache) else {
            return Ok((dx, None, 0.0));
        };
        let s = ad.scaling();
        let gs = self.gate * s;

        // Bᵀ·G, shape r×n.
        let bt_g = ad.b.t_matmul(grad_out)?;
        let db = grad_out.matmul_t(&cache.ax)?.scale(gs);
        let da = bt_g.matmul_t(&cache.x_branch)?.scale(gs);
        // ⟨G, B·A·x⟩ = ⟨Bᵀ·G, A·x⟩
        let dgate = s * bt_g.inner(&cache.ax)?;

        let mut dx_branch = ad.a.t_matmul(&bt_g)?;
        if let Some(mask) = &cache.mask {
            dx_branch = dx_branch.hadamard(mask)?;
        }
        dx.add_scaled(&dx_branch, gs)?;
        Ok((dx, Some(AdapterGrad { a: da, b: db }), dgate))
    }
}

/// One adapter per module family, shared by every unselected module of that family.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SharedAdapterBank {
    entries: BTreeMap<Family, LowRankAdapter>,
}

impl SharedAdapterBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, family: Family, adapter: LowRankAdapter) {
        self.entries.insert(family, adapter);
    }

    pub fn get(&self, family: Family) -> Option<&LowRankAdapter> {
        self.entries.get(&family)
    }

    pub fn get_mut(&mut self, family: Family) -> Option<&mut LowRankAdapter> {
        self.entries.get_mut(&family)
    }

    pub fn contains(&self, family: Family) -> bool {
        self.entries.contains_key(&family)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn families(&self) -> impl Iterator<Item = Family> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Family, &LowRankAdapter)> {
        self.entries.iter().map(|(f, a)| (*f, a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (Family, &mut LowRankAdapter)> {
        self.entries.iter_mut().map(|(f, a)| (*f, a))
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(LowRankAdapter::param_count).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trained_adapter(d: usize, k: usize, r: usize, seed: u64) -> LowRankAdapter {
        let mut rng = SeededRng::new(seed, 0);
        let mut ad = init_adapter(d, k, r, 16.0, &mut rng).unwrap();
        *ad.b_mut() = gaussian_matrix(d, r, &mut rng).unwrap();
        ad
    }

    /// Triple-loop product, independent of `Matrix::matmul`.
    fn naive_product(b: &Matrix, a: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(b.rows(), a.cols());
        for i in 0..b.rows() {
            for j in 0..a.cols() {
                let mut s = 0.0;
                for k in 0..b.cols() {
                    s += b[(i, k)] * a[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn fresh_adapter_has_zero_delta() {
        for (d, k, r) in [(1, 1, 1), (4, 7, 3), (8, 8, 8)] {
            let ad = init_adapter(d, k, r, 16.0, &mut SeededRng::new(1, 1)).unwrap();
            assert_eq!(ad.delta(), Matrix::zeros(d, k));
            assert_eq!(ad.a().rows(), r);
            assert_eq!(ad.b().cols(), r);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_adapter(4, 4, 2, 16.0, &mut SeededRng::new(9, 0)).unwrap();
        let b = init_adapter(4, 4, 2, 16.0, &mut SeededRng::new(9, 0)).unwrap();
        assert!(a.a().bitwise_eq(b.a()));
    }

    #[test]
    fn init_variance_tracks_inverse_rank() {
        let ad = init_adapter(8, 8, 4, 16.0, &mut SeededRng::new(21, 0)).unwrap();
        let v = ad.a().data();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = 1.0 / 4.0;
        assert!((var - expected).abs() <= 0.5 * expected, "variance {var}");
    }

    #[test]
    fn rank_bounds_enforced() {
        let mut rng = SeededRng::new(0, 0);
        assert!(matches!(init_adapter(3, 5, 4, 1.0, &mut rng), Err(Error::Rank { rank: 4, max: 3 })));
        assert!(matches!(init_adapter(3, 5, 0, 1.0, &mut rng), Err(Error::Rank { .. })));
    }

    #[test]
    fn delta_by_hand() {
        let ad = LowRankAdapter::from_parts(
            Matrix::from_rows(&[[2.0, 3.0]]),
            Matrix::from_rows(&[[1.0], [0.0]]),
            1.0,
        )
        .unwrap();
        assert_eq!(ad.delta(), Matrix::from_rows(&[[2.0, 3.0], [0.0, 0.0]]));
    }

    #[test]
    fn delta_matches_naive_product() {
        let ad = trained_adapter(5, 5, 2, 4);
        let oracle = naive_product(ad.b(), ad.a()).scale(ad.scaling());
        assert!(ad.delta().sub(&oracle).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn gate_off_and_fresh_adapter_are_identities() {
        let mut rng = SeededRng::new(5, 5);
        let w0 = gaussian_matrix(4, 6, &mut rng).unwrap();
        let x = gaussian_matrix(6, 3, &mut rng).unwrap();
        let base = w0.matmul(&x).unwrap();

        let trained = trained_adapter(4, 6, 2, 6);
        assert!(gated_forward(&w0, &trained, 0.0, &x).unwrap().bitwise_eq(&base));

        let fresh = init_adapter(4, 6, 2, 16.0, &mut rng).unwrap();
        assert!(gated_forward(&w0, &fresh, 1.0, &x).unwrap().bitwise_eq(&base));
    }

    #[test]
    fn factored_matches_materialized() {
        let mut rng = SeededRng::new(12, 0);
        let w0 = gaussian_matrix(5, 4, &mut rng).unwrap();
        let x = gaussian_matrix(4, 3, &mut rng).unwrap();
        let ad = trained_adapter(5, 4, 3, 13);
        let factored = gated_forward(&w0, &ad, 0.3, &x).unwrap();
        let mut w = w0.clone();
        w.add_scaled(&ad.delta(), 0.3).unwrap();
        let materialized = w.matmul(&x).unwrap();
        let rel = factored.sub(&materialized).unwrap().max_abs() / materialized.max_abs();
        assert!(rel <= 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let w0 = Matrix::zeros(4, 4);
        let ad = trained_adapter(4, 3, 1, 0);
        assert!(matches!(
            gated_forward(&w0, &ad, 1.0, &Matrix::zeros(4, 1)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeededRng::new(30, 0);
        let w0 = gaussian_matrix(3, 4, &mut rng).unwrap();
        let x = gaussian_matrix(4, 2, &mut rng).unwrap();
        let target = gaussian_matrix(3, 2, &mut rng).unwrap();
        let mut ad = trained_adapter(3, 4, 2, 31);
        let gate = 0.7;

        let loss = |ad: &LowRankAdapter, gate: f64, x: &Matrix| {
            let out = gated_forward(&w0, ad, gate, x).unwrap();
            0.5 * out.sub(&target).unwrap().data().iter().map(|v| v * v).sum::<f64>()
        };
        let layer = GatedLinear::new(&w0, Some(&ad), gate).unwrap();
        let (out, cache) = layer.forward(&x, None).unwrap();
        let g = out.sub(&target).unwrap();
        let (dx, dad, dgate) = layer.backward(cache.as_ref(), &g).unwrap();
        let dad = dad.unwrap();

        let h = 1e-6;
        let fd_gate = (loss(&ad, gate + h, &x) - loss(&ad, gate - h, &x)) / (2.0 * h);
        assert!((fd_gate - dgate).abs() <= 1e-6 * fd_gate.abs().max(1.0));

        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[idx] += h;
            xm.data_mut()[idx] -= h;
            let fd = (loss(&ad, gate, &xp) - loss(&ad, gate, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
        for idx in 0..ad.a().data().len() {
            let orig = ad.a().data()[idx];
            ad.a_mut().data_mut()[idx] = orig + h;
            let lp = loss(&ad, gate, &x);
            ad.a_mut().data_mut()[idx] = orig - h;
            let lm = loss(&ad, gate, &x);
            ad.a_mut().data_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - dad.a.data()[idx]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
        for idx in 0..ad.b().data().len() {
            let orig = ad.b().data()[idx];
            ad.b_mut().data_mut()[idx] = orig + h;
            let lp = loss(&ad, gate, &x);
            ad.b_mut().data_mut()[idx] = orig - h;
            let lm = loss(&ad, gate, &x);
            ad.b_mut().data_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - dad.b.data()[idx]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn dropout_only_touches_branch() {
        let mut rng = SeededRng::new(40, 0);
        let w0 = gaussian_matrix(3, 3, &mut rng).unwrap();
        let x = gaussian_matrix(3, 4, &mut rng).unwrap();
        let ad = trained_adapter(3, 3, 1, 41).with_dropout(0.5).unwrap();
        let layer = GatedLinear::new(&w0, Some(&ad), 0.0).unwrap();
        let (out, _) = layer.forward(&x, Some(&mut SeededRng::new(1, 1))).unwrap();
        assert!(out.bitwise_eq(&w0.matmul(&x).unwrap()));
        assert!(ad.clone().with_dropout(1.0).is_err());
    }

    #[test]
    fn binary_section_round_trip() {
        let ad = trained_adapter(3, 5, 2, 50).with_dropout(0.1).unwrap();
        let mut buf = Vec::new();
        ad.write_le(&mut buf);
        let mut slice = buf.as_slice();
        let back = LowRankAdapter::read_le(&mut slice).unwrap();
        assert!(slice.is_empty());
        assert!(back.a().bitwise_eq(ad.a()) && back.b().bitwise_eq(ad.b()));
        assert_eq!(back.dropout_p(), 0.1);
        assert!(LowRankAdapter::read_le(&mut &buf[..buf.len() - 1]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gate_is_linear(seed in 0u64..1000, g in 0.0f64..1.0) {
                let mut rng = SeededRng::new(seed, 3);
                let w0 = gaussian_matrix(4, 5, &mut rng).unwrap();
                let x = gaussian_matrix(5, 2, &mut rng).unwrap();
                let ad = trained_adapter(4, 5, 2, seed);
                let f0 = gated_forward(&w0, &ad, 0.0, &x).unwrap();
                let f1 = gated_forward(&w0, &ad, 1.0, &x).unwrap();
                let fg = gated_forward(&w0, &ad, g, &x).unwrap();
                let lhs = fg.sub(&f0).unwrap();
                let rhs = f1.sub(&f0).unwrap().scale(g);
                prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12 * f1.max_abs().max(1.0));
            }

            #[test]
            fn factored_agrees_with_materialized(seed in 0u64..1000, g in 0.0f64..1.0) {
                let mut rng = SeededRng::new(seed, 4);
                let w0 = gaussian_matrix(6, 3, &mut rng).unwrap();
                let x = gaussian_matrix(3, 4, &mut rng).unwrap();
                let ad = trained_adapter(6, 3, 2, seed + 1);
                let factored = gated_forward(&w0, &ad, g, &x).unwrap();
                let mut w = w0.clone();
                w.add_scaled(&ad.delta(), g).unwrap();
                let mat = w.matmul(&x).unwrap();
                prop_assert!(factored.sub(&mat).unwrap().max_abs() <= 1e-12 * mat.max_abs().max(1.0));
            }
        }
    }
}
