//! Differentiable adaptation matrix: per-layer softmax weights over the module
//! families, the alternating optimizer that learns them, and the top-k
//! discretization that turns them into a binary selection.

use std::io::Write;

use crate::adapters::{init_adapter, Family, SharedAdapterBank};
use crate::data::{format_f64, Dataset};
use crate::error::{Error, Result};
use crate::models::{AdapterSlot, GatedModel, ModularNet};
use crate::numerics::{Matrix, SeededRng};
use crate::pipeline::Optimizer;

/// Tolerance on softmax row sums.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct DamState {
    logits: Matrix,
    gamma_bar: Matrix,
    gamma_bin: Option<Matrix>,
    rho: f64,
    k: usize,
}

/// Number of modules kept per row: `⌊rho·n⌋`.
pub fn budget(rho: f64, n: usize) -> Result<usize> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("selection ratio {rho} must lie in (0, 1]")));
    }
    let k = (rho * n as f64).floor() as usize;
    if k < 1 {
        return Err(Error::Config(format!("ratio {rho} keeps no module out of {n}")));
    }
    Ok(k)
}

/// All-zero logits, hence uniform `1/n` weights.
pub fn init_dam(layers: usize, n: usize, rho: f64) -> Result<DamState> {
    if layers == 0 || n == 0 {
        return Err(Error::Config(format!("DAM needs at least one row and column (got {layers}x{n})")));
    }
    DamState::from_logits(Matrix::zeros(layers, n), rho)
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn gamma_from_logits(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

impl DamState {
    pub fn from_logits(logits: Matrix, rho: f64) -> Result<Self> {
        let k = budget(rho, logits.cols())?;
        if !logits.is_finite() {
            return Err(Error::Domain("DAM logits must be finite".into()));
        }
        Ok(Self {
            gamma_bar: gamma_from_logits(&logits),
            logits,
            gamma_bin: None,
            rho,
            k,
        })
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn gamma_bar(&self) -> &Matrix {
        &self.gamma_bar
    }

    pub fn gamma_bin(&self) -> Option<&Matrix> {
        self.gamma_bin.as_ref()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn shape(&self) -> (usize, usize) {
        self.logits.shape()
    }

    /// Replaces the binary selection, checking shape and per-row count.
    pub fn set_gamma_bin(&mut self, bin: Matrix) -> Result<()> {
        if bin.shape() != self.shape() {
            return Err(Error::Dimension("selection shape differs from the DAM".into()));
        }
        for i in 0..bin.rows() {
            let row = bin.row(i);
            if row.iter().any(|&v| v != 0.0 && v != 1.0) || row.iter().filter(|&&v| v == 1.0).count() != self.k {
                return Err(Error::Domain(format!("selection row {i} is not a {}-of-{} mask", self.k, row.len())));
            }
        }
        self.gamma_bin = Some(bin);
        Ok(())
    }

    fn set_logits(&mut self, logits: Matrix) {
        self.gamma_bar = gamma_from_logits(&logits);
        self.logits = logits;
        self.gamma_bin = None;
    }
}

/// `∂L/∂logits` given `∂L/∂γ̄`, through the row softmax.
pub fn logits_gradient(gamma_bar: &Matrix, gate_grad: &Matrix) -> Result<Matrix> {
    if gamma_bar.shape() != gate_grad.shape() {
        return Err(Error::Dimension("gate gradient shape differs from the DAM".into()));
    }
    let mut out = Matrix::zeros(gamma_bar.rows(), gamma_bar.cols());
    for i in 0..gamma_bar.rows() {
        let g = gamma_bar.row(i);
        let d = gate_grad.row(i);
        let mean: f64 = g.iter().zip(d).map(|(a, b)| a * b).sum();
        for (o, (gi, di)) in out.row_mut(i).iter_mut().zip(g.iter().zip(d)) {
            *o = gi * (di - mean);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilevelOptions {
    /// Step size for the adapter parameters.
    pub eta: f64,
    /// Step size for the logits.
    pub eta_dam: f64,
    pub inner_steps: usize,
    /// Global index of the first inner step, used in divergence reports.
    pub first_step: usize,
}

/// Losses observed during one outer step.
#[derive(Debug, Clone, PartialEq)]
pub struct BilevelOutcome {
    /// Validation loss at the start of the step, under the old weights.
    pub valid_loss: f64,
    /// `(train, valid)` loss before each inner update.
    pub inner: Vec<(f64, f64)>,
}

fn finite_or_diverged(loss: f64, grads: &[f64], step: usize, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("{what} loss is {loss}"),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            step,
            detail: format!("non-finite {what} gradient"),
        });
    }
    Ok(())
}

/// One outer step: a first-order logits update on the validation loss, then
/// `inner_steps` parameter updates on the training loss under the new weights.
pub fn bilevel_step<M: GatedModel>(
    dam: &mut DamState,
    model: &mut M,
    train: &Dataset,
    valid: &Dataset,
    opts: &BilevelOptions,
    optimizer: &mut Optimizer,
    mut dropout: Option<&mut SeededRng>,
) -> Result<BilevelOutcome> {
    if model.gate_shape() != dam.shape() {
        return Err(Error::Dimension(format!(
            "model gates are {:?}, DAM is {:?}",
            model.gate_shape(),
            dam.shape()
        )));
    }
    let outer = model.evaluate(&dam.gamma_bar, &valid.x, &valid.y, true, None)?;
    let gate_grad = outer.gate_grad.expect("gradients requested");
    finite_or_diverged(outer.loss, gate_grad.data(), opts.first_step, "validation")?;

    let dlogits = logits_gradient(&dam.gamma_bar, &gate_grad)?;
    let mut logits = dam.logits.clone();
    crate::pipeline::gd_step(logits.data_mut(), dlogits.data(), opts.eta_dam)?;
    if !logits.is_finite() {
        return Err(Error::Divergence {
            step: opts.first_step,
            detail: "non-finite DAM logits".into(),
        });
    }
    dam.set_logits(logits);

    let mut inner = Vec::with_capacity(opts.inner_steps);
    let mut params = model.params();
    for t in 0..opts.inner_steps {
        let step = opts.first_step + t;
        let ev = model.evaluate(&dam.gamma_bar, &train.x, &train.y, true, dropout.as_deref_mut())?;
        let grad = ev.param_grad.expect("gradients requested");
        finite_or_diverged(ev.loss, &grad, step, "training")?;
        let valid_loss = model.loss(&dam.gamma_bar, &valid.x, &valid.y)?;
        inner.push((ev.loss, valid_loss));
        optimizer.step(&mut params, &grad, opts.eta)?;
        model.set_params(&params)?;
    }
    Ok(BilevelOutcome {
        valid_loss: outer.loss,
        inner,
    })
}

/// Indices of the `k` largest entries of `row`; ties go to the lower index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Copy of `dam` with `gamma_bin` holding exactly `k` ones per row.
pub fn discretize(dam: &DamState) -> DamState {
    let mut out = dam.clone();
    let mut bin = Matrix::zeros(dam.gamma_bar.rows(), dam.gamma_bar.cols());
    for i in 0..bin.rows() {
        for j in top_k(dam.gamma_bar.row(i), dam.k) {
            bin[(i, j)] = 1.0;
        }
    }
    out.gamma_bin = Some(bin);
    out
}

/// Shannon entropy (nats) of each row.
pub fn row_entropy(gamma_bar: &Matrix) -> Vec<f64> {
    (0..gamma_bar.rows())
        .map(|i| gamma_bar.row(i).iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum())
        .collect()
}

/// Sharing is worthwhile when the learned weights stay close to uniform:
/// median row entropy above 90% of `ln N`.
pub fn auto_sharing(gamma_bar: &Matrix) -> bool {
    let mut h = row_entropy(gamma_bar);
    if h.is_empty() || gamma_bar.cols() < 2 {
        return false;
    }
    h.sort_by(f64::total_cmp);
    let mid = h.len() / 2;
    let median = if h.len() % 2 == 1 { h[mid] } else { 0.5 * (h[mid - 1] + h[mid]) };
    median > 0.9 * (gamma_bar.cols() as f64).ln()
}

/// How stage-2 adapters are laid out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttachSpec {
    pub rank_own: usize,
    pub rank_shared: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub sharing: bool,
    /// Keep a selected module's existing adapter when its rank already matches.
    pub warm_start: bool,
}

/// Rewires `net` from a discretized DAM: selected modules get their own
/// adapters, the rest share one adapter per family or stay frozen. With
/// sharing on, the bank holds an entry for every family.
pub fn attach_sharing(dam: &DamState, net: &ModularNet, spec: &AttachSpec, rng: &SeededRng) -> Result<ModularNet> {
    let bin = dam
        .gamma_bin
        .as_ref()
        .ok_or_else(|| Error::Config("DAM has not been discretized".into()))?;
    let layers = net.num_layers();
    if bin.shape() != (layers, Family::COUNT) {
        return Err(Error::Dimension(format!(
            "selection is {}x{}, network has {layers}x6 modules",
            bin.rows(),
            bin.cols()
        )));
    }
    let dim = net.shape().dim;
    let mut out = net.clone();
    out.detach_all();

    if spec.sharing {
        let mut bank = SharedAdapterBank::new();
        for fam in Family::ALL {
            let shape = net.base(0, fam).shape();
            if (1..layers).any(|l| net.base(l, fam).shape() != shape) {
                return Err(Error::Sharing(format!("family {fam} has differing shapes across layers")));
            }
            let mut stream = rng.derive_path(&[1, fam.index() as u64]);
            let ad = init_adapter(shape.0, shape.1, spec.rank_shared, spec.alpha, &mut stream)?.with_dropout(spec.dropout)?;
            bank.insert(fam, ad);
        }
        *out.bank_mut() = bank;
    }

    for l in 0..layers {
        for fam in Family::ALL {
            let slot = if bin[(l, fam.index())] == 1.0 {
                match net.slot(l, fam) {
                    AdapterSlot::Own(ad) if spec.warm_start && ad.rank() == spec.rank_own => AdapterSlot::Own(ad.clone()),
                    _ => {
                        let mut stream = rng.derive_path(&[0, l as u64, fam.index() as u64]);
                        AdapterSlot::Own(init_adapter(dim, dim, spec.rank_own, spec.alpha, &mut stream)?.with_dropout(spec.dropout)?)
                    }
                }
            } else if spec.sharing {
                AdapterSlot::Shared
            } else {
                AdapterSlot::Frozen
            };
            out.set_slot(l, fam, slot)?;
        }
    }
    Ok(out)
}

/// Writes an `L×N` DAM matrix as CSV with a header of family names.
/// `integer` renders entries as `0`/`1`; otherwise 17 significant digits.
pub fn write_dam_csv<W: Write>(m: &Matrix, integer: bool, out: W) -> Result<()> {
    let header: Vec<String> = if m.cols() == Family::COUNT {
        Family::ALL.iter().map(|f| f.name().to_string()).collect()
    } else {
        (1..=m.cols()).map(|j| format!("m{j}")).collect()
    };
    let mut w = csv::Writer::from_writer(out);
    let fmt_err = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(&header).map_err(fmt_err)?;
    for i in 0..m.rows() {
        let row: Vec<String> = m
            .row(i)
            .iter()
            .map(|&v| if integer { format!("{}", v as i64) } else { format_f64(v) })
            .collect();
        w.write_record(&row).map_err(fmt_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Descriptor;
    use crate::models::{Evaluation, ModularShape};
    use crate::pipeline::OptimizerKind;
    use proptest::prelude::*;

    /// `f = (g₀·u + g₁·v)·x`, target `y = x`; module 1 is the helpful one.
    struct Toy {
        p: [f64; 2],
    }

    impl GatedModel for Toy {
        fn gate_shape(&self) -> (usize, usize) {
            (1, 2)
        }
        fn param_count(&self) -> usize {
            2
        }
        fn params(&self) -> Vec<f64> {
            self.p.to_vec()
        }
        fn set_params(&mut self, params: &[f64]) -> Result<()> {
            self.p = [params[0], params[1]];
            Ok(())
        }
        fn evaluate(&self, g: &Matrix, x: &Matrix, y: &Matrix, with_grads: bool, _: Option<&mut SeededRng>) -> Result<Evaluation> {
            let (g0, g1) = (g[(0, 0)], g[(0, 1)]);
            let n = x.cols() as f64;
            let (mut loss, mut dg, mut dp) = (0.0, [0.0; 2], [0.0; 2]);
            for j in 0..x.cols() {
                let xv = x[(0, j)];
                let r = (g0 * self.p[0] + g1 * self.p[1]) * xv - y[(j, 0)];
                loss += 0.5 * r * r / n;
                dg[0] += r * self.p[0] * xv / n;
                dg[1] += r * self.p[1] * xv / n;
                dp[0] += r * g0 * xv / n;
                dp[1] += r * g1 * xv / n;
            }
            Ok(Evaluation {
                loss,
                gate_grad: with_grads.then(|| Matrix::from_vec(1, 2, dg.to_vec()).unwrap()),
                param_grad: with_grads.then(|| dp.to_vec()),
            })
        }
    }

    fn toy_data() -> Dataset {
        let x = Matrix::from_vec(1, 4, vec![1.0, -0.5, 2.0, 0.3]).unwrap();
        let y = x.transpose();
        Dataset::new(x, y, Descriptor::new("toy", 0)).unwrap()
    }

    fn gd() -> Optimizer {
        Optimizer::new(OptimizerKind::Gd).unwrap()
    }

    #[test]
    fn init_is_uniform() {
        let dam = init_dam(2, 6, 0.5).unwrap();
        assert_eq!(dam.k(), 3);
        assert!(dam.gamma_bar().data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn budget_matches_floor() {
        let ks: Vec<usize> = [0.2, 0.4, 0.5, 0.7, 0.9].iter().map(|&r| budget(r, 6).unwrap()).collect();
        assert_eq!(ks, vec![1, 2, 3, 4, 5]);
        assert!(matches!(init_dam(1, 6, 0.1), Err(Error::Config(_))));
        assert!(matches!(budget(0.0, 6), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_hand_value() {
        let g = gamma_from_logits(&Matrix::from_rows(&[[0.0, 2.0_f64.ln()]]));
        assert!((g[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((g[(0, 1)] - 2.0 / 3.0).abs() < 1e-15);
        let big = gamma_from_logits(&Matrix::from_rows(&[[1000.0, 1000.0, -1000.0]]));
        assert!(big.is_finite());
        assert!((big[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn logits_gradient_matches_finite_difference() {
        let mut rng = SeededRng::new(3, 0);
        let logits = Matrix::from_fn(2, 4, |_, _| rng.gaussian());
        let w = Matrix::from_fn(2, 4, |_, _| rng.gaussian());
        // L = Σ w_ij γ̄_ij², so ∂L/∂γ̄ = 2 w ∘ γ̄.
        let loss = |t: &Matrix| {
            let g = gamma_from_logits(t);
            g.hadamard(&g).unwrap().inner(&w).unwrap()
        };
        let g = gamma_from_logits(&logits);
        let analytic = logits_gradient(&g, &w.hadamard(&g).unwrap().scale(2.0)).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut p = logits.clone();
                p[(i, j)] += h;
                let mut m = logits.clone();
                m[(i, j)] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - analytic[(i, j)]).abs() < 1e-8, "{fd} vs {}", analytic[(i, j)]);
            }
        }
    }

    #[test]
    fn helpful_module_gains_weight() {
        let mut dam = init_dam(1, 2, 0.5).unwrap();
        let mut toy = Toy { p: [-1.0, 1.0] };
        let ds = toy_data();
        let opts = BilevelOptions {
            eta: 0.1,
            eta_dam: 1.0,
            inner_steps: 0,
            first_step: 0,
        };
        let mut last = dam.gamma_bar()[(0, 1)];
        for _ in 0..5 {
            bilevel_step(&mut dam, &mut toy, &ds, &ds, &opts, &mut gd(), None).unwrap();
            let now = dam.gamma_bar()[(0, 1)];
            assert!(now > last);
            last = now;
        }
    }

    #[test]
    fn zero_step_sizes_change_nothing() {
        let mut dam = DamState::from_logits(Matrix::from_rows(&[[0.3, -1.2]]), 0.5).unwrap();
        let before = dam.clone();
        let mut toy = Toy { p: [0.4, 0.9] };
        let ds = toy_data();
        let opts = BilevelOptions {
            eta: 0.0,
            eta_dam: 0.0,
            inner_steps: 3,
            first_step: 0,
        };
        let out = bilevel_step(&mut dam, &mut toy, &ds, &ds, &opts, &mut gd(), None).unwrap();
        assert_eq!(out.inner.len(), 3);
        assert!(dam.logits().bitwise_eq(before.logits()));
        assert!(dam.gamma_bar().bitwise_eq(before.gamma_bar()));
        assert_eq!(toy.p.map(f64::to_bits), [0.4, 0.9].map(f64::to_bits));
    }

    #[test]
    fn divergence_reports_step() {
        let mut dam = init_dam(1, 2, 0.5).unwrap();
        let mut toy = Toy { p: [1e200, 1e200] };
        let ds = toy_data();
        let opts = BilevelOptions {
            eta: 0.1,
            eta_dam: 0.1,
            inner_steps: 1,
            first_step: 7,
        };
        match bilevel_step(&mut dam, &mut toy, &ds, &ds, &opts, &mut gd(), None) {
            Err(Error::Divergence { step, .. }) => assert_eq!(step, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn discretize_row_examples() {
        let dam = DamState::from_logits(
            Matrix::from_rows(&[[0.4f64.ln(), 0.1f64.ln(), 0.3f64.ln(), 0.2f64.ln()]]),
            0.5,
        )
        .unwrap();
        assert_eq!(discretize(&dam).gamma_bin().unwrap().row(0), &[1.0, 0.0, 1.0, 0.0]);

        let uniform = init_dam(1, 6, 0.5).unwrap();
        assert_eq!(discretize(&uniform).gamma_bin().unwrap().row(0), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn entropy_bounds() {
        let u = init_dam(3, 6, 0.5).unwrap();
        for h in row_entropy(u.gamma_bar()) {
            assert!((h - 6f64.ln()).abs() < 1e-12);
        }
        assert!(auto_sharing(u.gamma_bar()));
        let peaked = gamma_from_logits(&Matrix::from_rows(&[[20.0, 0.0, 0.0, 0.0, 0.0, 0.0]]));
        assert!(row_entropy(&peaked)[0] < 1e-5);
        assert!(!auto_sharing(&peaked));
    }

    fn small_net() -> ModularNet {
        let shape = ModularShape {
            layers: 2,
            dim: 4,
            seq_len: 2,
        };
        ModularNet::new_base(shape, &mut SeededRng::new(5, 0)).unwrap()
    }

    fn selected_dam() -> DamState {
        let mut dam = init_dam(2, 6, 0.5).unwrap();
        dam.set_gamma_bin(Matrix::from_rows(&[[1.0, 0.0, 1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 1.0, 1.0, 0.0, 0.0]]))
            .unwrap();
        dam
    }

    #[test]
    fn attach_with_sharing_aliases_bank() {
        let spec = AttachSpec {
            rank_own: 2,
            rank_shared: 1,
            alpha: 16.0,
            dropout: 0.0,
            sharing: true,
            warm_start: false,
        };
        let net = attach_sharing(&selected_dam(), &small_net(), &spec, &SeededRng::new(6, 0)).unwrap();
        for (l, fam) in [(0, Family::K), (1, Family::Q), (0, Family::D), (1, Family::D)] {
            assert!(matches!(net.slot(l, fam), AdapterSlot::Shared));
            assert_eq!(net.adapter(l, fam).unwrap().rank(), 1);
        }
        assert_eq!(net.adapter(0, Family::Q).unwrap().rank(), 2);
        assert_eq!(net.bank().len(), 6);
        assert!(std::ptr::eq(net.adapter(0, Family::D).unwrap(), net.adapter(1, Family::D).unwrap()));
    }

    #[test]
    fn attach_without_sharing_freezes_rest() {
        let spec = AttachSpec {
            rank_own: 2,
            rank_shared: 1,
            alpha: 16.0,
            dropout: 0.0,
            sharing: false,
            warm_start: false,
        };
        let net = attach_sharing(&selected_dam(), &small_net(), &spec, &SeededRng::new(6, 0)).unwrap();
        assert!(net.bank().is_empty());
        assert!(matches!(net.slot(0, Family::K), AdapterSlot::Frozen));
        assert!(net.adapter(1, Family::I).is_some());
        assert!(matches!(
            attach_sharing(&init_dam(2, 6, 0.5).unwrap(), &small_net(), &spec, &SeededRng::new(6, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_header_and_rows() {
        let mut buf = Vec::new();
        write_dam_csv(selected_dam().gamma_bin().unwrap(), true, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "Q,K,V,I,O,D\n1,0,1,0,1,0\n0,1,1,1,0,0\n");
    }

    proptest! {
        #[test]
        fn softmax_rows_are_simplex(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let g = gamma_from_logits(&Matrix::from_vec(2, 6, vals).unwrap());
            for i in 0..2 {
                prop_assert!((g.row(i).iter().sum::<f64>() - 1.0).abs() <= ROW_SUM_TOL);
                prop_assert!(g.row(i).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn discretize_keeps_exactly_k(vals in proptest::collection::vec(-5.0f64..5.0, 18), rho in 0.17f64..1.0) {
            let dam = discretize(&DamState::from_logits(Matrix::from_vec(3, 6, vals).unwrap(), rho).unwrap());
            let bin = dam.gamma_bin().unwrap();
            for i in 0..3 {
                let ones: Vec<usize> = (0..6).filter(|&j| bin[(i, j)] == 1.0).collect();
                prop_assert_eq!(ones.len(), dam.k());
                let min_kept = ones.iter().map(|&j| dam.gamma_bar()[(i, j)]).fold(f64::INFINITY, f64::min);
                for j in 0..6 {
                    if bin[(i, j)] == 0.0 {
                        prop_assert!(dam.gamma_bar()[(i, j)] <= min_kept);
                    }
                }
            }
        }
    }
}
