use super::{Evaluation, GatedModel};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_matrix, sign_vector, Matrix, SeededRng};

/// Tolerance on `‖x_i‖ = 1` for theory-path inputs.
pub const UNIT_NORM_TOL: f64 = 1e-8;

/// `f(x) = (1/√m) Σ_r a_r · ReLU((w0_r + γ_r ∘ w_r)ᵀ x)`.
///
/// Column `r` of `w0`, `w` and `gamma` holds hidden unit `r`. Only `w` is
/// trainable; `a` is fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryNet {
    w0: Matrix,
    w: Matrix,
    a: Matrix,
    gamma: Matrix,
}

impl TheoryNet {
    pub fn new(w0: Matrix, w: Matrix, a: Matrix, gamma: Matrix) -> Result<Self> {
        let (d, m) = w0.shape();
        if d == 0 || m == 0 {
            return Err(Error::Dimension("theory net needs d, m >= 1".into()));
        }
        if w.shape() != (d, m) || gamma.shape() != (d, m) || a.shape() != (m, 1) {
            return Err(Error::Dimension(format!(
                "w0 {d}x{m}, w {:?}, gamma {:?}, a {:?} are not conformal",
                w.shape(),
                gamma.shape(),
                a.shape()
            )));
        }
        if gamma.data().iter().any(|&g| g != 0.0 && g != 1.0) {
            return Err(Error::Config("theory gate entries must be 0 or 1".into()));
        }
        Ok(Self { w0, w, a, gamma })
    }

    /// `w ~ N(0, I)` and `a ~ U{-1, +1}`, drawn in that order from `rng`.
    pub fn init(w0: Matrix, gamma: Matrix, rng: &mut SeededRng) -> Result<Self> {
        let (d, m) = w0.shape();
        let w = gaussian_matrix(d, m, rng)?;
        let a = sign_vector(m, rng)?;
        Self::new(w0, w, a, gamma)
    }

    pub fn input_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn width(&self) -> usize {
        self.w0.cols()
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn gamma(&self) -> &Matrix {
        &self.gamma
    }

    pub fn set_w(&mut self, w: Matrix) -> Result<()> {
        if w.shape() != self.w.shape() {
            return Err(Error::Dimension(format!("w must be {:?}, got {:?}", self.w.shape(), w.shape())));
        }
        self.w = w;
        Ok(())
    }

    pub fn w_mut(&mut self) -> &mut Matrix {
        &mut self.w
    }

    fn check_inputs(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "inputs have {} rows, net expects {}",
                x.rows(),
                self.input_dim()
            )));
        }
        check_unit_columns(x)
    }

    /// Effective unit weights `w0_r + s_r·(γ_r ∘ w_r)`, stored unit-major (`m×d`).
    fn effective_units(&self, unit_scale: impl Fn(usize) -> f64) -> Vec<f64> {
        let (d, m) = self.w0.shape();
        let mut eff = vec![0.0; m * d];
        for k in 0..d {
            let (w0r, wr, gr) = (self.w0.row(k), self.w.row(k), self.gamma.row(k));
            for r in 0..m {
                eff[r * d + k] = w0r[r] + unit_scale(r) * (gr[r] * wr[r]);
            }
        }
        eff
    }

    /// Pre-activations (`m×n`, unit-major), predictions and, on request, `∂L/∂pre`.
    fn pass(&self, x: &Matrix, y: Option<&Matrix>, unit_scale: impl Fn(usize) -> f64) -> Pass {
        let (d, m) = self.w0.shape();
        let n = x.cols();
        let xt = x.transpose();
        let eff = self.effective_units(unit_scale);
        let inv_sqrt_m = 1.0 / (m as f64).sqrt();

        let mut pre = vec![0.0; m * n];
        let mut f = vec![0.0; n];
        for r in 0..m {
            let unit = &eff[r * d..(r + 1) * d];
            let ar = self.a[(r, 0)];
            for i in 0..n {
                let z: f64 = unit.iter().zip(xt.row(i)).map(|(u, v)| u * v).sum();
                pre[r * n + i] = z;
                if z > 0.0 {
                    f[i] += ar * z;
                }
            }
        }
        for v in &mut f {
            *v *= inv_sqrt_m;
        }
        let residual = y.map(|y| f.iter().zip(y.data()).map(|(fi, yi)| fi - yi).collect::<Vec<_>>());
        Pass { pre, f, residual, xt }
    }

    /// `∂L/∂w` for per-unit increment scale `s_r`, plus per-unit `Σ_i ∂L/∂pre_ri · (γ_r∘w_r)ᵀx_i`.
    fn grads(&self, pass: &Pass, unit_scale: impl Fn(usize) -> f64, want_scale_grad: bool) -> (Matrix, Vec<f64>) {
        let (d, m) = self.w0.shape();
        let n = pass.f.len();
        let inv_sqrt_m = 1.0 / (m as f64).sqrt();
        let residual = pass.residual.as_ref().expect("labels supplied");
        let mut grad_t = vec![0.0; m * d];
        let mut scale_grad = vec![0.0; if want_scale_grad { m } else { 0 }];
        let mut acc = vec![0.0; d];
        for r in 0..m {
            let coef = inv_sqrt_m * self.a[(r, 0)];
            acc.iter_mut().for_each(|v| *v = 0.0);
            let mut any = false;
            for (i, &res) in residual.iter().enumerate() {
                if pass.pre[r * n + i] > 0.0 {
                    any = true;
                    let dpre = res * coef;
                    for (a, xv) in acc.iter_mut().zip(pass.xt.row(i)) {
                        *a += dpre * xv;
                    }
                }
            }
            if !any {
                continue;
            }
            let s = unit_scale(r);
            for k in 0..d {
                let g = self.gamma[(k, r)];
                if g != 0.0 {
                    grad_t[r * d + k] = s * g * acc[k];
                    if want_scale_grad {
                        scale_grad[r] += g * self.w[(k, r)] * acc[k];
                    }
                }
            }
        }
        let mut grad = Matrix::zeros(d, m);
        for r in 0..m {
            for k in 0..d {
                grad[(k, r)] = grad_t[r * d + k];
            }
        }
        (grad, scale_grad)
    }
}

struct Pass {
    pre: Vec<f64>,
    f: Vec<f64>,
    residual: Option<Vec<f64>>,
    xt: Matrix,
}

/// Errors unless every column of `x` has unit norm.
pub fn check_unit_columns(x: &Matrix) -> Result<()> {
    for j in 0..x.cols() {
        let norm = x.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Normalization { column: j, norm });
        }
    }
    Ok(())
}

fn check_labels(x: &Matrix, y: &Matrix) -> Result<()> {
    if y.shape() != (x.cols(), 1) {
        return Err(Error::Dimension(format!(
            "labels are {}x{}, expected {}x1",
            y.rows(),
            y.cols(),
            x.cols()
        )));
    }
    Ok(())
}

/// Network outputs for the columns of `x` (`d×n`), as an `n×1` column.
pub fn theory_forward(net: &TheoryNet, x: &Matrix) -> Result<Matrix> {
    net.check_inputs(x)?;
    let pass = net.pass(x, None, |_| 1.0);
    Ok(Matrix::column_vector(&pass.f))
}

/// `Σ_i ½ (f(x_i) − y_i)²`.
pub fn theory_loss(net: &TheoryNet, x: &Matrix, y: &Matrix) -> Result<f64> {
    net.check_inputs(x)?;
    check_labels(x, y)?;
    let pass = net.pass(x, Some(y), |_| 1.0);
    Ok(half_sq(pass.residual.as_deref().unwrap()))
}

/// `∂L/∂w` (`d×m`). Coordinates with `γ = 0` get exactly zero.
pub fn theory_grad(net: &TheoryNet, x: &Matrix, y: &Matrix) -> Result<Matrix> {
    net.check_inputs(x)?;
    check_labels(x, y)?;
    let pass = net.pass(x, Some(y), |_| 1.0);
    Ok(net.grads(&pass, |_| 1.0, false).0)
}

fn half_sq(residual: &[f64]) -> f64 {
    residual.iter().map(|r| 0.5 * r * r).sum()
}

/// A [`TheoryNet`] viewed as one layer of `groups` modules: hidden units are
/// split into contiguous blocks and gate `j` scales the increment of block `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedTheoryNet {
    net: TheoryNet,
    groups: usize,
}

impl GroupedTheoryNet {
    pub fn new(net: TheoryNet, groups: usize) -> Result<Self> {
        if groups == 0 || groups > net.width() {
            return Err(Error::Config(format!(
                "cannot split {} hidden units into {groups} modules",
                net.width()
            )));
        }
        Ok(Self { net, groups })
    }

    pub fn net(&self) -> &TheoryNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut TheoryNet {
        &mut self.net
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    /// Module index of hidden unit `r`.
    pub fn group_of(&self, r: usize) -> usize {
        r * self.groups / self.net.width()
    }
}

impl GatedModel for GroupedTheoryNet {
    fn gate_shape(&self) -> (usize, usize) {
        (1, self.groups)
    }

    fn param_count(&self) -> usize {
        self.net.w.data().len()
    }

    fn params(&self) -> Vec<f64> {
        self.net.w.data().to_vec()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        self.net.w.data_mut().copy_from_slice(params);
        Ok(())
    }

    fn evaluate(
        &self,
        gates: &Matrix,
        x: &Matrix,
        y: &Matrix,
        with_grads: bool,
        _dropout: Option<&mut SeededRng>,
    ) -> Result<Evaluation> {
        if gates.shape() != self.gate_shape() {
            return Err(Error::Dimension(format!(
                "gates are {:?}, expected {:?}",
                gates.shape(),
                self.gate_shape()
            )));
        }
        self.net.check_inputs(x)?;
        check_labels(x, y)?;
        let scale = |r: usize| gates[(0, self.group_of(r))];
        let pass = self.net.pass(x, Some(y), scale);
        let loss = half_sq(pass.residual.as_deref().unwrap());
        if !with_grads {
            return Ok(Evaluation {
                loss,
                gate_grad: None,
                param_grad: None,
            });
        }
        let (grad, unit_grad) = self.net.grads(&pass, scale, true);
        let mut gate_grad = Matrix::zeros(1, self.groups);
        for (r, g) in unit_grad.iter().enumerate() {
            gate_grad[(0, self.group_of(r))] += g;
        }
        Ok(Evaluation {
            loss,
            gate_grad: Some(gate_grad),
            param_grad: Some(grad.into_vec()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_columns(d: usize, n: usize, rng: &mut SeededRng) -> Matrix {
        let mut x = gaussian_matrix(d, n, rng).unwrap();
        for j in 0..n {
            let c = x.column(j);
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.set_column(j, &c.iter().map(|v| v / norm).collect::<Vec<_>>());
        }
        x
    }

    fn random_net(d: usize, m: usize, gate_p: f64, seed: u64) -> TheoryNet {
        let mut rng = SeededRng::new(seed, 0);
        let w0 = gaussian_matrix(d, m, &mut rng).unwrap().scale(0.5);
        let gamma = Matrix::from_fn(d, m, |_, _| if rng.uniform() < gate_p { 1.0 } else { 0.0 });
        TheoryNet::init(w0, gamma, &mut rng).unwrap()
    }

    /// Scalar-loop evaluation of the network, written from the formula.
    fn reference_forward(net: &TheoryNet, x: &Matrix, combined: &Matrix) -> Vec<f64> {
        let (d, m) = combined.shape();
        (0..x.cols())
            .map(|i| {
                let mut s = 0.0;
                for r in 0..m {
                    let z: f64 = (0..d).map(|k| combined[(k, r)] * x[(k, i)]).sum();
                    s += net.a()[(r, 0)] * z.max(0.0);
                }
                s / (m as f64).sqrt()
            })
            .collect()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = SeededRng::new(1, 0);
        let x = unit_columns(3, 4, &mut rng);
        let net = TheoryNet::new(
            Matrix::zeros(3, 5),
            Matrix::zeros(3, 5),
            sign_vector(5, &mut rng).unwrap(),
            Matrix::filled(3, 5, 1.0),
        )
        .unwrap();
        assert!(theory_forward(&net, &x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_ones_gate_matches_plain_sum() {
        let mut rng = SeededRng::new(2, 0);
        let net = random_net(4, 16, 1.0, 3);
        let x = unit_columns(4, 6, &mut rng);
        let combined = net.w0().add(net.w()).unwrap();
        let expected = reference_forward(&net, &x, &combined);
        let got = theory_forward(&net, &x).unwrap();
        for (g, e) in got.data().iter().zip(&expected) {
            assert!((g - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn hand_computed_two_unit_net() {
        let w0 = Matrix::from_rows(&[[1.0, -1.0], [0.0, 0.0]]);
        let w = Matrix::from_rows(&[[0.0, 2.0], [1.0, 0.5]]);
        let gamma = Matrix::from_rows(&[[1.0, 1.0], [1.0, 0.0]]);
        let a = Matrix::column_vector(&[1.0, -1.0]);
        let net = TheoryNet::new(w0, w, a, gamma).unwrap();
        let x = Matrix::column_vector(&[0.6, 0.8]);
        // unit 1 weights (1, 1): pre = 1.4. unit 2 weights (1, 0): pre = 0.6.
        // f = (1.4 - 0.6) / √2
        let f = theory_forward(&net, &x).unwrap()[(0, 0)];
        assert!((f - 0.8 / 2f64.sqrt()).abs() <= 1e-15);
    }

    #[test]
    fn loss_values() {
        let net = TheoryNet::new(
            Matrix::from_rows(&[[1.0], [0.0]]),
            Matrix::zeros(2, 1),
            Matrix::column_vector(&[1.0]),
            Matrix::filled(2, 1, 1.0),
        )
        .unwrap();
        let x = Matrix::column_vector(&[1.0, 0.0]);
        // f = 1, so y = 1 gives zero loss; y = -1 gives ½·2² = 2.
        assert_eq!(theory_loss(&net, &x, &Matrix::column_vector(&[1.0])).unwrap(), 0.0);
        assert_eq!(theory_loss(&net, &x, &Matrix::column_vector(&[-1.0])).unwrap(), 2.0);
        assert!(matches!(
            theory_loss(&net, &x, &Matrix::column_vector(&[1.0, 2.0])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let mut rng = SeededRng::new(4, 0);
        let net = random_net(5, 12, 0.5, 5);
        let x = unit_columns(5, 7, &mut rng);
        let y = gaussian_matrix(7, 1, &mut rng).unwrap();
        let combined = net.w0().add(&net.w().hadamard(net.gamma()).unwrap()).unwrap();
        let f = reference_forward(&net, &x, &combined);
        let expected: f64 = f.iter().zip(y.data()).map(|(a, b)| 0.5 * (a - b).powi(2)).sum();
        assert!((theory_loss(&net, &x, &y).unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn non_unit_inputs_rejected() {
        let net = random_net(2, 3, 1.0, 0);
        let x = Matrix::column_vector(&[1.0, 1.0]);
        assert!(matches!(theory_forward(&net, &x), Err(Error::Normalization { column: 0, .. })));
    }

    #[test]
    fn closed_gate_kills_gradient() {
        let mut rng = SeededRng::new(6, 0);
        let net = random_net(4, 8, 0.0, 7);
        let x = unit_columns(4, 5, &mut rng);
        let y = gaussian_matrix(5, 1, &mut rng).unwrap();
        assert!(theory_grad(&net, &x, &y).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let mut rng = SeededRng::new(8, 0);
        let net = random_net(3, 6, 1.0, 9);
        let x = unit_columns(3, 4, &mut rng);
        let y = theory_forward(&net, &x).unwrap();
        assert!(theory_grad(&net, &x, &y).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn positive_homogeneity() {
        let mut rng = SeededRng::new(10, 0);
        let net = random_net(4, 10, 0.6, 11);
        let x = unit_columns(4, 5, &mut rng);
        let c = 2.5;
        let scaled = TheoryNet::new(
            net.w0().scale(c),
            net.w().scale(c),
            net.a().clone(),
            net.gamma().clone(),
        )
        .unwrap();
        let f = theory_forward(&net, &x).unwrap();
        let fc = theory_forward(&scaled, &x).unwrap();
        for (a, b) in f.data().iter().zip(fc.data()) {
            assert!((c * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn grouped_gates_of_one_match_plain_net() {
        let mut rng = SeededRng::new(12, 0);
        let net = random_net(4, 12, 0.5, 13);
        let x = unit_columns(4, 6, &mut rng);
        let y = gaussian_matrix(6, 1, &mut rng).unwrap();
        let grouped = GroupedTheoryNet::new(net.clone(), 3).unwrap();
        let ev = grouped.evaluate(&Matrix::filled(1, 3, 1.0), &x, &y, true, None).unwrap();
        assert_eq!(ev.loss, theory_loss(&net, &x, &y).unwrap());
        assert_eq!(ev.param_grad.unwrap(), theory_grad(&net, &x, &y).unwrap().into_vec());
        assert_eq!(grouped.group_of(0), 0);
        assert_eq!(grouped.group_of(11), 2);
    }

    #[test]
    fn grouped_gate_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(14, 0);
        let net = random_net(3, 9, 0.7, 15);
        let x = unit_columns(3, 5, &mut rng);
        let y = gaussian_matrix(5, 1, &mut rng).unwrap();
        let grouped = GroupedTheoryNet::new(net, 3).unwrap();
        let gates = Matrix::from_rows(&[[0.2, 0.5, 0.3]]);
        let ev = grouped.evaluate(&gates, &x, &y, true, None).unwrap();
        let gg = ev.gate_grad.unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut gp = gates.clone();
            let mut gm = gates.clone();
            gp[(0, j)] += h;
            gm[(0, j)] -= h;
            let fd = (grouped.loss(&gp, &x, &y).unwrap() - grouped.loss(&gm, &x, &y).unwrap()) / (2.0 * h);
            assert!((fd - gg[(0, j)]).abs() <= 1e-6 * fd.abs().max(1e-3), "gate {j}: {fd} vs {}", gg[(0, j)]);
        }
    }

    #[test]
    fn rejects_non_binary_gate() {
        let r = TheoryNet::new(
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
            Matrix::filled(2, 1, 1.0),
            Matrix::filled(2, 2, 0.5),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
