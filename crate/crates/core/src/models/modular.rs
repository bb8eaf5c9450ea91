use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Evaluation, GatedModel};
use crate::adapters::{init_adapter, AdapterGrad, BranchCache, Family, GatedLinear, LowRankAdapter, SharedAdapterBank};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_matrix, Matrix, SeededRng};

/// Layer count, model width and sequence length of a [`ModularNet`].
///
/// Every module is `dim×dim`, so per-family shapes agree across layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModularShape {
    pub layers: usize,
    pub dim: usize,
    pub seq_len: usize,
}

impl ModularShape {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.seq_len == 0 {
            return Err(Error::Config(format!("degenerate network shape {self:?}")));
        }
        Ok(())
    }

    /// Length of one flattened example (`dim · seq_len`).
    pub fn input_len(&self) -> usize {
        self.dim * self.seq_len
    }
}

/// Gain of the frozen module weights. Below one it keeps the residual stream
/// from compounding across layers, since there is no normalization.
pub const BASE_GAIN: f64 = 0.5;

/// What a module adds on top of its frozen weight.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterSlot {
    Frozen,
    Own(LowRankAdapter),
    /// Uses the network's bank entry for the module's family.
    Shared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleRecord {
    base: Matrix,
    slot: AdapterSlot,
}

impl ModuleRecord {
    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn slot(&self) -> &AdapterSlot {
        &self.slot
    }
}

/// Stack of single-head attention blocks with a linear readout.
///
/// Each layer maps a `dim×seq` token matrix `h` through
///
/// ```text
/// q, k, v = Q h, K h, V h
/// P       = softmax_rows(qᵀ k / √dim)
/// h'      = h + O (v Pᵀ)
/// out     = h' + D ReLU(I h')
/// ```
///
/// and the prediction is `headᵀ · mean_t(out_t)`. Every linear map is a
/// [`GatedLinear`] whose gate comes from row `layer` of the gate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModularNet {
    shape: ModularShape,
    layers: Vec<[ModuleRecord; 6]>,
    head: Matrix,
    bank: SharedAdapterBank,
}

struct LayerCache {
    branches: [Option<BranchCache>; 6],
    q: Matrix,
    k: Matrix,
    v: Matrix,
    p: Matrix,
    pre: Matrix,
}

/// Per-example gradient contributions.
struct ExampleGrads {
    gates: Matrix,
    own: Vec<Option<AdapterGrad>>,
    bank: Vec<Option<AdapterGrad>>,
}

impl ModularNet {
    /// Frozen base network: module weights `N(0, BASE_GAIN²/dim)`, head
    /// `N(0, 1/dim)`, no adapters.
    pub fn new_base(shape: ModularShape, rng: &mut SeededRng) -> Result<Self> {
        shape.validate()?;
        let scale = BASE_GAIN / (shape.dim as f64).sqrt();
        let mut layers = Vec::with_capacity(shape.layers);
        for _ in 0..shape.layers {
            let mut mods = Vec::with_capacity(6);
            for _ in Family::ALL {
                mods.push(ModuleRecord {
                    base: gaussian_matrix(shape.dim, shape.dim, rng)?.scale(scale),
                    slot: AdapterSlot::Frozen,
                });
            }
            layers.push(mods.try_into().expect("six modules"));
        }
        let head = gaussian_matrix(shape.dim, 1, rng)?.scale(1.0 / (shape.dim as f64).sqrt());
        Ok(Self {
            shape,
            layers,
            head,
            bank: SharedAdapterBank::new(),
        })
    }

    pub fn shape(&self) -> ModularShape {
        self.shape
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn module(&self, layer: usize, family: Family) -> &ModuleRecord {
        &self.layers[layer][family.index()]
    }

    pub fn base(&self, layer: usize, family: Family) -> &Matrix {
        &self.module(layer, family).base
    }

    pub fn head(&self) -> &Matrix {
        &self.head
    }

    pub fn bank(&self) -> &SharedAdapterBank {
        &self.bank
    }

    pub fn bank_mut(&mut self) -> &mut SharedAdapterBank {
        &mut self.bank
    }

    pub fn slot(&self, layer: usize, family: Family) -> &AdapterSlot {
        &self.module(layer, family).slot
    }

    pub fn set_slot(&mut self, layer: usize, family: Family, slot: AdapterSlot) -> Result<()> {
        let dim = self.shape.dim;
        match &slot {
            AdapterSlot::Own(ad) if ad.out_dim() != dim || ad.in_dim() != dim => {
                return Err(Error::Dimension(format!(
                    "adapter {}x{} does not fit a {dim}x{dim} module",
                    ad.out_dim(),
                    ad.in_dim()
                )));
            }
            AdapterSlot::Shared if !self.bank.contains(family) => {
                return Err(Error::Sharing(format!("no bank entry for family {family}")));
            }
            _ => {}
        }
        self.layers[layer][family.index()].slot = slot;
        Ok(())
    }

    /// The adapter acting on a module, resolving shared slots through the bank.
    pub fn adapter(&self, layer: usize, family: Family) -> Option<&LowRankAdapter> {
        match &self.module(layer, family).slot {
            AdapterSlot::Frozen => None,
            AdapterSlot::Own(ad) => Some(ad),
            AdapterSlot::Shared => self.bank.get(family),
        }
    }

    /// Gives every module a fresh adapter of rank `rank`.
    pub fn attach_all(&mut self, rank: usize, alpha: f64, dropout_p: f64, rng: &SeededRng) -> Result<()> {
        let dim = self.shape.dim;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for fam in Family::ALL {
                let mut stream = rng.derive_path(&[l as u64, fam.index() as u64]);
                let ad = init_adapter(dim, dim, rank, alpha, &mut stream)?.with_dropout(dropout_p)?;
                layer[fam.index()].slot = AdapterSlot::Own(ad);
            }
        }
        Ok(())
    }

    /// Drops every adapter and the bank.
    pub fn detach_all(&mut self) {
        for layer in &mut self.layers {
            for m in layer.iter_mut() {
                m.slot = AdapterSlot::Frozen;
            }
        }
        self.bank = SharedAdapterBank::new();
    }

    /// Materialized effective weight `W + g·ΔW` of one module.
    pub fn effective_weight(&self, layer: usize, family: Family, gate: f64) -> Matrix {
        let mut w = self.base(layer, family).clone();
        if let Some(ad) = self.adapter(layer, family) {
            w.add_scaled(&ad.delta(), gate).expect("conformal");
        }
        w
    }

    fn check_gates(&self, gates: &Matrix) -> Result<()> {
        if gates.shape() != (self.layers.len(), Family::COUNT) {
            return Err(Error::Dimension(format!(
                "gates are {}x{}, expected {}x6",
                gates.rows(),
                gates.cols(),
                self.layers.len()
            )));
        }
        Ok(())
    }

    fn check_inputs(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.shape.input_len() {
            return Err(Error::Dimension(format!(
                "examples have length {}, network expects {} (dim {} x seq {})",
                x.rows(),
                self.shape.input_len(),
                self.shape.dim,
                self.shape.seq_len
            )));
        }
        Ok(())
    }

    /// Unflattens example `j`: token `t` occupies entries `t·dim .. (t+1)·dim`.
    fn tokens(&self, x: &Matrix, j: usize) -> Matrix {
        let (dim, seq) = (self.shape.dim, self.shape.seq_len);
        Matrix::from_fn(dim, seq, |a, t| x[(t * dim + a, j)])
    }

    fn linear(&self, layer: usize, family: Family, gates: &Matrix) -> GatedLinear<'_> {
        GatedLinear::new(
            self.base(layer, family),
            self.adapter(layer, family),
            gates[(layer, family.index())],
        )
        .expect("slots are shape-checked on insertion")
    }

    fn forward_example(
        &self,
        gates: &Matrix,
        tokens: Matrix,
        mut dropout: Option<&mut SeededRng>,
    ) -> Result<(f64, Vec<LayerCache>)> {
        let dim = self.shape.dim;
        let inv_sqrt_dim = 1.0 / (dim as f64).sqrt();
        let mut h = tokens;
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let mut branches: [Option<BranchCache>; 6] = Default::default();
            let mut run = |fam: Family, input: &Matrix, branches: &mut [Option<BranchCache>; 6]| -> Result<Matrix> {
                let (out, cache) = self.linear(l, fam, gates).forward(input, dropout.as_deref_mut())?;
                branches[fam.index()] = cache;
                Ok(out)
            };
            let q = run(Family::Q, &h, &mut branches)?;
            let k = run(Family::K, &h, &mut branches)?;
            let v = run(Family::V, &h, &mut branches)?;
            let p = softmax_rows(&q.t_matmul(&k)?.scale(inv_sqrt_dim));
            let z = v.matmul_t(&p)?;
            let attn = run(Family::O, &z, &mut branches)?;
            let h1 = h.add(&attn)?;
            let pre = run(Family::I, &h1, &mut branches)?;
            let u = pre.map(|v| if v > 0.0 { v } else { 0.0 });
            let dense = run(Family::D, &u, &mut branches)?;
            let out = h1.add(&dense)?;
            caches.push(LayerCache {
                branches,
                q,
                k,
                v,
                p,
                pre,
            });
            h = out;
        }
        let seq = self.shape.seq_len as f64;
        let f = self.head.t_matmul(&h)?.sum() / seq;
        Ok((f, caches))
    }

    fn backward_example(&self, gates: &Matrix, caches: &[LayerCache], dloss_df: f64) -> Result<ExampleGrads> {
        let (dim, seq) = (self.shape.dim, self.shape.seq_len);
        let inv_sqrt_dim = 1.0 / (dim as f64).sqrt();
        let mut grads = ExampleGrads {
            gates: Matrix::zeros(self.layers.len(), Family::COUNT),
            own: vec![None; self.layers.len() * Family::COUNT],
            bank: vec![None; Family::COUNT],
        };
        // ∂L/∂out_t = head · dL/df / seq for every token t.
        let mut dh = Matrix::from_fn(dim, seq, |a, _| self.head[(a, 0)] * dloss_df / seq as f64);

        for l in (0..self.layers.len()).rev() {
            let c = &caches[l];
            let back = |fam: Family, grad_out: &Matrix, grads: &mut ExampleGrads| -> Result<Matrix> {
                let lin = self.linear(l, fam, gates);
                let (dx, dad, dgate) = lin.backward(c.branches[fam.index()].as_ref(), grad_out)?;
                grads.gates[(l, fam.index())] += dgate;
                if let Some(dad) = dad {
                    let target = match self.module(l, fam).slot {
                        AdapterSlot::Shared => &mut grads.bank[fam.index()],
                        _ => &mut grads.own[l * Family::COUNT + fam.index()],
                    };
                    match target {
                        Some(acc) => acc.accumulate(&dad)?,
                        None => *target = Some(dad),
                    }
                }
                Ok(dx)
            };

            // FFN sub-block: out = h1 + D relu(I h1).
            let du = back(Family::D, &dh, &mut grads)?;
            let dpre = Matrix::from_fn(dim, seq, |a, t| if c.pre[(a, t)] > 0.0 { du[(a, t)] } else { 0.0 });
            let dh1_ffn = back(Family::I, &dpre, &mut grads)?;
            let dh1 = dh.add(&dh1_ffn)?;

            // Attention sub-block: h1 = h + O (v Pᵀ).
            let dz = back(Family::O, &dh1, &mut grads)?;
            let dv = dz.matmul(&c.p)?;
            let dp = dz.t_matmul(&c.v)?;
            let mut ds = Matrix::zeros(seq, seq);
            for t in 0..seq {
                let row_dot: f64 = (0..seq).map(|s| c.p[(t, s)] * dp[(t, s)]).sum();
                for s in 0..seq {
                    ds[(t, s)] = c.p[(t, s)] * (dp[(t, s)] - row_dot) * inv_sqrt_dim;
                }
            }
            let dq = c.k.matmul_t(&ds)?;
            let dk = c.q.matmul(&ds)?;

            let mut dinput = dh1;
            dinput.add_scaled(&back(Family::Q, &dq, &mut grads)?, 1.0)?;
            dinput.add_scaled(&back(Family::K, &dk, &mut grads)?, 1.0)?;
            dinput.add_scaled(&back(Family::V, &dv, &mut grads)?, 1.0)?;
            dh = dinput;
        }
        Ok(grads)
    }

    /// Visits adapter parameters in [`GatedModel::params`] order.
    fn param_blocks(&self) -> Vec<&LowRankAdapter> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for m in layer.iter() {
                if let AdapterSlot::Own(ad) = &m.slot {
                    out.push(ad);
                }
            }
        }
        out.extend(self.bank.iter().map(|(_, ad)| ad));
        out
    }

    /// Count of trainable scalars: own adapters plus bank entries.
    pub fn trainable_param_count(&self) -> usize {
        self.param_blocks().iter().map(|a| a.param_count()).sum()
    }
}

fn softmax_rows(s: &Matrix) -> Matrix {
    let mut p = s.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    p
}

/// Predictions (`n×1`) for flattened examples `x` (`dim·seq × n`).
pub fn modular_forward(net: &ModularNet, gates: &Matrix, x: &Matrix) -> Result<Matrix> {
    net.check_gates(gates)?;
    net.check_inputs(x)?;
    let preds: Result<Vec<f64>> = (0..x.cols())
        .into_par_iter()
        .map(|j| net.forward_example(gates, net.tokens(x, j), None).map(|(f, _)| f))
        .collect();
    Ok(Matrix::column_vector(&preds?))
}

impl GatedModel for ModularNet {
    fn gate_shape(&self) -> (usize, usize) {
        (self.layers.len(), Family::COUNT)
    }

    fn param_count(&self) -> usize {
        self.trainable_param_count()
    }

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_param_count());
        for ad in self.param_blocks() {
            ad.write_params(&mut out);
        }
        out
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.trainable_param_count() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.trainable_param_count(),
                params.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for m in layer.iter_mut() {
                if let AdapterSlot::Own(ad) = &mut m.slot {
                    offset += ad.read_params(&params[offset..])?;
                }
            }
        }
        for (_, ad) in self.bank.iter_mut() {
            offset += ad.read_params(&params[offset..])?;
        }
        Ok(())
    }

    /// Mean squared-error loss `(1/n) Σ ½ (f(x_i) − y_i)²`.
    fn evaluate(
        &self,
        gates: &Matrix,
        x: &Matrix,
        y: &Matrix,
        with_grads: bool,
        dropout: Option<&mut SeededRng>,
    ) -> Result<Evaluation> {
        self.check_gates(gates)?;
        self.check_inputs(x)?;
        let n = x.cols();
        if n == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        if y.shape() != (n, 1) {
            return Err(Error::Dimension(format!("labels are {:?}, expected ({n}, 1)", y.shape())));
        }
        // One sub-stream per example keeps dropout independent of scheduling.
        let dropout_root = dropout.map(|rng| SeededRng::new(rng.seed(), rng.next_u64()));

        let per_example: Result<Vec<(f64, Option<ExampleGrads>)>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut local = dropout_root.as_ref().map(|r| r.derive(j as u64));
                let (f, caches) = self.forward_example(gates, self.tokens(x, j), local.as_mut())?;
                let resid = f - y[(j, 0)];
                let grads = if with_grads {
                    Some(self.backward_example(gates, &caches, resid / n as f64)?)
                } else {
                    None
                };
                Ok((0.5 * resid * resid, grads))
            })
            .collect();
        let per_example = per_example?;

        // Sequential reduction in example order for bitwise reproducibility.
        let loss = per_example.iter().map(|(l, _)| l).sum::<f64>() / n as f64;
        if !with_grads {
            return Ok(Evaluation {
                loss,
                gate_grad: None,
                param_grad: None,
            });
        }
        let mut gate_grad = Matrix::zeros(self.layers.len(), Family::COUNT);
        let mut own: Vec<Option<AdapterGrad>> = vec![None; self.layers.len() * Family::COUNT];
        let mut bank: Vec<Option<AdapterGrad>> = vec![None; Family::COUNT];
        for (_, g) in &per_example {
            let g = g.as_ref().expect("requested");
            gate_grad.add_scaled(&g.gates, 1.0)?;
            for (acc, part) in own.iter_mut().chain(bank.iter_mut()).zip(g.own.iter().chain(g.bank.iter())) {
                if let Some(part) = part {
                    match acc {
                        Some(a) => a.accumulate(part)?,
                        None => *acc = Some(part.clone()),
                    }
                }
            }
        }

        let mut flat = Vec::with_capacity(self.trainable_param_count());
        for (l, layer) in self.layers.iter().enumerate() {
            for fam in Family::ALL {
                if let AdapterSlot::Own(ad) = &layer[fam.index()].slot {
                    match &own[l * Family::COUNT + fam.index()] {
                        Some(g) => g.write_flat(&mut flat),
                        None => AdapterGrad::zeros_like(ad).write_flat(&mut flat),
                    }
                }
            }
        }
        for (fam, ad) in self.bank.iter() {
            match &bank[fam.index()] {
                Some(g) => g.write_flat(&mut flat),
                None => AdapterGrad::zeros_like(ad).write_flat(&mut flat),
            }
        }
        Ok(Evaluation {
            loss,
            gate_grad: Some(gate_grad),
            param_grad: Some(flat),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(layers: usize, dim: usize, seq: usize) -> ModularShape {
        ModularShape {
            layers,
            dim,
            seq_len: seq,
        }
    }

    /// Net with every adapter trained to a random nonzero state.
    fn trained_net(s: ModularShape, seed: u64) -> ModularNet {
        let mut rng = SeededRng::new(seed, 0);
        let mut net = ModularNet::new_base(s, &mut rng).unwrap();
        net.attach_all(2, 4.0, 0.0, &rng.derive(1)).unwrap();
        let mut p = net.params();
        for v in p.iter_mut() {
            *v = 0.3 * rng.gaussian();
        }
        net.set_params(&p).unwrap();
        net
    }

    /// Reference evaluation with materialized weights and scalar loops.
    fn reference_forward(net: &ModularNet, gates: &Matrix, example: &[f64]) -> f64 {
        let s = net.shape();
        let (dim, seq) = (s.dim, s.seq_len);
        let mut h: Vec<Vec<f64>> = (0..seq).map(|t| example[t * dim..(t + 1) * dim].to_vec()).collect();
        let apply = |w: &Matrix, v: &[f64]| -> Vec<f64> {
            (0..w.rows()).map(|i| (0..w.cols()).map(|j| w[(i, j)] * v[j]).sum()).collect()
        };
        for l in 0..net.num_layers() {
            let w = |f: Family| net.effective_weight(l, f, gates[(l, f.index())]);
            let (wq, wk, wv, wi, wo, wd) = (w(Family::Q), w(Family::K), w(Family::V), w(Family::I), w(Family::O), w(Family::D));
            let q: Vec<_> = h.iter().map(|x| apply(&wq, x)).collect();
            let k: Vec<_> = h.iter().map(|x| apply(&wk, x)).collect();
            let v: Vec<_> = h.iter().map(|x| apply(&wv, x)).collect();
            let mut h1 = Vec::with_capacity(seq);
            for t in 0..seq {
                let scores: Vec<f64> = (0..seq)
                    .map(|u| q[t].iter().zip(&k[u]).map(|(a, b)| a * b).sum::<f64>() / (dim as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|x| (x - max).exp()).collect();
                let total: f64 = e.iter().sum();
                let mut z = vec![0.0; dim];
                for u in 0..seq {
                    for a in 0..dim {
                        z[a] += e[u] / total * v[u][a];
                    }
                }
                let o = apply(&wo, &z);
                h1.push(h[t].iter().zip(&o).map(|(a, b)| a + b).collect::<Vec<_>>());
            }
            h = h1
                .iter()
                .map(|x| {
                    let u: Vec<f64> = apply(&wi, x).into_iter().map(|v| v.max(0.0)).collect();
                    let d = apply(&wd, &u);
                    x.iter().zip(&d).map(|(a, b)| a + b).collect()
                })
                .collect();
        }
        let mut f = 0.0;
        for t in 0..seq {
            for a in 0..dim {
                f += net.head()[(a, 0)] * h[t][a];
            }
        }
        f / seq as f64
    }

    #[test]
    fn fresh_adapters_reproduce_base_outputs() {
        let s = shape(2, 6, 3);
        let mut rng = SeededRng::new(1, 0);
        let base = ModularNet::new_base(s, &mut rng).unwrap();
        let mut adapted = base.clone();
        adapted.attach_all(2, 16.0, 0.0, &rng.derive(9)).unwrap();
        let x = gaussian_matrix(s.input_len(), 10, &mut rng).unwrap();
        let base_out = modular_forward(&base, &Matrix::zeros(2, 6), &x).unwrap();
        for gates in [Matrix::zeros(2, 6), Matrix::filled(2, 6, 1.0), Matrix::filled(2, 6, 0.37)] {
            assert!(modular_forward(&adapted, &gates, &x).unwrap().bitwise_eq(&base_out));
        }
    }

    #[test]
    fn matches_materialized_reference() {
        let s = shape(1, 4, 2);
        let net = trained_net(s, 3);
        let gates = Matrix::from_rows(&[[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]]);
        let x = gaussian_matrix(s.input_len(), 5, &mut SeededRng::new(4, 0)).unwrap();
        let out = modular_forward(&net, &gates, &x).unwrap();
        for j in 0..5 {
            let r = reference_forward(&net, &gates, &x.column(j));
            assert!((out[(j, 0)] - r).abs() <= 1e-10, "{} vs {r}", out[(j, 0)]);
        }
    }

    #[test]
    fn deep_reference_with_fractional_gates() {
        let s = shape(3, 5, 4);
        let net = trained_net(s, 5);
        let gates = Matrix::from_fn(3, 6, |i, j| ((i * 6 + j) as f64 * 0.37).fract());
        let x = gaussian_matrix(s.input_len(), 3, &mut SeededRng::new(6, 0)).unwrap();
        let out = modular_forward(&net, &gates, &x).unwrap();
        for j in 0..3 {
            let r = reference_forward(&net, &gates, &x.column(j));
            assert!((out[(j, 0)] - r).abs() <= 1e-10 * r.abs().max(1.0));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = shape(2, 4, 3);
        let net = trained_net(s, 7);
        let mut rng = SeededRng::new(8, 0);
        let x = gaussian_matrix(s.input_len(), 4, &mut rng).unwrap();
        let y = gaussian_matrix(4, 1, &mut rng).unwrap();
        let gates = Matrix::from_fn(2, 6, |_, _| 0.2 + 0.6 * rng.uniform());
        let ev = net.evaluate(&gates, &x, &y, true, None).unwrap();
        let pg = ev.param_grad.unwrap();
        let gg = ev.gate_grad.unwrap();
        let h = 1e-6;

        let params = net.params();
        let mut probe = net.clone();
        for idx in (0..params.len()).step_by(7) {
            let mut p = params.clone();
            p[idx] += h;
            probe.set_params(&p).unwrap();
            let lp = probe.loss(&gates, &x, &y).unwrap();
            p[idx] -= 2.0 * h;
            probe.set_params(&p).unwrap();
            let lm = probe.loss(&gates, &x, &y).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - pg[idx]).abs() <= 1e-5 * fd.abs().max(1e-4), "param {idx}: {fd} vs {}", pg[idx]);
        }
        for i in 0..2 {
            for j in 0..6 {
                let mut gp = gates.clone();
                gp[(i, j)] += h;
                let mut gm = gates.clone();
                gm[(i, j)] -= h;
                let fd = (net.loss(&gp, &x, &y).unwrap() - net.loss(&gm, &x, &y).unwrap()) / (2.0 * h);
                assert!((fd - gg[(i, j)]).abs() <= 1e-5 * fd.abs().max(1e-4), "gate ({i},{j})");
            }
        }
    }

    #[test]
    fn shared_slots_alias_bank_entry() {
        let s = shape(3, 4, 2);
        let mut rng = SeededRng::new(9, 0);
        let mut net = ModularNet::new_base(s, &mut rng).unwrap();
        assert!(matches!(net.set_slot(0, Family::V, AdapterSlot::Shared), Err(Error::Sharing(_))));
        net.bank_mut().insert(Family::V, init_adapter(4, 4, 1, 2.0, &mut rng).unwrap());
        for l in 0..3 {
            net.set_slot(l, Family::V, AdapterSlot::Shared).unwrap();
        }
        let p: Vec<f64> = (0..net.param_count()).map(|i| i as f64 * 0.01).collect();
        net.set_params(&p).unwrap();
        let first = net.adapter(0, Family::V).unwrap();
        for l in 1..3 {
            let other = net.adapter(l, Family::V).unwrap();
            assert!(first.a().bitwise_eq(other.a()) && first.b().bitwise_eq(other.b()));
        }
        assert_eq!(net.param_count(), 4 + 4);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = shape(1, 3, 2);
        let net = ModularNet::new_base(s, &mut SeededRng::new(0, 0)).unwrap();
        let x = Matrix::zeros(6, 2);
        assert!(matches!(modular_forward(&net, &Matrix::zeros(2, 6), &x), Err(Error::Dimension(_))));
        assert!(matches!(modular_forward(&net, &Matrix::zeros(1, 6), &Matrix::zeros(5, 2)), Err(Error::Dimension(_))));
        assert!(matches!(
            net.evaluate(&Matrix::zeros(1, 6), &Matrix::zeros(6, 0), &Matrix::zeros(0, 1), false, None),
            Err(Error::Data(_))
        ));
    }
}
