//! Two-stage training: relax the DAM jointly with warm adapters, discretize to
//! exactly `k` modules per layer, then fine-tune fresh adapters on the
//! selection (with the remaining modules sharing one adapter per family).

mod checkpoint;
mod config;
mod optim;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, Weights, MAGIC, VERSION};
pub use config::{Architecture, DataSource, RunConfig, Sharing, TheoryModel, SEED_ENV};
pub use optim::{gd_step, Optimizer, OptimizerKind};

use crate::adapters::Family;
use crate::dam::{
    attach_sharing, auto_sharing, bilevel_step, discretize, init_dam, row_entropy, write_dam_csv, AttachSpec,
    BilevelOptions, DamState,
};
use crate::data::{gen_planted, gen_sphere, ingest_csv, make_split, random_module_mask, Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::models::{Evaluation, GatedModel, GroupedTheoryNet, ModularNet, TheoryNet};
use crate::numerics::{gaussian_matrix, Matrix, SeededRng};

/// Stream tags under the root seed.
pub mod streams {
    pub const BASE: u64 = 1;
    pub const DATA: u64 = 2;
    pub const PLANT: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const STAGE1_ADAPTERS: u64 = 5;
    pub const DROPOUT: u64 = 6;
    pub const STAGE2_ADAPTERS: u64 = 7;
    pub const RANDOM_SELECTION: u64 = 8;
}

/// Either architecture behind one [`GatedModel`].
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Modular(ModularNet),
    Theory(GroupedTheoryNet),
}

impl Model {
    pub fn as_modular(&self) -> Option<&ModularNet> {
        match self {
            Model::Modular(n) => Some(n),
            Model::Theory(_) => None,
        }
    }

    pub fn as_theory(&self) -> Option<&GroupedTheoryNet> {
        match self {
            Model::Theory(n) => Some(n),
            Model::Modular(_) => None,
        }
    }

    fn inner(&self) -> &dyn GatedModel {
        match self {
            Model::Modular(n) => n,
            Model::Theory(n) => n,
        }
    }
}

impl GatedModel for Model {
    fn gate_shape(&self) -> (usize, usize) {
        self.inner().gate_shape()
    }

    fn param_count(&self) -> usize {
        self.inner().param_count()
    }

    fn params(&self) -> Vec<f64> {
        self.inner().params()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        match self {
            Model::Modular(n) => n.set_params(params),
            Model::Theory(n) => n.set_params(params),
        }
    }

    fn evaluate(&self, gates: &Matrix, x: &Matrix, y: &Matrix, with_grads: bool, dropout: Option<&mut SeededRng>) -> Result<Evaluation> {
        self.inner().evaluate(gates, x, y, with_grads, dropout)
    }
}

/// Everything a run needs before training: frozen model, data and split.
#[derive(Debug, Clone)]
pub struct Task {
    /// Frozen model without adapters (theory: increment at its initial draw).
    pub base: Model,
    pub full: Dataset,
    pub train: Dataset,
    pub valid: Dataset,
    pub split: SplitPlan,
    /// `L×6` ground-truth selection of a planted task.
    pub planted: Option<Matrix>,
}

/// Builds the base model and data deterministically from the config.
pub fn prepare_task(cfg: &RunConfig) -> Result<Task> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed, 0);
    let (base, full, planted) = match cfg.architecture {
        Architecture::Modular => {
            let shape = cfg.shape()?;
            let base = ModularNet::new_base(shape, &mut root.derive(streams::BASE))?;
            let (full, planted) = match &cfg.data {
                DataSource::Planted { planted_k, options } => {
                    let mask = random_module_mask(shape.layers, *planted_k, &mut root.derive(streams::PLANT))?;
                    let (ds, _) = gen_planted(&base, &mask, options, &mut root.derive(streams::DATA))?;
                    (ds, Some(mask))
                }
                DataSource::Csv { path, label, normalize } => (ingest_csv(path, label, *normalize)?, None),
                DataSource::Sphere { .. } => unreachable!("rejected by validate"),
            };
            if full.dim() != shape.input_len() {
                return Err(Error::Data(format!(
                    "examples have {} features, the model reads {}",
                    full.dim(),
                    shape.input_len()
                )));
            }
            (Model::Modular(base), full, planted)
        }
        Architecture::Theory => {
            let tm = cfg.theory_model()?;
            let full = match &cfg.data {
                DataSource::Sphere { n, c_label } => gen_sphere(*n, tm.d, *c_label, &mut root.derive(streams::DATA))?,
                DataSource::Csv { path, label, normalize } => ingest_csv(path, label, *normalize)?,
                DataSource::Planted { .. } => unreachable!("rejected by validate"),
            };
            let w0 = gaussian_matrix(tm.d, tm.m, &mut root.derive(streams::BASE))?.scale(tm.w0_scale);
            let net = TheoryNet::init(w0, Matrix::filled(tm.d, tm.m, 1.0), &mut root.derive(streams::STAGE1_ADAPTERS))?;
            (Model::Theory(GroupedTheoryNet::new(net, tm.groups)?), full, None)
        }
    };
    let split = make_split(full.len(), cfg.split_fraction, &mut root.derive(streams::SPLIT))?;
    Ok(Task {
        base,
        train: full.subset(&split.train)?,
        valid: full.subset(&split.valid)?,
        full,
        split,
        planted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub dam: DamState,
    /// Model with its stage-1 adapters.
    pub model: Model,
    pub rows: Vec<LossRow>,
    /// Validation loss seen by each outer update.
    pub outer_valid: Vec<f64>,
}

fn with_last_losses(e: Error, rows: &[LossRow]) -> Error {
    match (e, rows.last()) {
        (Error::Divergence { step, detail }, Some(last)) => Error::Divergence {
            step,
            detail: format!(
                "{detail}; last finite losses at step {}: train {:e}, valid {:e}",
                last.step, last.train_loss, last.valid_loss
            ),
        },
        (e, _) => e,
    }
}

/// `V` outer updates of the DAM logits, each followed by `T` adapter updates.
pub fn run_stage1(cfg: &RunConfig, task: &Task) -> Result<Stage1Output> {
    let root = SeededRng::new(cfg.seed, 0);
    let (layers, n) = cfg.dam_shape()?;
    let mut dam = init_dam(layers, n, cfg.rho)?;
    let mut model = task.base.clone();
    if let Model::Modular(net) = &mut model {
        net.attach_all(cfg.r_l, cfg.alpha, cfg.dropout_p, &root.derive(streams::STAGE1_ADAPTERS))?;
    }
    let mut optimizer = Optimizer::new(cfg.optimizer)?;
    let mut dropout = root.derive(streams::DROPOUT);
    let mut rows = Vec::with_capacity(cfg.v_outer * cfg.t_inner);
    let mut outer_valid = Vec::with_capacity(cfg.v_outer);
    for v in 0..cfg.v_outer {
        let opts = BilevelOptions {
            eta: cfg.eta,
            eta_dam: cfg.eta_dam(),
            inner_steps: cfg.t_inner,
            first_step: v * cfg.t_inner,
        };
        let out = bilevel_step(&mut dam, &mut model, &task.train, &task.valid, &opts, &mut optimizer, Some(&mut dropout))
            .map_err(|e| with_last_losses(e, &rows))?;
        outer_valid.push(out.valid_loss);
        rows.extend(out.inner.iter().enumerate().map(|(t, &(train_loss, valid_loss))| LossRow {
            step: opts.first_step + t,
            train_loss,
            valid_loss,
        }));
    }
    Ok(Stage1Output {
        dam,
        model,
        rows,
        outer_valid,
    })
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    /// The DAM with its binary selection.
    pub dam: DamState,
    pub model: Model,
    /// Gates the fine-tuned model is evaluated under.
    pub gates: Matrix,
    pub rows: Vec<LossRow>,
    pub sharing_used: bool,
    pub final_train_loss: f64,
    pub final_valid_loss: f64,
}

/// Resolves the sharing switch against the relaxed weights.
pub fn sharing_enabled(cfg: &RunConfig, dam: &DamState) -> bool {
    match (cfg.architecture, cfg.sharing) {
        (Architecture::Theory, _) | (_, Sharing::Off) => false,
        (_, Sharing::On) => true,
        (_, Sharing::Auto) => auto_sharing(dam.gamma_bar()),
    }
}

/// Discretizes `dam` (unless it already carries a selection), installs
/// adapters on the selection and fine-tunes them for `t_finetune` steps.
/// `warm` supplies stage-1 adapters when `warm_start` is set.
pub fn run_stage2(cfg: &RunConfig, dam: &DamState, warm: Option<&Model>, task: &Task) -> Result<Stage2Output> {
    let root = SeededRng::new(cfg.seed, 0);
    let dam = if dam.gamma_bin().is_some() { dam.clone() } else { discretize(dam) };
    let bin = dam.gamma_bin().expect("discretized").clone();
    let sharing = sharing_enabled(cfg, &dam);
    let adapters = root.derive(streams::STAGE2_ADAPTERS);
    let (mut model, gates) = match &task.base {
        Model::Modular(base) => {
            let source = match (cfg.warm_start, warm) {
                (true, Some(Model::Modular(net))) => net,
                _ => base,
            };
            let spec = AttachSpec {
                rank_own: cfg.r_l,
                rank_shared: cfg.r_s,
                alpha: cfg.alpha,
                dropout: cfg.dropout_p,
                sharing,
                warm_start: cfg.warm_start,
            };
            // Stage-1 training never touches base weights, so `source` and `base` share them.
            let net = attach_sharing(&dam, source, &spec, &adapters)?;
            let (l, n) = dam.shape();
            (Model::Modular(net), Matrix::filled(l, n, 1.0))
        }
        Model::Theory(base) => {
            let mut g = base.clone();
            match (cfg.warm_start, warm) {
                (true, Some(Model::Theory(w))) => g.net_mut().set_w(w.net().w().clone())?,
                _ => {
                    let tm = cfg.theory_model()?;
                    g.net_mut().set_w(gaussian_matrix(tm.d, tm.m, &mut adapters.clone())?)?;
                }
            }
            (Model::Theory(g), bin.clone())
        }
    };

    let first = cfg.v_outer * cfg.t_inner;
    let mut optimizer = Optimizer::new(cfg.optimizer)?;
    let mut dropout = root.derive(streams::DROPOUT).derive(1);
    let mut params = model.params();
    let mut rows = Vec::with_capacity(cfg.t_finetune);
    for t in 0..cfg.t_finetune {
        let step = first + t;
        let ev = model.evaluate(&gates, &task.train.x, &task.train.y, true, Some(&mut dropout))?;
        let grad = ev.param_grad.expect("gradients requested");
        if !ev.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(with_last_losses(
                Error::Divergence {
                    step,
                    detail: format!("training loss {} or its gradient is not finite", ev.loss),
                },
                &rows,
            ));
        }
        let valid_loss = model.loss(&gates, &task.valid.x, &task.valid.y)?;
        rows.push(LossRow {
            step,
            train_loss: ev.loss,
            valid_loss,
        });
        optimizer.step(&mut params, &grad, cfg.eta_finetune())?;
        model.set_params(&params)?;
    }
    let final_train_loss = model.loss(&gates, &task.train.x, &task.train.y)?;
    let final_valid_loss = model.loss(&gates, &task.valid.x, &task.valid.y)?;
    if !final_train_loss.is_finite() {
        return Err(with_last_losses(
            Error::Divergence {
                step: first + cfg.t_finetune,
                detail: format!("final training loss is {final_train_loss}"),
            },
            &rows,
        ));
    }
    Ok(Stage2Output {
        dam,
        model,
        gates,
        rows,
        sharing_used: sharing,
        final_train_loss,
        final_valid_loss,
    })
}

/// Trainable parameters implied by the selection: `k·L` own adapters at rank
/// `r_l` plus, with sharing, six bank adapters at rank `r_s`.
pub fn expected_param_count(cfg: &RunConfig, k: usize, sharing: bool) -> Result<usize> {
    match cfg.architecture {
        Architecture::Modular => {
            let shape = cfg.shape()?;
            let per = |r: usize| 2 * shape.dim * r;
            Ok(k * shape.layers * per(cfg.r_l) + if sharing { Family::COUNT * per(cfg.r_s) } else { 0 })
        }
        Architecture::Theory => {
            let tm = cfg.theory_model()?;
            Ok(tm.d * tm.m)
        }
    }
}

/// Fraction of planted modules that the selection keeps.
pub fn planted_recovery(selection: &Matrix, planted: &Matrix) -> f64 {
    let hits = selection.hadamard(planted).map(|m| m.sum()).unwrap_or(0.0);
    hits / planted.sum()
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn mask_rows(m: &Matrix) -> Vec<Vec<u8>> {
    (0..m.rows()).map(|i| m.row(i).iter().map(|&v| v as u8).collect()).collect()
}

/// Deterministic run summary; wall-clock times are kept out of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub architecture: Architecture,
    pub rho: f64,
    pub k: usize,
    pub total_steps: usize,
    pub sharing_used: bool,
    pub trainable_params: usize,
    pub expected_params: usize,
    pub base_train_loss: f64,
    pub base_valid_loss: f64,
    pub final_train_loss: f64,
    pub final_valid_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planted_recovery: Option<f64>,
    pub row_entropy: Vec<f64>,
    pub outer_valid_loss: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    pub gamma_bar: Vec<Vec<f64>>,
    pub gamma_bin: Vec<Vec<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planted: Option<Vec<Vec<u8>>>,
}

impl RunReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Timings {
    pub prepare: Duration,
    pub stage1: Duration,
    pub stage2: Duration,
}

/// Everything `run_all` produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub task: Task,
    pub stage1: Stage1Output,
    pub stage2: Stage2Output,
    pub report: RunReport,
    pub timings: Timings,
}

impl RunOutcome {
    pub fn rows(&self) -> impl Iterator<Item = &LossRow> {
        self.stage1.rows.iter().chain(&self.stage2.rows)
    }

    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint {
            config: cfg.to_canonical(),
            dam: Some(self.stage2.dam.clone()),
            weights: Some(Weights::of(&self.stage2.model)),
        }
    }
}

/// Stage 1, discretization and stage 2 from one config.
pub fn run_all(cfg: &RunConfig) -> Result<RunOutcome> {
    let t0 = Instant::now();
    let task = prepare_task(cfg)?;
    let t1 = Instant::now();
    let stage1 = run_stage1(cfg, &task)?;
    let t2 = Instant::now();
    let stage2 = run_stage2(cfg, &stage1.dam, Some(&stage1.model), &task)?;
    let t3 = Instant::now();
    let report = build_report(cfg, &task, &stage1, &stage2)?;
    Ok(RunOutcome {
        task,
        stage1,
        stage2,
        report,
        timings: Timings {
            prepare: t1 - t0,
            stage1: t2 - t1,
            stage2: t3 - t2,
        },
    })
}

fn base_gates(cfg: &RunConfig) -> Result<Matrix> {
    let (l, n) = cfg.dam_shape()?;
    Ok(Matrix::filled(l, n, 1.0))
}

pub fn build_report(cfg: &RunConfig, task: &Task, stage1: &Stage1Output, stage2: &Stage2Output) -> Result<RunReport> {
    let gates = base_gates(cfg)?;
    let bin = stage2.dam.gamma_bin().expect("discretized");
    let rows: Vec<&LossRow> = stage1.rows.iter().chain(&stage2.rows).collect();
    Ok(RunReport {
        seed: cfg.seed,
        architecture: cfg.architecture,
        rho: cfg.rho,
        k: stage2.dam.k(),
        total_steps: cfg.total_steps(),
        sharing_used: stage2.sharing_used,
        trainable_params: stage2.model.param_count(),
        expected_params: expected_param_count(cfg, stage2.dam.k(), stage2.sharing_used)?,
        base_train_loss: task.base.loss(&gates, &task.train.x, &task.train.y)?,
        base_valid_loss: task.base.loss(&gates, &task.valid.x, &task.valid.y)?,
        final_train_loss: stage2.final_train_loss,
        final_valid_loss: stage2.final_valid_loss,
        planted_recovery: task.planted.as_ref().map(|p| planted_recovery(bin, p)),
        row_entropy: row_entropy(stage1.dam.gamma_bar()),
        outer_valid_loss: stage1.outer_valid.clone(),
        train_loss: rows.iter().map(|r| r.train_loss).collect(),
        valid_loss: rows.iter().map(|r| r.valid_loss).collect(),
        gamma_bar: matrix_rows(stage1.dam.gamma_bar()),
        gamma_bin: mask_rows(bin),
        planted: task.planted.as_ref().map(mask_rows),
    })
}

/// `step,train_loss,valid_loss` with one row per parameter update.
pub fn loss_csv<'a>(rows: impl IntoIterator<Item = &'a LossRow>) -> String {
    let mut out = String::from("step,train_loss,valid_loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.step,
            crate::data::format_f64(r.train_loss),
            crate::data::format_f64(r.valid_loss)
        ));
    }
    out
}

/// DAM matrix as CSV text.
pub fn dam_csv(m: &Matrix, integer: bool) -> String {
    let mut buf = Vec::new();
    write_dam_csv(m, integer, &mut buf).expect("in-memory write");
    String::from_utf8(buf).expect("ASCII")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Learned selection.
    Diffora,
    /// `k` uniformly random modules per layer.
    Random,
    /// Every module gets its own adapter.
    All,
    /// No adapters: the frozen base.
    None,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Diffora => "diffora",
            Strategy::Random => "random",
            Strategy::All => "all",
            Strategy::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "diffora" => Ok(Strategy::Diffora),
            "random" => Ok(Strategy::Random),
            "all" => Ok(Strategy::All),
            "none" => Ok(Strategy::None),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// One strategy on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub seed: u64,
    pub k: usize,
    pub final_train_loss: f64,
    pub final_valid_loss: f64,
    pub recovery: Option<f64>,
    pub params: usize,
}

/// Random selection with `k` ones per row.
pub fn random_selection(cfg: &RunConfig) -> Result<DamState> {
    let (l, n) = cfg.dam_shape()?;
    let mut dam = init_dam(l, n, cfg.rho)?;
    let mut rng = SeededRng::new(cfg.seed, 0).derive(streams::RANDOM_SELECTION);
    let mut bin = Matrix::zeros(l, n);
    for i in 0..l {
        for &j in rng.permutation(n).iter().take(dam.k()) {
            bin[(i, j)] = 1.0;
        }
    }
    dam.set_gamma_bin(bin)?;
    Ok(dam)
}

/// Runs one strategy for the seed in `cfg`.
pub fn run_strategy(cfg: &RunConfig, task: &Task, strategy: Strategy) -> Result<StrategyRun> {
    let recovery = |sel: &Matrix| task.planted.as_ref().map(|p| planted_recovery(sel, p));
    let (l, n) = cfg.dam_shape()?;
    let out = match strategy {
        Strategy::None => {
            let gates = Matrix::filled(l, n, 1.0);
            return Ok(StrategyRun {
                strategy,
                seed: cfg.seed,
                k: 0,
                final_train_loss: task.base.loss(&gates, &task.train.x, &task.train.y)?,
                final_valid_loss: task.base.loss(&gates, &task.valid.x, &task.valid.y)?,
                recovery: recovery(&Matrix::zeros(l, n)),
                params: 0,
            });
        }
        Strategy::Diffora => {
            let s1 = run_stage1(cfg, task)?;
            run_stage2(cfg, &s1.dam, Some(&s1.model), task)?
        }
        Strategy::Random => run_stage2(cfg, &random_selection(cfg)?, None, task)?,
        Strategy::All => {
            let mut all = init_dam(l, n, 1.0)?;
            all.set_gamma_bin(Matrix::filled(l, n, 1.0))?;
            run_stage2(cfg, &all, None, task)?
        }
    };
    let bin = out.dam.gamma_bin().expect("discretized");
    Ok(StrategyRun {
        strategy,
        seed: cfg.seed,
        k: out.dam.k(),
        final_train_loss: out.final_train_loss,
        final_valid_loss: out.final_valid_loss,
        recovery: recovery(bin),
        params: out.model.param_count(),
    })
}

/// Aggregate over seeds for one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub strategy: Strategy,
    pub rho: f64,
    pub k: usize,
    pub seeds: usize,
    pub mean_loss: f64,
    pub sd_loss: f64,
    pub mean_valid_loss: f64,
    pub recovery: Option<f64>,
    pub params: usize,
    pub runs: Vec<StrategyRun>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Runs each strategy on every seed. `diffora` and `random` must use the same
/// number of trainable parameters on every seed.
pub fn compare(cfg: &RunConfig, strategies: &[Strategy], seeds: &[u64]) -> Result<Vec<CompareRow>> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(Error::Config("compare needs at least one strategy and one seed".into()));
    }
    let mut runs: Vec<Vec<StrategyRun>> = vec![Vec::new(); strategies.len()];
    for &seed in seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        let task = prepare_task(&c)?;
        for (i, &s) in strategies.iter().enumerate() {
            runs[i].push(run_strategy(&c, &task, s)?);
        }
        let budget_of = |s: Strategy| strategies.iter().position(|&x| x == s).map(|i| runs[i].last().expect("ran").params);
        if let (Some(a), Some(b)) = (budget_of(Strategy::Diffora), budget_of(Strategy::Random)) {
            if a != b {
                return Err(Error::Config(format!(
                    "seed {seed}: diffora trains {a} parameters but random trains {b}"
                )));
            }
        }
    }
    Ok(strategies
        .iter()
        .zip(runs)
        .map(|(&strategy, runs)| {
            let losses: Vec<f64> = runs.iter().map(|r| r.final_train_loss).collect();
            let valid: Vec<f64> = runs.iter().map(|r| r.final_valid_loss).collect();
            let (mean_loss, sd_loss) = mean_sd(&losses);
            let recs: Option<Vec<f64>> = runs.iter().map(|r| r.recovery).collect();
            CompareRow {
                strategy,
                rho: cfg.rho,
                k: runs[0].k,
                seeds: runs.len(),
                mean_loss,
                sd_loss,
                mean_valid_loss: mean_sd(&valid).0,
                recovery: recs.map(|r| mean_sd(&r).0),
                params: runs[0].params,
                runs,
            }
        })
        .collect())
}
