//! Minimizing `L_total = L_CE + L_reg` with AdamW under a cosine schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{relative_error, GradCheckReport, Tape};
use crate::data::Sample;
use crate::energy_mask::{EnergyDiagnostics, Mode};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams, ParamGroup, ParamVars, Variant};
use crate::tensor::{self, Tensor};

/// Number of bins in the keep-probability histogram.
pub const MASK_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Parameter groups excluded from optimization.
    pub frozen: Vec<ParamGroup>,
    /// Evaluate on the test split every this many epochs (and after the last).
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 3e-3,
            min_lr: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            frozen: Vec::new(),
            eval_interval: 1,
        }
    }
}

impl TrainConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.eval_interval == 0 {
            return bad("eval interval must be at least 1");
        }
        if !(self.lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad("learning rates must satisfy 0 <= min_lr <= lr");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("AdamW moments need betas in [0, 1) and a positive epsilon");
        }
        Ok(())
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen.contains(&group)
    }
}

/// The two halves of the objective and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub reg: f64,
    pub total: f64,
}

/// Cross-entropy of `logits` against `label` plus the expected-energy
/// regularizer of `diagnostics` (zero when the mask is bypassed).
pub fn total_loss(logits: &Tensor, label: usize, diagnostics: Option<&EnergyDiagnostics>) -> Result<LossParts> {
    let (ce, _) = tensor::cross_entropy_logits(logits, label)?;
    let reg = diagnostics.map_or(0.0, EnergyDiagnostics::reg_loss);
    Ok(LossParts { ce, reg, total: ce + reg })
}

/// Mean of per-sample [`total_loss`] over a batch.
pub fn batch_total_loss(batch: &[(Tensor, usize, Option<EnergyDiagnostics>)]) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut acc = LossParts { ce: 0.0, reg: 0.0, total: 0.0 };
    for (logits, label, diag) in batch {
        let p = total_loss(logits, *label, diag.as_ref())?;
        acc.ce += p.ce;
        acc.reg += p.reg;
        acc.total += p.total;
    }
    let n = batch.len() as f64;
    Ok(LossParts { ce: acc.ce / n, reg: acc.reg / n, total: acc.total / n })
}

/// `min + ½(peak − min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, peak: f64, min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} beyond schedule of {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(peak);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(min + 0.5 * (peak - min) * (1.0 + libm::cos(core::f64::consts::PI * progress)))
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &mut ModelParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        let lens: Vec<usize> = params.slots_mut().iter().map(|s| s.values.len()).collect();
        AdamW {
            beta1,
            beta2,
            eps,
            step: 0,
            first: lens.iter().map(|&n| vec![0.0; n]).collect(),
            second: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads` is in canonical parameter order. Frozen groups
    /// are skipped entirely: neither their values nor their moments change.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[Vec<f64>],
        lr: f64,
        weight_decay: f64,
        frozen: impl Fn(ParamGroup) -> bool,
    ) -> Result<()> {
        let mut slots = params.slots_mut();
        if grads.len() != slots.len() {
            return Err(Error::InvalidArgument(format!("{} gradients for {} parameters", grads.len(), slots.len())));
        }
        for (slot, g) in slots.iter().zip(grads) {
            if slot.values.len() != g.len() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    detail: format!("{}: gradient has {} values, parameter {}", slot.name, g.len(), slot.values.len()),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for (i, slot) in slots.iter_mut().enumerate() {
            if frozen(slot.group) {
                continue;
            }
            let decay = if slot.decay { lr * weight_decay } else { 0.0 };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (k, p) in slot.values.iter_mut().enumerate() {
                let gk = grads[i][k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *p -= decay * *p;
                *p -= lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

/// One row of the training log. Epoch 0 describes the initial parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lce: f64,
    pub lreg: f64,
    pub ltotal: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Mean keep probability over all test tokens (1 for the bypass baseline).
    pub mean_mask: f64,
    /// Fraction of test tokens per keep-probability decile.
    pub mask_hist: [f64; MASK_BINS],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: ModelParams,
    /// Parameters at the epoch with the highest test accuracy.
    pub best_params: ModelParams,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn peak_test_acc(&self) -> f64 {
        self.metrics.iter().find(|m| m.epoch == self.best_epoch).map_or(0.0, |m| m.test_acc)
    }

    pub fn final_metrics(&self) -> &EpochMetrics {
        self.metrics.last().expect("training logs at least one epoch")
    }
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn mask_histogram(values: impl Iterator<Item = f64>) -> (f64, [f64; MASK_BINS], usize) {
    let mut hist = [0.0; MASK_BINS];
    let (mut sum, mut n) = (0.0, 0usize);
    for m in values {
        let bin = ((m * MASK_BINS as f64) as usize).min(MASK_BINS - 1);
        hist[bin] += 1.0;
        sum += m;
        n += 1;
    }
    if n > 0 {
        hist.iter_mut().for_each(|h| *h /= n as f64);
    }
    (if n > 0 { sum / n as f64 } else { 0.0 }, hist, n)
}

/// Model inputs as seen by the trainable part of the network: raw images,
/// or cached feature maps when the backbone is frozen.
struct Inputs {
    tensors: Vec<Tensor>,
    labels: Vec<usize>,
    from_features: bool,
}

impl Inputs {
    fn prepare(config: &ModelConfig, params: &ModelParams, samples: &[Sample], cache: bool) -> Result<Self> {
        let tensors = if cache {
            samples.iter().map(|s| model::backbone_forward(config, params, &s.image)).collect::<Result<Vec<_>>>()?
        } else {
            samples.iter().map(|s| s.image.clone()).collect()
        };
        Ok(Inputs { tensors, labels: samples.iter().map(|s| s.label).collect(), from_features: cache })
    }

    fn len(&self) -> usize {
        self.labels.len()
    }
}

struct SamplePass {
    loss: LossParts,
    correct: bool,
    grads: Option<Vec<Vec<f64>>>,
}

fn sample_pass(
    config: &ModelConfig,
    params: &ModelParams,
    frozen: &dyn Fn(ParamGroup) -> bool,
    input: &Tensor,
    from_features: bool,
    label: usize,
    with_grads: bool,
) -> Result<SamplePass> {
    let mut tape = Tape::new();
    let vars = if with_grads {
        ParamVars::bind(&mut tape, params, frozen)
    } else {
        ParamVars::bind(&mut tape, params, |_| true)
    };
    let x = tape.constant(input.clone());
    let features = if from_features { x } else { model::record_backbone(&mut tape, config, &vars, x)? };
    let rec = model::record_head(&mut tape, config, params, &vars, features, Mode::Train)?;
    let ce = tape.cross_entropy_logits(rec.logits, label)?;
    let total = match rec.reg {
        Some(r) => tape.add(ce, r)?,
        None => ce,
    };
    let loss = LossParts {
        ce: tape.value(ce).item()?,
        reg: match rec.reg {
            Some(r) => tape.value(r).item()?,
            None => 0.0,
        },
        total: tape.value(total).item()?,
    };
    let correct = argmax(tape.value(rec.logits).data()) == label;
    let grads = if with_grads {
        tape.backward(total)?;
        Some(vars.gradients(&tape))
    } else {
        None
    };
    Ok(SamplePass { loss, correct, grads })
}

/// Loss of one image and the gradient of its total loss with respect to
/// every parameter, in canonical order (zeros for frozen groups).
pub fn sample_gradients(
    config: &ModelConfig,
    params: &ModelParams,
    x: &Tensor,
    label: usize,
    frozen: impl Fn(ParamGroup) -> bool,
) -> Result<(LossParts, Vec<Vec<f64>>)> {
    let pass = sample_pass(config, params, &frozen, x, false, label, true)?;
    Ok((pass.loss, pass.grads.expect("gradients requested")))
}

/// Compares [`sample_gradients`] with central differences of the pure
/// forward loss, one report entry per parameter tensor.
pub fn check_model_gradients(
    config: &ModelConfig,
    params: &ModelParams,
    x: &Tensor,
    label: usize,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = sample_gradients(config, params, x, label, |_| false)?;
    let loss = |p: &ModelParams| -> Result<f64> {
        let (logits, diag) = model::predict(config, p, x, Mode::Train)?;
        Ok(total_loss(&logits, label, diag.as_ref())?.total)
    };
    let mut work = params.clone();
    let count = analytic.len();
    let mut max_rel_error = Vec::with_capacity(count);
    for (i, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (k, &g) in grad.iter().enumerate() {
            let orig = work.slots_mut()[i].values[k];
            work.slots_mut()[i].values[k] = orig + h;
            let up = loss(&work)?;
            work.slots_mut()[i].values[k] = orig - h;
            let down = loss(&work)?;
            work.slots_mut()[i].values[k] = orig;
            worst = worst.max(relative_error(g, (up - down) / (2.0 * h)));
        }
        max_rel_error.push(worst);
    }
    Ok(GradCheckReport { max_rel_error, tolerance: tol })
}

struct TestEval {
    acc: f64,
    mean_mask: f64,
    hist: [f64; MASK_BINS],
}

fn evaluate_inputs(config: &ModelConfig, params: &ModelParams, inputs: &Inputs) -> Result<TestEval> {
    let mut correct = 0usize;
    let mut masks = Vec::new();
    for (x, &label) in inputs.tensors.iter().zip(&inputs.labels) {
        let (logits, diag) = if inputs.from_features {
            model::predict_from_features(config, params, x, Mode::Infer)?
        } else {
            model::predict(config, params, x, Mode::Infer)?
        };
        if argmax(logits.data()) == label {
            correct += 1;
        }
        if let Some(d) = diag {
            masks.extend_from_slice(&d.m);
        }
    }
    let acc = if inputs.len() > 0 { correct as f64 / inputs.len() as f64 } else { 0.0 };
    let (mean_mask, hist) = if config.variant == Variant::Baseline {
        let mut h = [0.0; MASK_BINS];
        h[MASK_BINS - 1] = 1.0;
        (1.0, h)
    } else {
        let (mean, h, _) = mask_histogram(masks.into_iter());
        (mean, h)
    };
    Ok(TestEval { acc, mean_mask, hist })
}

fn diverged(epoch: usize, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged { epoch, step },
        other => other,
    }
}

/// Trains from `init` and logs one [`EpochMetrics`] per epoch, plus an
/// epoch-0 row for the initial parameters.
pub fn train(
    config: &ModelConfig,
    init: ModelParams,
    train_set: &[Sample],
    test_set: &[Sample],
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(config, init, train_set, test_set, tc, |_| {})
}

/// [`train`] with a callback invoked after every logged epoch.
pub fn train_with(
    config: &ModelConfig,
    init: ModelParams,
    train_set: &[Sample],
    test_set: &[Sample],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    tc.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if let Some(s) = train_set.iter().chain(test_set).find(|s| s.label >= config.classes) {
        return Err(Error::InvalidArgument(format!("label {} out of range for {} classes", s.label, config.classes)));
    }
    let frozen = |g: ParamGroup| tc.is_frozen(g);
    let mut params = init;
    // The energy weights come from the configuration, whatever the initial parameters carried.
    (params.mask.lambda_unary, params.mask.lambda_pair) = config.effective_lambdas();
    // A frozen backbone is a fixed function of the input, so its output can be computed once.
    let cache = tc.is_frozen(ParamGroup::Backbone);
    let train_in = Inputs::prepare(config, &params, train_set, cache)?;
    let test_in = Inputs::prepare(config, &params, test_set, cache)?;

    let batches_per_epoch = train_in.len().div_ceil(tc.batch_size);
    let total_steps = tc.epochs * batches_per_epoch;
    let mut opt = AdamW::new(&mut params, tc.beta1, tc.beta2, tc.adam_eps);
    let mut metrics = Vec::with_capacity(tc.epochs + 1);

    // Epoch 0: forward-only pass over the training set.
    let mut sums = LossParts { ce: 0.0, reg: 0.0, total: 0.0 };
    let mut correct = 0usize;
    for (x, &label) in train_in.tensors.iter().zip(&train_in.labels) {
        let pass =
            sample_pass(config, &params, &frozen, x, train_in.from_features, label, false).map_err(diverged(0, 0))?;
        accumulate(&mut sums, &pass.loss);
        correct += usize::from(pass.correct);
    }
    let eval = evaluate_inputs(config, &params, &test_in)?;
    let row = epoch_row(0, &sums, correct, train_in.len(), &eval)?;
    on_epoch(&row);
    metrics.push(row);

    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut best_acc = f64::NEG_INFINITY;
    let mut last_eval = eval;
    let mut order: Vec<usize> = (0..train_in.len()).collect();
    let mut step = 0usize;

    for epoch in 1..=tc.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut sums = LossParts { ce: 0.0, reg: 0.0, total: 0.0 };
        let mut correct = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let mut grad_sum: Option<Vec<Vec<f64>>> = None;
            for &i in batch {
                let pass = sample_pass(
                    config,
                    &params,
                    &frozen,
                    &train_in.tensors[i],
                    train_in.from_features,
                    train_in.labels[i],
                    true,
                )
                .map_err(diverged(epoch, step))?;
                if !pass.loss.total.is_finite() {
                    return Err(Error::Diverged { epoch, step });
                }
                accumulate(&mut sums, &pass.loss);
                correct += usize::from(pass.correct);
                let g = pass.grads.expect("gradients requested");
                match &mut grad_sum {
                    None => grad_sum = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = grad_sum.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            let lr = cosine_lr(step, total_steps, tc.lr, tc.min_lr)?;
            opt.step(&mut params, &grads, lr, tc.weight_decay, frozen)?;
            step += 1;
        }
        if epoch % tc.eval_interval == 0 || epoch == tc.epochs {
            last_eval = evaluate_inputs(config, &params, &test_in)?;
            if last_eval.acc > best_acc {
                best_acc = last_eval.acc;
                best_epoch = epoch;
                best_params = params.clone();
            }
        }
        let row = epoch_row(epoch, &sums, correct, train_in.len(), &last_eval)?;
        on_epoch(&row);
        metrics.push(row);
    }
    Ok(TrainOutcome { final_params: params, best_params, best_epoch, metrics })
}

fn accumulate(acc: &mut LossParts, p: &LossParts) {
    acc.ce += p.ce;
    acc.reg += p.reg;
    acc.total += p.total;
}

fn epoch_row(epoch: usize, sums: &LossParts, correct: usize, n: usize, eval: &TestEval) -> Result<EpochMetrics> {
    let nf = n as f64;
    let row = EpochMetrics {
        epoch,
        lce: sums.ce / nf,
        lreg: sums.reg / nf,
        ltotal: sums.total / nf,
        train_acc: correct as f64 / nf,
        test_acc: eval.acc,
        mean_mask: eval.mean_mask,
        mask_hist: eval.hist,
    };
    if !row.ltotal.is_finite() {
        return Err(Error::Diverged { epoch, step: 0 });
    }
    Ok(row)
}

/// Summary of one grid-search cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub peak_test_acc: f64,
    /// Mean keep probability after the final epoch.
    pub mean_mask: f64,
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub lambda_unary: f64,
    pub lambda_pair: f64,
    pub outcome: Result<CellSummary>,
}

#[derive(Debug, Clone)]
pub struct GridReport {
    /// Row-major over (λ_unary, λ_pair).
    pub cells: Vec<GridCell>,
    pub best: Option<usize>,
}

/// Accuracy gap (absolute fraction) within which the sparser cell wins.
pub const GRID_TIE_TOLERANCE: f64 = 1e-3;

/// Trains one model per `(λ_unary, λ_pair)` pair. Every cell starts from
/// `init` with only the energy weights changed. A failing cell is recorded
/// and the search continues.
pub fn grid_search(
    base: &ModelConfig,
    unary_grid: &[f64],
    pair_grid: &[f64],
    train_set: &[Sample],
    test_set: &[Sample],
    tc: &TrainConfig,
    init: &ModelParams,
) -> Result<GridReport> {
    grid_search_with(base, unary_grid, pair_grid, train_set, test_set, tc, init, |_| {})
}

#[allow(clippy::too_many_arguments)]
pub fn grid_search_with(
    base: &ModelConfig,
    unary_grid: &[f64],
    pair_grid: &[f64],
    train_set: &[Sample],
    test_set: &[Sample],
    tc: &TrainConfig,
    init: &ModelParams,
    mut on_cell: impl FnMut(&GridCell),
) -> Result<GridReport> {
    if unary_grid.is_empty() || pair_grid.is_empty() {
        return Err(Error::InvalidArgument("λ grid is empty".into()));
    }
    let mut cells = Vec::with_capacity(unary_grid.len() * pair_grid.len());
    for &lu in unary_grid {
        for &lp in pair_grid {
            let cfg = ModelConfig { lambda_unary: lu, lambda_pair: lp, ..base.clone() };
            let outcome = train(&cfg, init.clone(), train_set, test_set, tc)
                .map(|o| CellSummary { peak_test_acc: o.peak_test_acc(), mean_mask: o.final_metrics().mean_mask });
            let cell = GridCell { lambda_unary: lu, lambda_pair: lp, outcome };
            on_cell(&cell);
            cells.push(cell);
        }
    }
    let best = best_cell(&cells);
    Ok(GridReport { cells, best })
}

/// Highest accuracy; among cells within [`GRID_TIE_TOLERANCE`] of it, the
/// lowest mean mask (first cell on exact ties).
pub fn best_cell(cells: &[GridCell]) -> Option<usize> {
    let ok = || cells.iter().enumerate().filter_map(|(i, c)| c.outcome.as_ref().ok().map(|s| (i, s)));
    let top = ok().map(|(_, s)| s.peak_test_acc).fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in ok().filter(|(_, s)| s.peak_test_acc >= top - GRID_TIE_TOLERANCE) {
        if best.is_none_or(|(_, m)| s.mean_mask < m) {
            best = Some((i, s.mean_mask));
        }
    }
    best.map(|(i, _)| i)
}
