//! The pruning training loop: loss assembly, prune-phase steps with
//! per-iteration target checks, the one-time surgery, and compact training.

use ndarray::{Array4, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::builder::{apply_uniform_plan, arch_spec, build_sbcnet, uniform_prune_plan};
use crate::error::{LappError, Result};
use crate::flops::{self, FlopsAccount};
use crate::harness::{evaluate, lr_at, Dataset, EpochRecord, MetricsSink, Normalization, RunConfig};
use crate::network::Network;
use crate::nn::softmax_cross_entropy;
use crate::optim::Sgd;
use crate::surgery::{self, kept_indices};
use crate::Scalar;

/// Slack on the attainment test, absorbing rounding in `T_kept / T_total`.
pub const TARGET_SLACK: f64 = 1e-9;

/// Stream offset separating the data-order generator from weight initialization.
const DATA_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prune,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRunState {
    pub phase: Phase,
    /// Index of the next epoch to run.
    pub epoch: usize,
    /// Mini-batches consumed so far.
    pub iteration: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub c_target: f64,
    pub account: FlopsAccount,
    /// Kept filter indices per module, set once at surgery.
    pub kept_index_lists: Option<Vec<Vec<usize>>>,
    pub prune_epoch_cap: usize,
    pub surgery_epoch: Option<usize>,
    pub surgery_iteration: Option<u64>,
    /// Smallest compression rate seen during the prune phase.
    pub best_c_hat: f64,
    /// `(iteration, Ĉ)`: every prune iteration, then once per epoch.
    pub c_hat_trajectory: Vec<(u64, f64)>,
}

impl PruneRunState {
    pub fn new(account: FlopsAccount, lambda1: f64, lambda2: f64, prune_epoch_cap: usize) -> Self {
        PruneRunState {
            phase: Phase::Prune,
            epoch: 0,
            iteration: 0,
            lambda1,
            lambda2,
            c_target: account.c_target,
            account,
            kept_index_lists: None,
            prune_epoch_cap,
            surgery_epoch: None,
            surgery_iteration: None,
            best_c_hat: account.c_hat,
            c_hat_trajectory: Vec::new(),
        }
    }
}

/// The three terms of the prune-phase objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    /// `Σ_l Σ_i ‖W_S^l[i]‖₁`, before scaling by λ1.
    pub l1_norm: f64,
    /// `R(Ĉ, C)`, before scaling by λ2.
    pub flops_penalty: f64,
    pub c_hat: f64,
    pub total: f64,
}

pub fn check_target(c_hat: f64, c_target: f64) -> bool {
    c_hat <= c_target + TARGET_SLACK
}

/// Adds `λ1 · sign(W_S)` to every sparse-path weight gradient and returns `Σ|W_S|`.
pub fn add_l1_grads<T: Scalar>(net: &mut Network<T>, lambda1: f64) -> f64 {
    let l1 = T::lit(lambda1);
    let mut total = 0.0;
    for m in net.sbc_modules_mut() {
        let w = &mut m.sparse.conv.weight;
        total += w.value.iter().map(|v| v.abs().as_f64()).sum::<f64>();
        if lambda1 != 0.0 {
            Zip::from(&mut w.grad).and(&w.value).for_each(|g, &v| {
                if v != T::zero() {
                    *g += l1 * v.signum();
                }
            });
        }
    }
    total
}

/// `∂(λ2·R)/∂δ^l` per SBC module through the straight-through estimator:
/// `λ2 · R'(Ĉ) · (filter FLOPs / T_total) · Σ_i −G_i(1−G_i)`.
pub fn flops_threshold_grads<T: Scalar>(net: &Network<T>, lambda2: f64, account: &FlopsAccount) -> Result<Vec<f64>> {
    let dr = flops::flops_regularizer_grad(account.c_hat, account.c_target)?;
    let t_total = account.t_total as f64;
    let mut grads = Vec::new();
    for (i, unit) in net.prunable_units() {
        let Some(m) = unit.as_sbc() else { continue };
        let per_filter = flops::filter_flops(&net.arch.layers[i])? as f64 / t_total;
        let slope: f64 = m.mask.soft_mask.iter().map(|g| -(g.as_f64() * (1.0 - g.as_f64()))).sum();
        grads.push(lambda2 * dr * per_filter * slope);
    }
    Ok(grads)
}

/// Accumulates gradients of
/// `CE + λ1·Σ‖W_S‖₁ + λ2·R(Ĉ, C)` using the masks currently stored in the
/// modules. Weight decay is left to the optimizer. Gradients are not cleared first.
pub fn total_loss<T: Scalar>(
    net: &mut Network<T>,
    x: &Array4<T>,
    labels: &[usize],
    lambda1: f64,
    lambda2: f64,
    c_target: f64,
) -> Result<LossBreakdown> {
    let logits = net.forward(x, true)?;
    let (ce, dlogits) = softmax_cross_entropy(&logits, labels)?;
    net.backward(&dlogits);
    let l1_norm = add_l1_grads(net, lambda1);
    let account = FlopsAccount::new(net.baseline_flops()?, net.masked_flops()?, c_target)?;
    let penalty = flops::flops_regularizer(account.c_hat, c_target)?;
    if lambda2 != 0.0 {
        let grads = flops_threshold_grads(net, lambda2, &account)?;
        for (m, g) in net.sbc_modules_mut().zip(grads) {
            m.add_threshold_grad(T::lit(g));
        }
    }
    let ce = ce.as_f64();
    Ok(LossBreakdown {
        cross_entropy: ce,
        l1_norm,
        flops_penalty: penalty,
        c_hat: account.c_hat,
        total: ce + lambda1 * l1_norm + lambda2 * penalty,
    })
}

pub enum PruneOutcome<T> {
    /// Target not met; one optimizer update was applied.
    Updated(LossBreakdown),
    /// Target met: no update, the network is now compact. Carries the masked
    /// network as it was at the moment of surgery.
    Surgery { masked: Box<Network<T>> },
}

/// Refreshes the masks, measures `Ĉ`, then either performs surgery (target
/// met) or one optimizer update of sparse weights, bypass weights and thresholds.
pub fn prune_step<T: Scalar>(
    state: &mut PruneRunState,
    net: &mut Network<T>,
    sgd: &Sgd,
    x: &Array4<T>,
    labels: &[usize],
) -> Result<PruneOutcome<T>> {
    if state.phase != Phase::Prune {
        return Err(LappError::Usage("prune step outside the prune phase".into()));
    }
    net.refresh_masks()?;
    state.account.update(net.masked_flops()?);
    let c_hat = state.account.c_hat;
    state.best_c_hat = state.best_c_hat.min(c_hat);
    state.c_hat_trajectory.push((state.iteration, c_hat));
    if check_target(c_hat, state.c_target) {
        let masked = net.clone();
        state.kept_index_lists = Some(net.sbc_modules().map(|m| kept_indices(&m.mask.hard_bits())).collect());
        *net = surgery::convert(net)?;
        state.phase = Phase::Train;
        state.surgery_epoch = Some(state.epoch);
        state.surgery_iteration = Some(state.iteration);
        state.iteration += 1;
        return Ok(PruneOutcome::Surgery { masked: Box::new(masked) });
    }
    net.zero_grad();
    let loss = total_loss(net, x, labels, state.lambda1, state.lambda2, state.c_target)?;
    if !loss.total.is_finite() {
        return Err(LappError::NonFiniteLoss { iteration: state.iteration, value: loss.total });
    }
    sgd.step(net);
    state.iteration += 1;
    Ok(PruneOutcome::Updated(loss))
}

/// One update of the compact network on cross-entropy alone.
pub fn train_step<T: Scalar>(
    state: &mut PruneRunState,
    net: &mut Network<T>,
    sgd: &Sgd,
    x: &Array4<T>,
    labels: &[usize],
) -> Result<f64> {
    if state.phase != Phase::Train || net.has_sbc() {
        return Err(LappError::Usage("train step requires a compact network after surgery".into()));
    }
    net.zero_grad();
    let logits = net.forward(x, true)?;
    let (ce, dlogits) = softmax_cross_entropy(&logits, labels)?;
    let ce = ce.as_f64();
    if !ce.is_finite() {
        return Err(LappError::NonFiniteLoss { iteration: state.iteration, value: ce });
    }
    net.backward(&dlogits);
    sgd.step(net);
    state.iteration += 1;
    Ok(ce)
}

/// Serializable position of the data-order generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position, kept as a decimal string since it is 128 bits wide.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| LappError::Checkpoint(format!("bad generator position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Network pair captured at the surgery step.
#[derive(Clone, Debug)]
pub struct SurgeryPair<T> {
    pub masked: Network<T>,
    pub compact: Network<T>,
}

/// Whole run state: configuration, live network, controller state, data
/// generator and history.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: RunConfig,
    pub norm: Normalization,
    pub net: Network<T>,
    pub state: PruneRunState,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
    /// Set during the epoch in which surgery happened (or at start in uniform mode).
    pub surgery_pair: Option<SurgeryPair<T>>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh SBC network. In uniform mode the shared-rate plan is applied and
    /// the network compacted before the first epoch.
    pub fn new(config: RunConfig, norm: Normalization) -> Result<Self> {
        config.validate()?;
        let arch = arch_spec(config.arch);
        let mut net = build_sbcnet::<T>(&arch, config.c_target, config.bypass, config.seed)?;
        let floor = flops::masked_network_flops(&arch.layers, &vec![0; net.bypass_specs().len()], &net.bypass_specs())?;
        let floor = flops::compression_rate(floor, net.baseline_flops()?)?;
        if floor > config.c_target {
            return Err(LappError::Infeasible(format!(
                "{} with {} bypasses cannot go below compression rate {floor:.4}, above target {}",
                config.arch, config.bypass, config.c_target
            )));
        }
        let account = FlopsAccount::new(net.baseline_flops()?, net.masked_flops()?, config.c_target)?;
        let mut state = PruneRunState::new(account, config.lambda1, config.lambda2, config.prune_epoch_cap);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM);
        let mut surgery_pair = None;
        if config.uniform {
            let plan = uniform_prune_plan(&arch.layers, &net.bypass_specs(), config.c_target)?;
            apply_uniform_plan(&mut net, &plan)?;
            state.account.update(net.masked_flops()?);
            state.best_c_hat = state.account.c_hat;
            state.c_hat_trajectory.push((0, state.account.c_hat));
            state.kept_index_lists = Some(net.sbc_modules().map(|m| kept_indices(&m.mask.hard_bits())).collect());
            let compact = surgery::convert(&net)?;
            surgery_pair = Some(SurgeryPair { masked: net, compact: compact.clone() });
            net = compact;
            state.phase = Phase::Train;
            state.surgery_epoch = Some(0);
            state.surgery_iteration = Some(0);
        }
        Ok(Trainer { config, norm, net, state, rng, history: Vec::new(), surgery_pair })
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.config.total_epochs
    }

    /// Runs one epoch and evaluates on `test`.
    pub fn run_epoch(&mut self, train: &Dataset, test: &Dataset, sink: &mut dyn MetricsSink) -> Result<EpochRecord> {
        let cfg = &self.config;
        if self.state.phase == Phase::Prune && self.state.epoch >= cfg.prune_epoch_cap {
            return Err(LappError::TargetNotAttained {
                target: cfg.c_target,
                best: self.state.best_c_hat,
                epochs: cfg.prune_epoch_cap,
            });
        }
        let lr = lr_at(self.state.epoch, cfg.base_lr, cfg.total_epochs);
        let sgd = Sgd { lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay };
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train.batch::<T>(chunk, &self.norm, Some(&mut self.rng));
            match self.state.phase {
                Phase::Prune => match prune_step(&mut self.state, &mut self.net, &sgd, &x, &labels)? {
                    PruneOutcome::Updated(l) => {
                        sink.c_hat(self.state.iteration - 1, l.c_hat)?;
                        loss_sum += l.total;
                        steps += 1;
                    }
                    PruneOutcome::Surgery { masked } => {
                        sink.c_hat(self.state.iteration - 1, self.state.account.c_hat)?;
                        self.surgery_pair = Some(SurgeryPair { masked: *masked, compact: self.net.clone() });
                    }
                },
                Phase::Train => {
                    loss_sum += train_step(&mut self.state, &mut self.net, &sgd, &x, &labels)?;
                    steps += 1;
                }
            }
        }
        if self.state.phase == Phase::Train {
            let c_hat = flops::compression_rate(self.net.structural_flops(), self.state.account.t_total)?;
            self.state.account.update(self.net.structural_flops());
            self.state.c_hat_trajectory.push((self.state.iteration, c_hat));
            sink.c_hat(self.state.iteration, c_hat)?;
        }
        let top1 = evaluate(&mut self.net, test, &self.norm, cfg.batch_size.max(64))?;
        let record = EpochRecord {
            epoch: self.state.epoch,
            phase: self.state.phase,
            lr,
            loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
            c_hat: self.state.account.c_hat,
            top1,
        };
        sink.epoch(&record)?;
        self.history.push(record.clone());
        self.state.epoch += 1;
        Ok(record)
    }

    /// Runs the remaining epochs, calling `after_epoch` after each one.
    pub fn run(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        sink: &mut dyn MetricsSink,
        after_epoch: &mut dyn FnMut(&mut Trainer<T>) -> Result<()>,
    ) -> Result<()> {
        while !self.finished() {
            self.run_epoch(train, test, sink)?;
            after_epoch(self)?;
        }
        Ok(())
    }
}
