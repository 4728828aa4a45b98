//! Round-based federated training: client sampling, local teacher/student
//! work, compressed uplink, server aggregation and downlink.
//!
//! Four strategies share one driver:
//!
//! * `FEDKDX`: every client keeps a private teacher and trains it against the
//!   shared student with CE + KD (+ NKD, + CTL); the student gradient is
//!   compressed, averaged over participants and applied on the server.
//! * `FEDKD`: the same pipeline with NKD and CTL forced off.
//! * `FEDAVG`: clients run local SGD on the shared model and upload raw
//!   parameter deltas, averaged weighted by shard size.
//! * `FEDPROX`: `FEDAVG` plus a proximal pull `(μ/2)‖W − W_global‖²`.
//!
//! Batch-norm running statistics of the shared model travel alongside the
//! gradients as raw vectors and are averaged the same way.
//!
//! Client work runs on the ambient rayon pool. Results are aggregated in
//! ascending client id and every client owns an independent RNG stream, so
//! output does not depend on the thread count.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::{
    compress_tensors, decode, decompress, dynamic_threshold, encode, training_progress, CompressionPolicy,
    CompressionStats,
};
use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{softmax_temp, Matrix};
use crate::losses::{combined_loss, cross_entropy, LossConfig, Role};
use crate::metrics::{summarize, EvalBatch, MetricSummary};
use crate::nn::{backward, forward, update_running_stats, Input, Mode, ModelParams, Network, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Strategy {
    FedAvg,
    FedProx,
    FedKd,
    FedKdx,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedAvg => "FEDAVG",
            Strategy::FedProx => "FEDPROX",
            Strategy::FedKd => "FEDKD",
            Strategy::FedKdx => "FEDKDX",
        }
    }

    pub fn is_distillation(self) -> bool {
        matches!(self, Strategy::FedKd | Strategy::FedKdx)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub strategy: Strategy,
    pub seed: u64,
    pub rounds: usize,
    pub join_ratio: f64,
    pub lr_teacher: f64,
    pub lr_student: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub fedprox_mu: f64,
    pub loss: LossConfig,
    pub policy: CompressionPolicy,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::FedKdx,
            seed: 0,
            rounds: 500,
            join_ratio: 0.4,
            lr_teacher: 0.01,
            lr_student: 0.01,
            batch_size: 32,
            local_epochs: 1,
            fedprox_mu: 0.01,
            loss: LossConfig::default(),
            policy: CompressionPolicy::default(),
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.rounds == 0 {
            errs.push("rounds must be at least 1".to_string());
        }
        if !(self.join_ratio > 0.0 && self.join_ratio <= 1.0) {
            errs.push(format!("join_ratio must lie in (0, 1], got {}", self.join_ratio));
        }
        for (name, v) in [("lr_teacher", self.lr_teacher), ("lr_student", self.lr_student)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".into());
        }
        if self.local_epochs == 0 {
            errs.push("local_epochs must be at least 1".into());
        }
        if !(self.fedprox_mu >= 0.0 && self.fedprox_mu.is_finite()) {
            errs.push(format!(
                "fedprox_mu must be finite and non-negative, got {}",
                self.fedprox_mu
            ));
        }
        for r in [self.loss.validate(), self.policy.validate()] {
            if let Err(Error::Config(e)) = r {
                errs.extend(e);
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// The loss actually used: `FEDKD` never runs NKD or CTL.
    pub fn effective_loss(&self) -> LossConfig {
        match self.strategy {
            Strategy::FedKd => self.loss.base(),
            _ => self.loss,
        }
    }
}

/// Independent seed for a named purpose, derived from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// RNG stream of one client; stream 0 is reserved for the server.
pub fn client_rng(seed: u64, client_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(client_id as u64 + 1);
    rng
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Private; never leaves the client.
    pub teacher: Network,
    pub shard: ClientShard,
    rng: ChaCha8Rng,
}

impl ClientState {
    pub fn new(id: usize, teacher: Network, shard: ClientShard, seed: u64) -> Self {
        Self {
            id,
            teacher,
            shard,
            rng: client_rng(seed, id),
        }
    }

    pub fn num_train(&self) -> usize {
        self.shard.train.len()
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub student: Network,
    /// Rounds completed so far.
    pub round: usize,
    rng: ChaCha8Rng,
}

impl ServerState {
    pub fn new(student: Network, seed: u64) -> Self {
        Self {
            student,
            round: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub strategy: Strategy,
    pub participants: Vec<usize>,
    pub eps: f64,
    pub metrics: MetricSummary,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub wall_seconds: f64,
    pub svd_fallbacks: usize,
}

/// A round's record plus the exact byte streams that crossed the wire.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub record: RoundRecord,
    /// `(client id, packet)` in ascending id.
    pub uplinks: Vec<(usize, Vec<u8>)>,
    /// Broadcast to every client.
    pub downlink: Vec<u8>,
}

/// `max(1, round(join_ratio·K))` distinct ids, uniformly without
/// replacement, returned ascending.
pub fn sample_clients(ids: &[usize], join_ratio: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Err(Error::domain("cannot sample from an empty client set"));
    }
    if !(join_ratio > 0.0 && join_ratio <= 1.0) {
        return Err(Error::domain(format!(
            "join_ratio must lie in (0, 1], got {join_ratio}"
        )));
    }
    let m = ((join_ratio * ids.len() as f64).round() as usize).clamp(1, ids.len());
    let mut picked: Vec<usize> = index::sample(rng, ids.len(), m).into_iter().map(|i| ids[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Shuffled minibatches of one epoch. A trailing batch of a single sample is
/// merged into the previous one so every batch has at least two samples
/// when the shard does.
pub fn epoch_batches(indices: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx = indices.to_vec();
    idx.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// What a client hands to its uplink encoder.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    /// Student gradient (distillation strategies) or parameter delta
    /// (averaging strategies).
    pub update: ModelParams,
    /// Shared-model batch-norm running statistics after local work.
    pub buffers: Vec<Tensor>,
    pub num_samples: usize,
    pub num_batches: usize,
}

impl LocalUpdate {
    fn tensors(&self) -> Vec<Tensor> {
        self.update.layers().iter().chain(&self.buffers).cloned().collect()
    }
}

fn sgd_step(params: &mut ModelParams, grad: &ModelParams, lr: f64) -> Result<()> {
    if lr != 0.0 {
        params.axpy(-lr, grad)?;
    }
    Ok(())
}

/// One epoch of mutual distillation. The teacher takes an SGD step per
/// batch; the student is left untouched and its gradient, averaged over
/// batches, is returned.
pub fn client_local_step_fedkdx(
    client: &mut ClientState,
    data: &Dataset,
    student: &Network,
    cfg: &LossConfig,
    batch_size: usize,
    lr_teacher: f64,
) -> Result<LocalUpdate> {
    client.teacher.params.check_layout(&student.params)?;
    if client.shard.train.is_empty() {
        return Err(Error::domain("client has no training samples"));
    }
    let batches = epoch_batches(&client.shard.train, batch_size, &mut client.rng);
    let mut grad_sum = student.params.zeros_like();
    let mut buffers = student.buffers.clone();
    for batch in &batches {
        let (input, labels) = data.batch(batch)?;
        let t_out = forward(&client.teacher.params, &client.teacher.buffers, &input, Mode::Train)?;
        let s_out = forward(&student.params, &buffers, &input, Mode::Train)?;
        let (t, s) = (&t_out.trace, &s_out.trace);
        let lt = combined_loss(
            Role::Teacher,
            &t.logits,
            &s.logits,
            &t.features,
            &s.features,
            &labels,
            cfg,
        )?;
        let ls = combined_loss(
            Role::Student,
            &s.logits,
            &t.logits,
            &s.features,
            &t.features,
            &labels,
            cfg,
        )?;
        let gt = backward(
            &client.teacher.params,
            t,
            Some(&lt.grad_logits),
            lt.grad_features.as_ref(),
        )?;
        let gs = backward(&student.params, s, Some(&ls.grad_logits), ls.grad_features.as_ref())?;
        update_running_stats(&mut client.teacher.buffers, &t_out.batch_stats)?;
        update_running_stats(&mut buffers, &s_out.batch_stats)?;
        sgd_step(&mut client.teacher.params, &gt, lr_teacher)?;
        grad_sum.axpy(1.0, &gs)?;
    }
    grad_sum.scale(1.0 / batches.len() as f64);
    Ok(LocalUpdate {
        update: grad_sum,
        buffers,
        num_samples: client.shard.train.len(),
        num_batches: batches.len(),
    })
}

/// Mean cross-entropy gradient on the logits of a batch.
fn ce_grad(logits: &Matrix, labels: &[usize]) -> Result<Matrix> {
    let inv_b = 1.0 / labels.len() as f64;
    let mut g = Matrix::zeros(logits.rows(), logits.cols());
    for (s, &y) in labels.iter().enumerate() {
        let (_, row) = cross_entropy(logits.row(s), y)?;
        for (dst, v) in g.row_mut(s).iter_mut().zip(row) {
            *dst = v * inv_b;
        }
    }
    Ok(g)
}

/// Local SGD on a copy of the global model; returns `W_local − W_global`.
/// `mu > 0` adds the proximal gradient `μ(W − W_global)`.
pub fn client_local_step_fedavg(
    client: &mut ClientState,
    data: &Dataset,
    global: &Network,
    batch_size: usize,
    lr: f64,
    epochs: usize,
    mu: f64,
) -> Result<LocalUpdate> {
    if client.shard.train.is_empty() {
        return Err(Error::domain("client has no training samples"));
    }
    let mut local = global.clone();
    let mut num_batches = 0;
    for _ in 0..epochs {
        for batch in epoch_batches(&client.shard.train, batch_size, &mut client.rng) {
            let (input, labels) = data.batch(&batch)?;
            let trace = local.forward_train(&input)?;
            let mut grad = backward(&local.params, &trace, Some(&ce_grad(&trace.logits, &labels)?), None)?;
            if mu > 0.0 {
                grad.axpy(mu, &local.params)?;
                grad.axpy(-mu, &global.params)?;
            }
            sgd_step(&mut local.params, &grad, lr)?;
            num_batches += 1;
        }
    }
    let mut delta = local.params;
    delta.axpy(-1.0, &global.params)?;
    Ok(LocalUpdate {
        update: delta,
        buffers: local.buffers,
        num_samples: client.shard.train.len(),
        num_batches,
    })
}

/// FedProx local step.
pub fn strategy_fedprox(
    client: &mut ClientState,
    data: &Dataset,
    global: &Network,
    batch_size: usize,
    lr: f64,
    epochs: usize,
    mu: f64,
) -> Result<LocalUpdate> {
    client_local_step_fedavg(client, data, global, batch_size, lr, epochs, mu)
}

/// FedKD local step: distillation with CE + KD only.
pub fn strategy_fedkd(
    client: &mut ClientState,
    data: &Dataset,
    student: &Network,
    cfg: &LossConfig,
    batch_size: usize,
    lr_teacher: f64,
) -> Result<LocalUpdate> {
    client_local_step_fedkdx(client, data, student, &cfg.base(), batch_size, lr_teacher)
}

/// A decoded, reconstructed client upload.
#[derive(Debug, Clone)]
pub struct ReceivedUpdate {
    pub client_id: usize,
    pub num_samples: usize,
    pub tensors: Vec<Tensor>,
}

fn expected_layout(net: &Network) -> Vec<(String, Vec<usize>)> {
    net.params
        .layers()
        .iter()
        .chain(&net.buffers)
        .map(|t| (t.name.clone(), t.shape.clone()))
        .collect()
}

/// Decodes one uplink against the shared model's layout.
pub fn receive(net: &Network, client_id: usize, num_samples: usize, bytes: &[u8]) -> Result<ReceivedUpdate> {
    let wrap = |e: Error| Error::Client {
        client: client_id,
        source: Box::new(e),
    };
    let pkt = decode(bytes).map_err(wrap)?;
    let tensors = decompress(&pkt, &expected_layout(net)).map_err(wrap)?;
    Ok(ReceivedUpdate {
        client_id,
        num_samples,
        tensors,
    })
}

/// Result of one server step.
#[derive(Debug, Clone)]
pub struct Aggregate {
    /// The aggregated update before downlink compression.
    pub mean: Vec<Tensor>,
    pub downlink: Vec<u8>,
    pub stats: CompressionStats,
}

/// Combines the received updates, re-encodes the result for the downlink and
/// applies the downlink reconstruction to the shared model so that the
/// server and every client hold the same weights.
///
/// Distillation strategies take the unweighted mean over participants and
/// step `W ← W − η_S·mean`; averaging strategies weight by shard size and
/// step `W ← W + mean`. Updates are combined in ascending client id.
pub fn server_aggregate(
    student: &mut Network,
    received: &[ReceivedUpdate],
    strategy: Strategy,
    lr_student: f64,
    eps: f64,
    policy: &CompressionPolicy,
) -> Result<Aggregate> {
    if received.is_empty() {
        return Err(Error::domain("no client updates to aggregate"));
    }
    let mut order: Vec<&ReceivedUpdate> = received.iter().collect();
    order.sort_by_key(|r| r.client_id);
    let total: usize = order.iter().map(|r| r.num_samples).sum();
    let weight = |r: &ReceivedUpdate| match strategy {
        Strategy::FedAvg | Strategy::FedProx if total > 0 => r.num_samples as f64 / total as f64,
        _ => 1.0,
    };
    let mut mean: Vec<Tensor> = order[0]
        .tensors
        .iter()
        .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
        .collect();
    for r in &order {
        let w = weight(r);
        for (acc, t) in mean.iter_mut().zip(&r.tensors) {
            acc.values.axpy(w, &t.values);
        }
    }
    if strategy.is_distillation() {
        let inv_k = 1.0 / order.len() as f64;
        for t in &mut mean {
            t.values.scale(inv_k);
        }
    }

    let n_params = student.params.layers().len();
    let (down_pkt, stats) = if strategy.is_distillation() {
        compress_tensors(&mean, eps, policy)
    } else {
        compress_tensors(&mean, eps, &CompressionPolicy::raw(policy.wire_precision))
    };
    let downlink = encode(&down_pkt);
    let applied = decompress(&decode(&downlink)?, &expected_layout(student))?;
    for (p, g) in student.params.layers_mut().iter_mut().zip(&applied[..n_params]) {
        if strategy.is_distillation() {
            if lr_student != 0.0 {
                p.values.axpy(-lr_student, &g.values);
            }
        } else {
            p.values.axpy(1.0, &g.values);
        }
    }
    for (b, new) in student.buffers.iter_mut().zip(&applied[n_params..]) {
        b.values = new.values.clone();
    }
    Ok(Aggregate { mean, downlink, stats })
}

/// Scores in batches of this many samples during evaluation.
const EVAL_CHUNK: usize = 256;

/// Eval-mode metrics of `net` on the given samples, softmax at `τ = 1`.
pub fn evaluate(net: &Network, data: &Dataset, indices: &[usize]) -> Result<MetricSummary> {
    if indices.is_empty() {
        return Err(Error::domain("no evaluation samples"));
    }
    let c = net.architecture().num_classes();
    let mut scores = Vec::with_capacity(indices.len() * c);
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (input, _): (Input, _) = data.batch(chunk)?;
        let trace = net.forward_eval(&input)?;
        for s in 0..trace.logits.rows() {
            scores.extend(softmax_temp(trace.logits.row(s), 1.0)?);
        }
    }
    let batch = EvalBatch::new(Matrix::new(indices.len(), c, scores)?, data.labels(indices))?;
    Ok(summarize(&batch))
}

/// The whole simulated federation.
#[derive(Debug, Clone)]
pub struct Federation {
    cfg: FederationConfig,
    server: ServerState,
    clients: Vec<ClientState>,
    data: Dataset,
    eval_indices: Vec<usize>,
}

impl Federation {
    /// `teachers[k]` belongs to client `k`. The held-out set is the union of
    /// every client's test shard in client order.
    pub fn new(
        cfg: FederationConfig,
        data: Dataset,
        shards: Vec<ClientShard>,
        student: Network,
        teachers: Vec<Network>,
    ) -> Result<Self> {
        cfg.validate()?;
        if shards.is_empty() || shards.len() != teachers.len() {
            return Err(Error::shape("Federation::new clients", shards.len(), teachers.len()));
        }
        for t in &teachers {
            if t.architecture() != student.architecture() {
                return Err(Error::domain("teacher and student architectures differ"));
            }
        }
        let (ch, len) = student.architecture().input_shape();
        if (ch, len) != (data.channels(), data.length()) {
            return Err(Error::shape(
                "Federation::new input",
                format!("{ch}x{len}"),
                format!("{}x{}", data.channels(), data.length()),
            ));
        }
        if student.architecture().num_classes() != data.num_classes() {
            return Err(Error::shape(
                "Federation::new classes",
                student.architecture().num_classes(),
                data.num_classes(),
            ));
        }
        let eval_indices: Vec<usize> = shards.iter().flat_map(|s| s.test.iter().copied()).collect();
        let clients = shards
            .into_iter()
            .zip(teachers)
            .enumerate()
            .map(|(id, (shard, teacher))| ClientState::new(id, teacher, shard, cfg.seed))
            .collect();
        Ok(Self {
            server: ServerState::new(student, cfg.seed),
            cfg,
            clients,
            data,
            eval_indices,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn student(&self) -> &Network {
        &self.server.student
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn eval_indices(&self) -> &[usize] {
        &self.eval_indices
    }

    pub fn evaluate(&self) -> Result<MetricSummary> {
        evaluate(&self.server.student, &self.data, &self.eval_indices)
    }

    pub fn run_round(&mut self) -> Result<RoundRecord> {
        Ok(self.run_round_detailed()?.record)
    }

    pub fn run_round_detailed(&mut self) -> Result<RoundOutcome> {
        let round = self.server.round + 1;
        self.round_inner(round).map_err(|e| Error::Round {
            round,
            source: Box::new(e),
        })
    }

    fn round_inner(&mut self, round: usize) -> Result<RoundOutcome> {
        let start = Instant::now();
        let cfg = &self.cfg;
        let eps = dynamic_threshold(training_progress(round, cfg.rounds), &cfg.policy)?;
        let ids: Vec<usize> = self.clients.iter().map(|c| c.id).collect();
        let participants = sample_clients(&ids, cfg.join_ratio, &mut self.server.rng)?;

        let student = &self.server.student;
        let data = &self.data;
        let loss = cfg.effective_loss();
        let upload_policy = if cfg.strategy.is_distillation() {
            cfg.policy
        } else {
            CompressionPolicy::raw(cfg.policy.wire_precision)
        };
        let mut uploads: Vec<(usize, usize, Vec<u8>, CompressionStats)> = self
            .clients
            .par_iter_mut()
            .filter(|c| participants.binary_search(&c.id).is_ok())
            .map(|c| {
                let local = match cfg.strategy {
                    Strategy::FedKdx | Strategy::FedKd => {
                        client_local_step_fedkdx(c, data, student, &loss, cfg.batch_size, cfg.lr_teacher)
                    }
                    Strategy::FedAvg => client_local_step_fedavg(
                        c,
                        data,
                        student,
                        cfg.batch_size,
                        cfg.lr_student,
                        cfg.local_epochs,
                        0.0,
                    ),
                    Strategy::FedProx => strategy_fedprox(
                        c,
                        data,
                        student,
                        cfg.batch_size,
                        cfg.lr_student,
                        cfg.local_epochs,
                        cfg.fedprox_mu,
                    ),
                }
                .map_err(|e| Error::Client {
                    client: c.id,
                    source: Box::new(e),
                })?;
                let (pkt, stats) = compress_tensors(&local.tensors(), eps, &upload_policy);
                Ok((c.id, local.num_samples, encode(&pkt), stats))
            })
            .collect::<Result<_>>()?;
        uploads.sort_by_key(|u| u.0);

        let mut stats = CompressionStats::default();
        let mut received = Vec::with_capacity(uploads.len());
        for (id, n, bytes, s) in &uploads {
            stats.merge(*s);
            received.push(receive(student, *id, *n, bytes)?);
        }
        let bytes_up = uploads.iter().map(|u| u.2.len()).sum();

        let agg = server_aggregate(
            &mut self.server.student,
            &received,
            cfg.strategy,
            cfg.lr_student,
            eps,
            &cfg.policy,
        )?;
        stats.merge(agg.stats);
        self.server.round = round;
        // Every client, sampled or not, receives the broadcast.
        let bytes_down = agg.downlink.len() * self.clients.len();
        let metrics = self.evaluate()?;
        let record = RoundRecord {
            round,
            strategy: self.cfg.strategy,
            participants,
            eps,
            metrics,
            bytes_up,
            bytes_down,
            wall_seconds: start.elapsed().as_secs_f64(),
            svd_fallbacks: stats.svd_fallbacks,
        };
        Ok(RoundOutcome {
            record,
            uplinks: uploads.into_iter().map(|(id, _, b, _)| (id, b)).collect(),
            downlink: agg.downlink,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::WirePrecision;
    use crate::data::{make_synthetic, partition, PartitionMode, PartitionSpec};
    use crate::linalg::finite_diff_grad;
    use crate::nn::{build_mlp, build_network};

    fn small_setup(cfg: FederationConfig, clients: usize) -> Federation {
        let data = make_synthetic(3, 6, 40, 3.0, 11).unwrap();
        let spec = PartitionSpec {
            mode: PartitionMode::IidShuffle,
            alpha: 1.0,
            num_clients: clients,
            train_fraction: 0.8,
        };
        let shards = partition(&data, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let student = build_mlp(6, 3, 100).unwrap();
        let teachers = (0..clients).map(|k| build_mlp(6, 3, 200 + k as u64).unwrap()).collect();
        Federation::new(cfg, data, shards, student, teachers).unwrap()
    }

    fn raw_f64() -> CompressionPolicy {
        CompressionPolicy::raw(WirePrecision::F64)
    }

    #[test]
    fn sampling_sizes_and_determinism() {
        let ids: Vec<usize> = (0..30).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_clients(&ids, 0.4, &mut rng).unwrap();
        assert_eq!(s.len(), 12);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_clients(&ids, 1.0, &mut rng).unwrap(), ids);
        assert_eq!(sample_clients(&ids, 0.01, &mut rng).unwrap().len(), 1);
        let a = sample_clients(&ids, 0.4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_clients(&ids, 0.4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(sample_clients(&[], 0.5, &mut rng).is_err());
        assert!(sample_clients(&ids, 0.0, &mut rng).is_err());
    }

    #[test]
    fn batches_merge_singleton_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx: Vec<usize> = (0..65).collect();
        let b = epoch_batches(&idx, 32, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 33]);
        let b = epoch_batches(&idx[..5], 32, &mut rng);
        assert_eq!(b.len(), 1);
        let b = epoch_batches(&idx[..1], 32, &mut rng);
        assert_eq!(b, vec![vec![0]]);
    }

    fn one_client(teacher: Network, train: Vec<usize>) -> ClientState {
        ClientState::new(0, teacher, ClientShard { train, test: vec![] }, 5)
    }

    #[test]
    fn zero_teacher_lr_leaves_teacher_bitwise() {
        let data = make_synthetic(3, 4, 10, 2.0, 1).unwrap();
        let teacher = build_mlp(4, 3, 7).unwrap();
        let student = build_mlp(4, 3, 8).unwrap();
        let mut c = one_client(teacher.clone(), (0..30).collect());
        client_local_step_fedkdx(&mut c, &data, &student, &LossConfig::default(), 8, 0.0).unwrap();
        assert_eq!(c.teacher, teacher);
    }

    #[test]
    fn kd_vanishes_between_identical_models() {
        let data = make_synthetic(2, 4, 8, 2.0, 2).unwrap();
        let net = build_mlp(4, 2, 3).unwrap();
        let train: Vec<usize> = (0..16).collect();
        let with_kd = LossConfig::default().base();
        let without = LossConfig {
            kd_weight: 0.0,
            ..with_kd
        };
        let g1 = client_local_step_fedkdx(
            &mut one_client(net.clone(), train.clone()),
            &data,
            &net,
            &with_kd,
            32,
            0.0,
        )
        .unwrap();
        let g2 = client_local_step_fedkdx(&mut one_client(net.clone(), train), &data, &net, &without, 32, 0.0).unwrap();
        let diff = g1
            .update
            .flatten()
            .iter()
            .zip(g2.update.flatten())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-15, "{diff}");
    }

    #[test]
    fn one_batch_student_gradient_matches_finite_differences() {
        let data = make_synthetic(2, 3, 3, 1.5, 4).unwrap();
        let teacher = build_mlp(3, 2, 21).unwrap();
        let student = build_mlp(3, 2, 22).unwrap();
        let train: Vec<usize> = (0..6).collect();
        let cfg = LossConfig::default();
        let local = client_local_step_fedkdx(
            &mut one_client(teacher.clone(), train.clone()),
            &data,
            &student,
            &cfg,
            32,
            0.01,
        )
        .unwrap();
        let (input, labels) = data.batch(&train).unwrap();
        let t = forward(&teacher.params, &teacher.buffers, &input, Mode::Train)
            .unwrap()
            .trace;
        let flat = student.params.flatten();
        let loss = |x: &Matrix| {
            let p = student.params.unflatten(x.data()).unwrap();
            let s = forward(&p, &student.buffers, &input, Mode::Train).unwrap().trace;
            combined_loss(
                Role::Student,
                &s.logits,
                &t.logits,
                &s.features,
                &t.features,
                &labels,
                &cfg,
            )
            .unwrap()
            .value
        };
        let x = Matrix::new(1, flat.len(), flat).unwrap();
        let fd = finite_diff_grad(loss, &x, 1e-5);
        for (a, n) in local.update.flatten().iter().zip(fd.data()) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel < 1e-4 || (a - n).abs() < 1e-8, "{a} vs {n}");
        }
    }

    fn received_from(params: &[ModelParams], net: &Network) -> Vec<ReceivedUpdate> {
        params
            .iter()
            .enumerate()
            .map(|(id, p)| ReceivedUpdate {
                client_id: id,
                num_samples: 10,
                tensors: p.layers().iter().chain(&net.buffers).cloned().collect(),
            })
            .collect()
    }

    #[test]
    fn opposite_gradients_cancel() {
        let mut net = build_mlp(4, 3, 1).unwrap();
        let before = net.clone();
        let g = build_mlp(4, 3, 2).unwrap().params;
        let mut neg = g.clone();
        neg.scale(-1.0);
        let rec = received_from(&[g, neg], &net);
        server_aggregate(&mut net, &rec, Strategy::FedKdx, 0.5, 0.9, &raw_f64()).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn mean_matches_direct_oracle() {
        let mut net = build_mlp(5, 3, 1).unwrap();
        let start = net.params.flatten();
        let grads: Vec<ModelParams> = (0..3).map(|k| build_mlp(5, 3, 10 + k).unwrap().params).collect();
        let rec = received_from(&grads, &net);
        server_aggregate(&mut net, &rec, Strategy::FedKdx, 0.1, 0.9, &raw_f64()).unwrap();
        let flats: Vec<Vec<f64>> = grads.iter().map(ModelParams::flatten).collect();
        for (i, v) in net.params.flatten().iter().enumerate() {
            let mean = (flats[0][i] + flats[1][i] + flats[2][i]) / 3.0;
            assert!((v - (start[i] - 0.1 * mean)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_participant_steps_by_its_gradient() {
        let mut net = build_mlp(5, 3, 1).unwrap();
        let start = net.params.flatten();
        let g = build_mlp(5, 3, 9).unwrap().params;
        let rec = received_from(std::slice::from_ref(&g), &net);
        server_aggregate(&mut net, &rec, Strategy::FedKd, 0.2, 0.9, &raw_f64()).unwrap();
        for ((v, s), gv) in net.params.flatten().iter().zip(start).zip(g.flatten()) {
            assert!((v - (s - 0.2 * gv)).abs() < 1e-15);
        }
    }

    #[test]
    fn undecodable_packet_names_client() {
        let net = build_mlp(4, 2, 1).unwrap();
        match receive(&net, 7, 1, b"FKDG0001garbage") {
            Err(Error::Client { client, .. }) => assert_eq!(client, 7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fedavg_single_client_adopts_local_model() {
        let cfg = FederationConfig {
            strategy: Strategy::FedAvg,
            rounds: 1,
            join_ratio: 1.0,
            lr_student: 0.05,
            policy: raw_f64(),
            ..FederationConfig::default()
        };
        let mut fed = small_setup(cfg.clone(), 1);
        let mut client = fed.clients()[0].clone();
        let global = fed.student().clone();
        let local = client_local_step_fedavg(&mut client, fed.data(), &global, 32, 0.05, 1, 0.0).unwrap();
        let mut expected = global.params.clone();
        expected.axpy(1.0, &local.update).unwrap();
        fed.run_round().unwrap();
        let got = fed.student().params.flatten();
        for (a, b) in got.iter().zip(expected.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fedprox_with_zero_mu_is_fedavg() {
        let base = FederationConfig {
            rounds: 3,
            join_ratio: 0.5,
            fedprox_mu: 0.0,
            ..FederationConfig::default()
        };
        let mut a = small_setup(
            FederationConfig {
                strategy: Strategy::FedAvg,
                ..base.clone()
            },
            4,
        );
        let mut b = small_setup(
            FederationConfig {
                strategy: Strategy::FedProx,
                ..base
            },
            4,
        );
        for _ in 0..3 {
            let (ra, rb) = (a.run_round().unwrap(), b.run_round().unwrap());
            assert_eq!(ra.metrics, rb.metrics);
            assert_eq!(ra.bytes_up, rb.bytes_up);
        }
        assert_eq!(a.student(), b.student());
    }

    #[test]
    fn raw_full_participation_is_centralized_sgd() {
        // One local batch per client and K clients with equal shard sizes:
        // the federated step is one SGD step on the mean of per-client
        // gradients, computed here without the federation path.
        let cfg = FederationConfig {
            strategy: Strategy::FedKdx,
            rounds: 1,
            join_ratio: 1.0,
            lr_student: 0.3,
            batch_size: 1000,
            policy: raw_f64(),
            ..FederationConfig::default()
        };
        let mut fed = small_setup(cfg.clone(), 3);
        let mut clients = fed.clients().to_vec();
        let student = fed.student().clone();
        let grads: Vec<ModelParams> = clients
            .iter_mut()
            .map(|c| {
                client_local_step_fedkdx(c, fed.data(), &student, &cfg.loss, cfg.batch_size, cfg.lr_teacher)
                    .unwrap()
                    .update
            })
            .collect();
        fed.run_round().unwrap();
        let start = student.params.flatten();
        let flats: Vec<Vec<f64>> = grads.iter().map(ModelParams::flatten).collect();
        for (i, v) in fed.student().params.flatten().iter().enumerate() {
            let mean = flats.iter().map(|f| f[i]).sum::<f64>() / 3.0;
            assert!((v - (start[i] - 0.3 * mean)).abs() < 1e-12);
        }
    }

    #[test]
    fn runs_are_deterministic_across_thread_counts() {
        let cfg = FederationConfig {
            rounds: 3,
            join_ratio: 0.75,
            ..FederationConfig::default()
        };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut fed = small_setup(cfg.clone(), 4);
                let recs: Vec<RoundRecord> = (0..3)
                    .map(|_| {
                        let mut r = fed.run_round().unwrap();
                        r.wall_seconds = 0.0;
                        r
                    })
                    .collect();
                (recs, fed.student().clone())
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn fedkd_matches_fedkdx_base() {
        let base = FederationConfig {
            rounds: 2,
            join_ratio: 0.5,
            ..FederationConfig::default()
        };
        let mut kd = small_setup(
            FederationConfig {
                strategy: Strategy::FedKd,
                ..base.clone()
            },
            4,
        );
        let mut kdx = small_setup(
            FederationConfig {
                strategy: Strategy::FedKdx,
                loss: base.loss.base(),
                ..base
            },
            4,
        );
        for _ in 0..2 {
            let (a, b) = (kd.run_round().unwrap(), kdx.run_round().unwrap());
            assert_eq!(a.metrics, b.metrics);
            assert_eq!((a.bytes_up, a.bytes_down), (b.bytes_up, b.bytes_down));
        }
        assert_eq!(kd.student(), kdx.student());
    }

    #[test]
    fn teacher_values_never_cross_the_wire() {
        let sentinel = 1234.5678_f64;
        let cfg = FederationConfig {
            rounds: 2,
            join_ratio: 1.0,
            lr_teacher: 0.0,
            ..FederationConfig::default()
        };
        let mut fed = small_setup(cfg, 3);
        for c in &mut fed.clients {
            for t in c.teacher.params.layers_mut() {
                t.values.data_mut().fill(sentinel);
            }
        }
        let needles = [
            (sentinel as f32).to_le_bytes().to_vec(),
            sentinel.to_le_bytes().to_vec(),
        ];
        let sample_needles: Vec<Vec<u8>> = fed
            .data()
            .samples()
            .iter()
            .take(20)
            .map(|s| (s.window.data()[0] as f32).to_le_bytes().to_vec())
            .collect();
        for _ in 0..2 {
            let out = fed.run_round_detailed().unwrap();
            let streams = out.uplinks.iter().map(|(_, b)| b).chain(std::iter::once(&out.downlink));
            for s in streams {
                for n in needles.iter().chain(&sample_needles) {
                    assert!(!s.windows(n.len()).any(|w| w == n.as_slice()));
                }
            }
        }
    }

    #[test]
    fn uplink_bytes_are_exact_packet_lengths() {
        let cfg = FederationConfig {
            rounds: 2,
            join_ratio: 0.5,
            ..FederationConfig::default()
        };
        let mut fed = small_setup(cfg, 4);
        let out = fed.run_round_detailed().unwrap();
        assert_eq!(out.record.participants.len(), 2);
        assert_eq!(
            out.record.bytes_up,
            out.uplinks.iter().map(|(_, b)| b.len()).sum::<usize>()
        );
        assert_eq!(out.record.bytes_down, 4 * out.downlink.len());
    }

    #[test]
    fn cnn_round_updates_running_stats() {
        let arch = crate::nn::Architecture::CnnHar {
            in_channels: 2,
            in_length: 32,
            num_classes: 2,
        };
        let samples: Vec<crate::data::Sample> = (0..16)
            .map(|i| crate::data::Sample {
                window: Matrix::from_fn(2, 32, |r, c| {
                    ((i * 7 + r * 3 + c) % 11) as f64 / 5.0 - 1.0 + (i % 2) as f64
                }),
                label: i % 2,
                subject_id: 0,
            })
            .collect();
        let data = Dataset::new(samples, Some(2)).unwrap();
        let shards = vec![
            ClientShard {
                train: (0..6).collect(),
                test: vec![6, 7],
            },
            ClientShard {
                train: (8..14).collect(),
                test: vec![14, 15],
            },
        ];
        let cfg = FederationConfig {
            rounds: 1,
            join_ratio: 1.0,
            batch_size: 4,
            ..FederationConfig::default()
        };
        let student = build_network(arch, 1).unwrap();
        let teachers = vec![build_network(arch, 2).unwrap(), build_network(arch, 3).unwrap()];
        let before = student.buffers.clone();
        let mut fed = Federation::new(cfg, data, shards, student, teachers).unwrap();
        let rec = fed.run_round().unwrap();
        assert!(rec.metrics.accuracy >= 0.0);
        assert_ne!(fed.student().buffers, before);
    }
}
