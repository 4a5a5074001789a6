//! U-shaped split federated training.
//!
//! A client owns its data, the bottom segment and the head. The server owns
//! a replica of the middle segment and, optionally, the watermark key. The two
//! sides only talk through [`Message`]s travelling over a [`Channel`], which
//! enforces the per-batch order
//! `Activation → Logits → InitialGradient → FinalGradient`.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{inject_noise, NoiseSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{cosine, Matrix, RngStream, StreamLabel};
use crate::nn::{softmax_xent, ForwardTape, OptimizerState, Segment, SgdConfig, SplitModel};
use crate::watermark::{adaptive_clip, compose, verify, wm_loss_and_gradient, EmbedConfig, WatermarkKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    /// Client → server: split-point activations `A`.
    Activation,
    /// Server → client: middle-segment output `S`.
    Logits,
    /// Client → server: `∂L_main/∂S`.
    InitialGradient,
    /// Server → client: `G_final`.
    FinalGradient,
}

impl MessageKind {
    pub const ORDER: [MessageKind; 4] = [
        MessageKind::Activation,
        MessageKind::Logits,
        MessageKind::InitialGradient,
        MessageKind::FinalGradient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Activation => "activation",
            MessageKind::Logits => "logits",
            MessageKind::InitialGradient => "initial-gradient",
            MessageKind::FinalGradient => "final-gradient",
        }
    }

    pub fn from_client(self) -> bool {
        matches!(self, MessageKind::Activation | MessageKind::InitialGradient)
    }

    fn next(self) -> MessageKind {
        match self {
            MessageKind::Activation => MessageKind::Logits,
            MessageKind::Logits => MessageKind::InitialGradient,
            MessageKind::InitialGradient => MessageKind::FinalGradient,
            MessageKind::FinalGradient => MessageKind::Activation,
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub round: usize,
    pub client: usize,
    pub batch: usize,
    pub payload: Matrix,
}

/// Header of a delivered message; payloads are not retained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub kind: MessageKind,
    pub round: usize,
    pub client: usize,
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MessageLog {
    entries: Vec<LogEntry>,
}

impl MessageLog {
    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn append(&mut self, other: MessageLog) {
        self.entries.extend(other.entries);
    }

    /// Checks that every (round, client) conversation is a sequence of
    /// complete batches in the fixed four-message order.
    pub fn check_order(&self) -> Result<()> {
        let mut i = 0;
        while i < self.entries.len() {
            let first = self.entries[i];
            let mut expected_batch = first.batch;
            let mut expected = MessageKind::Activation;
            while i < self.entries.len()
                && self.entries[i].round == first.round
                && self.entries[i].client == first.client
            {
                let e = self.entries[i];
                if e.kind != expected || e.batch != expected_batch {
                    return Err(Error::Protocol(format!(
                        "round {} client {}: got {} for batch {}, expected {} for batch {}",
                        e.round, e.client, e.kind, e.batch, expected, expected_batch
                    )));
                }
                if expected == MessageKind::FinalGradient {
                    expected_batch += 1;
                }
                expected = expected.next();
                i += 1;
            }
            if expected != MessageKind::Activation {
                return Err(Error::Protocol(format!(
                    "round {} client {}: conversation ends mid-batch",
                    first.round, first.client
                )));
            }
        }
        Ok(())
    }
}

/// In-process link between one client and its server replica for one round.
#[derive(Debug)]
pub struct Channel {
    round: usize,
    client: usize,
    batch: usize,
    expected: MessageKind,
    log: MessageLog,
}

impl Channel {
    pub fn new(round: usize, client: usize) -> Self {
        Channel {
            round,
            client,
            batch: 0,
            expected: MessageKind::Activation,
            log: MessageLog::default(),
        }
    }

    pub fn send(&mut self, kind: MessageKind, payload: Matrix) -> Result<Message> {
        if kind != self.expected {
            return Err(Error::Protocol(format!(
                "round {} client {} batch {}: {} sent while {} was due",
                self.round, self.client, self.batch, kind, self.expected
            )));
        }
        let msg = Message {
            kind,
            round: self.round,
            client: self.client,
            batch: self.batch,
            payload,
        };
        self.log.entries.push(LogEntry {
            kind,
            round: self.round,
            client: self.client,
            batch: self.batch,
            rows: msg.payload.rows(),
            cols: msg.payload.cols(),
        });
        if kind == MessageKind::FinalGradient {
            self.batch += 1;
        }
        self.expected = kind.next();
        Ok(msg)
    }

    pub fn into_log(self) -> MessageLog {
        self.log
    }
}

fn expect_kind(msg: &Message, kind: MessageKind) -> Result<()> {
    if msg.kind != kind {
        return Err(Error::Protocol(format!("expected {kind}, received {}", msg.kind)));
    }
    Ok(())
}

/// Server-held embedding secret.
#[derive(Debug, Clone)]
pub struct Watermarker {
    key: WatermarkKey,
    config: EmbedConfig,
}

impl Watermarker {
    pub fn new(key: WatermarkKey, config: EmbedConfig) -> Result<Self> {
        config.validate()?;
        Ok(Watermarker { key, config })
    }
}

/// Everything the server computed for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerBatchStats {
    pub wm_loss: Option<f64>,
    pub g_main_norm: f64,
    /// Norm of the unclipped watermark gradient.
    pub g_wm_norm: f64,
    pub g_wm_clipped_norm: f64,
    pub cosine: Option<f64>,
}

/// Server-internal tensors of one batch, handed to a [`BatchObserver`].
#[derive(Debug)]
pub struct BatchView<'a> {
    pub round: usize,
    pub client: usize,
    pub batch: usize,
    pub activations: &'a Matrix,
    pub g_main: &'a Matrix,
    pub g_wm: Option<&'a Matrix>,
    pub g_wm_clipped: Option<&'a Matrix>,
    pub g_final: &'a Matrix,
    pub lambda: Option<f64>,
}

pub type BatchObserver = Arc<dyn Fn(&BatchView<'_>) + Send + Sync>;

struct ServerPending {
    batch: usize,
    tape: ForwardTape,
}

/// One server-side replica. It only ever receives [`Message`] payloads.
pub struct ServerReplica {
    middle: Segment,
    optimizer: OptimizerState,
    watermark: Option<Watermarker>,
    pending: Option<ServerPending>,
    observer: Option<BatchObserver>,
}

impl ServerReplica {
    pub fn new(middle: Segment, sgd: SgdConfig, watermark: Option<Watermarker>) -> Self {
        ServerReplica {
            middle,
            optimizer: OptimizerState::new(sgd),
            watermark,
            pending: None,
            observer: None,
        }
    }

    pub fn with_observer(mut self, observer: Option<BatchObserver>) -> Self {
        self.observer = observer;
        self
    }

    pub fn middle(&self) -> &Segment {
        &self.middle
    }

    pub fn into_middle(self) -> Segment {
        self.middle
    }

    /// Forward through the middle; returns `S`.
    pub fn on_activation(&mut self, msg: &Message) -> Result<Matrix> {
        expect_kind(msg, MessageKind::Activation)?;
        if self.pending.is_some() {
            return Err(Error::Protocol(
                "activation received before the previous batch finished".into(),
            ));
        }
        let (out, tape) = self.middle.forward(&msg.payload)?;
        self.pending = Some(ServerPending { batch: msg.batch, tape });
        Ok(out)
    }

    /// Updates the middle, backpropagates to the split point and adds the
    /// clipped watermark gradient; returns `G_final`.
    pub fn on_initial_gradient(&mut self, msg: &Message) -> Result<(Matrix, ServerBatchStats)> {
        expect_kind(msg, MessageKind::InitialGradient)?;
        let pending = self
            .pending
            .take()
            .ok_or_else(|| Error::Protocol("gradient received without a pending activation".into()))?;
        if pending.batch != msg.batch {
            return Err(Error::Protocol(format!(
                "gradient for batch {} while batch {} is pending",
                msg.batch, pending.batch
            )));
        }
        let (g_main, grads) = self.middle.backward(&pending.tape, &msg.payload)?;
        self.middle.step(&grads, &mut self.optimizer)?;
        let activations = pending.tape.input();

        let Some(wm) = &self.watermark else {
            let stats = ServerBatchStats {
                wm_loss: None,
                g_main_norm: g_main.norm(),
                g_wm_norm: 0.0,
                g_wm_clipped_norm: 0.0,
                cosine: None,
            };
            if let Some(obs) = &self.observer {
                obs(&BatchView {
                    round: msg.round,
                    client: msg.client,
                    batch: msg.batch,
                    activations,
                    g_main: &g_main,
                    g_wm: None,
                    g_wm_clipped: None,
                    g_final: &g_main,
                    lambda: None,
                });
            }
            return Ok((g_main, stats));
        };

        let (wm_loss, g_wm) = wm_loss_and_gradient(activations, &wm.key)?;
        let clipped = adaptive_clip(&g_wm, &g_main, &wm.config)?;
        let g_final = compose(&g_main, &clipped)?;
        if !g_final.is_finite() {
            return Err(Error::numerical("non-finite final gradient"));
        }
        let stats = ServerBatchStats {
            wm_loss: Some(wm_loss),
            g_main_norm: g_main.norm(),
            g_wm_norm: g_wm.norm(),
            g_wm_clipped_norm: clipped.norm(),
            cosine: Some(cosine(g_main.as_slice(), g_wm.as_slice())),
        };
        if let Some(obs) = &self.observer {
            obs(&BatchView {
                round: msg.round,
                client: msg.client,
                batch: msg.batch,
                activations,
                g_main: &g_main,
                g_wm: Some(&g_wm),
                g_wm_clipped: Some(&clipped),
                g_final: &g_final,
                lambda: Some(wm.config.lambda),
            });
        }
        Ok((g_final, stats))
    }
}

struct ClientPending {
    batch: usize,
    bottom_tape: ForwardTape,
    labels: Vec<usize>,
    head: Option<(ForwardTape, f64)>,
}

/// One client: private data, bottom segment and head.
pub struct ClientNode {
    index: usize,
    bottom: Segment,
    head: Segment,
    bottom_opt: OptimizerState,
    head_opt: OptimizerState,
    noise: Option<(NoiseSpec, RngStream)>,
    pending: Option<ClientPending>,
}

impl ClientNode {
    pub fn new(index: usize, bottom: Segment, head: Segment, sgd: SgdConfig) -> Self {
        ClientNode {
            index,
            bottom,
            head,
            bottom_opt: OptimizerState::new(sgd),
            head_opt: OptimizerState::new(sgd),
            noise: None,
            pending: None,
        }
    }

    /// Perturbs every received `G_final` before use.
    pub fn with_noise(mut self, spec: NoiseSpec, rng: RngStream) -> Self {
        self.noise = Some((spec, rng));
        self
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn bottom(&self) -> &Segment {
        &self.bottom
    }

    pub fn head(&self) -> &Segment {
        &self.head
    }

    pub fn into_parts(self) -> (Segment, Segment) {
        (self.bottom, self.head)
    }

    /// Forward through the bottom; returns `A`.
    pub fn begin_batch(&mut self, batch: usize, inputs: &Matrix, labels: Vec<usize>) -> Result<Matrix> {
        if self.pending.is_some() {
            return Err(Error::Protocol(
                "new batch started before the previous one finished".into(),
            ));
        }
        let (a, tape) = self.bottom.forward(inputs)?;
        self.pending = Some(ClientPending {
            batch,
            bottom_tape: tape,
            labels,
            head: None,
        });
        Ok(a)
    }

    /// Head forward and main loss; returns `G_initial = ∂L_main/∂S`.
    pub fn on_logits(&mut self, msg: &Message) -> Result<(Matrix, f64)> {
        expect_kind(msg, MessageKind::Logits)?;
        let pending = self
            .pending
            .as_mut()
            .filter(|p| p.batch == msg.batch && p.head.is_none())
            .ok_or_else(|| Error::Protocol(format!("unexpected logits for batch {}", msg.batch)))?;
        let (logits, head_tape) = self.head.forward(&msg.payload)?;
        let (loss, logits_grad) = softmax_xent(&logits, &pending.labels)?;
        if !loss.is_finite() {
            return Err(Error::numerical("non-finite main-task loss"));
        }
        let (g_initial, head_grads) = self.head.backward(&head_tape, &logits_grad)?;
        self.head.step(&head_grads, &mut self.head_opt)?;
        pending.head = Some((head_tape, loss));
        Ok((g_initial, loss))
    }

    /// Backpropagates the received `G_final` through the bottom and updates
    /// it; returns the gradient actually applied (after any noise).
    pub fn on_final_gradient(&mut self, msg: &Message) -> Result<Matrix> {
        expect_kind(msg, MessageKind::FinalGradient)?;
        let pending = match self.pending.take() {
            Some(p) if p.batch == msg.batch && p.head.is_some() => p,
            other => {
                self.pending = other;
                return Err(Error::Protocol(format!(
                    "unexpected final gradient for batch {}",
                    msg.batch
                )));
            }
        };
        let g = match &mut self.noise {
            Some((spec, rng)) => inject_noise(&msg.payload, spec, rng)?,
            None => msg.payload.clone(),
        };
        let (_, grads) = self.bottom.backward(&pending.bottom_tape, &g)?;
        self.bottom.step(&grads, &mut self.bottom_opt)?;
        Ok(g)
    }
}

/// Round schedule and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub client_sgd: SgdConfig,
    pub server_sgd: SgdConfig,
    /// `None` runs plain U-SFL.
    pub embed: Option<EmbedConfig>,
    /// Probes per round for the logged success rate.
    pub probe_samples: usize,
    pub parallel: bool,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            rounds: 30,
            local_epochs: 2,
            batch_size: 64,
            client_sgd: SgdConfig::default(),
            server_sgd: SgdConfig::default(),
            embed: Some(EmbedConfig::default()),
            probe_samples: 64,
            parallel: false,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self, problems: &mut Vec<String>) {
        if self.local_epochs == 0 {
            problems.push("protocol.local_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            problems.push("protocol.batch_size must be at least 1".into());
        }
        if self.probe_samples == 0 {
            problems.push("protocol.probe_samples must be at least 1".into());
        }
        self.client_sgd.validate("optimizer.client", problems);
        self.server_sgd.validate("optimizer.server", problems);
        if let Some(e) = &self.embed {
            if let Err(Error::Validation(p)) = e.validate() {
                problems.extend(p);
            }
        }
    }
}

/// Per-round averages over every batch of every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub main_loss: f64,
    pub wm_loss: Option<f64>,
    pub g_main_norm: f64,
    pub g_wm_norm: Option<f64>,
    pub g_wm_clipped_norm: Option<f64>,
    pub cosine: Option<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub wsr: Option<f64>,
    pub outliers: Option<usize>,
}

/// Optional instrumentation for a run.
#[derive(Clone, Default)]
pub struct RunHooks {
    pub observer: Option<BatchObserver>,
    /// Client whose received `G_final` rows are kept per round.
    pub capture_client: Option<usize>,
    /// Noise applied by the listed clients (all clients when the list is empty).
    pub noise: Option<(NoiseSpec, Vec<usize>)>,
}

pub struct RunOutput {
    pub model: SplitModel,
    pub metrics: Vec<RoundMetrics>,
    pub log: MessageLog,
    /// Received `G_final` rows of the capture client, one matrix per round.
    pub captured: Vec<Matrix>,
    /// Per-batch server statistics in (round, client, batch) order.
    pub batches: Vec<ServerBatchStats>,
}

/// Parameter-wise weighted mean; bottom and head are averaged as the client
/// side and the middle as the server side.
pub fn fedavg(models: &[&SplitModel], weights: &[f64]) -> Result<SplitModel> {
    let bottoms: Vec<&Segment> = models.iter().map(|m| &m.bottom).collect();
    let middles: Vec<&Segment> = models.iter().map(|m| &m.middle).collect();
    let heads: Vec<&Segment> = models.iter().map(|m| &m.head).collect();
    SplitModel::new(
        Segment::weighted_average(&bottoms, weights)?,
        Segment::weighted_average(&middles, weights)?,
        Segment::weighted_average(&heads, weights)?,
    )
}

struct ClientRound {
    model: SplitModel,
    log: MessageLog,
    received: Option<Matrix>,
    losses: Vec<f64>,
    stats: Vec<ServerBatchStats>,
}

/// Runs one batch through all four messages.
#[allow(clippy::too_many_arguments)]
pub fn train_batch(
    client: &mut ClientNode,
    server: &mut ServerReplica,
    channel: &mut Channel,
    batch: usize,
    inputs: &Matrix,
    labels: Vec<usize>,
) -> Result<(f64, ServerBatchStats, Matrix)> {
    let a = client.begin_batch(batch, inputs, labels)?;
    let msg = channel.send(MessageKind::Activation, a)?;
    let s = server.on_activation(&msg)?;
    let msg = channel.send(MessageKind::Logits, s)?;
    let (g_initial, loss) = client.on_logits(&msg)?;
    let msg = channel.send(MessageKind::InitialGradient, g_initial)?;
    let (g_final, stats) = server.on_initial_gradient(&msg)?;
    let msg = channel.send(MessageKind::FinalGradient, g_final)?;
    client.on_final_gradient(&msg)?;
    Ok((loss, stats, msg.payload))
}

struct RoundContext<'a> {
    cfg: &'a ProtocolConfig,
    global: &'a SplitModel,
    watermark: Option<&'a Watermarker>,
    hooks: &'a RunHooks,
    n_clients: usize,
    round: usize,
}

fn client_round(ctx: &RoundContext<'_>, index: usize, shard: &Dataset) -> Result<ClientRound> {
    let cfg = ctx.cfg;
    let stream = (ctx.round * ctx.n_clients + index) as u64;
    let mut client = ClientNode::new(
        index,
        ctx.global.bottom.clone(),
        ctx.global.head.clone(),
        cfg.client_sgd,
    );
    if let Some((spec, who)) = &ctx.hooks.noise {
        if who.is_empty() || who.contains(&index) {
            client = client.with_noise(*spec, RngStream::new(cfg.seed, StreamLabel::Noise).derive(stream));
        }
    }
    let mut server = ServerReplica::new(ctx.global.middle.clone(), cfg.server_sgd, ctx.watermark.cloned())
        .with_observer(ctx.hooks.observer.clone());
    let mut channel = Channel::new(ctx.round, index);
    let mut batch_rng = RngStream::new(cfg.seed, StreamLabel::Data).derive(stream);
    let capture = ctx.hooks.capture_client == Some(index);
    let mut received: Vec<Matrix> = Vec::new();
    let mut losses = Vec::new();
    let mut stats = Vec::new();
    let mut batch = 0;
    for _ in 0..cfg.local_epochs {
        for (x, y) in shard.shuffled_batches(cfg.batch_size, &mut batch_rng) {
            let (loss, s, g_final) = train_batch(&mut client, &mut server, &mut channel, batch, &x, y)?;
            losses.push(loss);
            stats.push(s);
            if capture {
                received.push(g_final);
            }
            batch += 1;
        }
    }
    let (bottom, head) = client.into_parts();
    let received = if capture {
        let refs: Vec<&Matrix> = received.iter().collect();
        Some(Matrix::vstack(&refs)?)
    } else {
        None
    };
    Ok(ClientRound {
        model: SplitModel::new(bottom, server.into_middle(), head)?,
        log: channel.into_log(),
        received,
        losses,
        stats,
    })
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// `rounds` rounds of local training on every shard followed by FedAvg of
/// both sides. Deterministic in `cfg.seed`; the parallel mode gives the same
/// result as the sequential one.
pub fn run_experiment(
    cfg: &ProtocolConfig,
    initial: SplitModel,
    shards: &[Dataset],
    test: Option<&Dataset>,
    key: Option<&WatermarkKey>,
    hooks: &RunHooks,
) -> Result<RunOutput> {
    let mut problems = Vec::new();
    cfg.validate(&mut problems);
    if shards.is_empty() {
        problems.push("at least one client shard is required".into());
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let watermark = match (key, cfg.embed) {
        (Some(k), Some(e)) => {
            if k.d() != initial.split_dim() {
                return Err(Error::invalid(format!(
                    "key dimension {} does not match split dimension {}",
                    k.d(),
                    initial.split_dim()
                )));
            }
            Some(Watermarker::new(k.clone(), e)?)
        }
        _ => None,
    };
    let weights: Vec<f64> = shards.iter().map(|s| s.len() as f64).collect();
    let train_all = {
        let refs: Vec<&Matrix> = shards.iter().map(|s| &s.inputs).collect();
        let labels: Vec<usize> = shards.iter().flat_map(|s| s.labels.iter().copied()).collect();
        Dataset::new(Matrix::vstack(&refs)?, labels, shards[0].n_classes)?
    };

    let mut model = initial;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut log = MessageLog::default();
    let mut captured = Vec::new();
    let mut batches = Vec::new();
    for round in 0..cfg.rounds {
        let ctx = RoundContext {
            cfg,
            global: &model,
            watermark: watermark.as_ref(),
            hooks,
            n_clients: shards.len(),
            round,
        };
        let run = |(i, shard): (usize, &Dataset)| {
            client_round(&ctx, i, shard).map_err(|e| e.context(format!("round {round}, client {i}")))
        };
        let results: Vec<ClientRound> = if cfg.parallel {
            shards.par_iter().enumerate().map(run).collect::<Result<_>>()?
        } else {
            shards.iter().enumerate().map(run).collect::<Result<_>>()?
        };

        let refs: Vec<&SplitModel> = results.iter().map(|r| &r.model).collect();
        let next = fedavg(&refs, &weights)?;
        if !next.is_finite() {
            return Err(Error::numerical(format!(
                "round {round}: aggregated model is not finite"
            )));
        }

        let stats: Vec<ServerBatchStats> = results.iter().flat_map(|r| r.stats.iter().copied()).collect();
        let embedding = watermark.is_some();
        let wsr = match key.filter(|_| embedding) {
            Some(k) => {
                let mut probe = RngStream::new(cfg.seed, StreamLabel::Verification).derive(round as u64);
                Some(verify(&next.bottom, k, cfg.probe_samples, 1.0, &mut probe)?.wsr)
            }
            None => None,
        };
        metrics.push(RoundMetrics {
            round,
            main_loss: mean(results.iter().flat_map(|r| r.losses.iter().copied())).unwrap_or(f64::NAN),
            wm_loss: mean(stats.iter().filter_map(|s| s.wm_loss)),
            g_main_norm: mean(stats.iter().map(|s| s.g_main_norm)).unwrap_or(0.0),
            g_wm_norm: mean(stats.iter().map(|s| s.g_wm_norm)).filter(|_| embedding),
            g_wm_clipped_norm: mean(stats.iter().map(|s| s.g_wm_clipped_norm)).filter(|_| embedding),
            cosine: mean(stats.iter().filter_map(|s| s.cosine)),
            train_accuracy: next.accuracy(&train_all.inputs, &train_all.labels)?,
            test_accuracy: test.map(|t| next.accuracy(&t.inputs, &t.labels)).transpose()?,
            wsr,
            outliers: None,
        });
        log::debug!(
            "round {round}: loss {:.4} train acc {:.3} wsr {:?}",
            metrics[round].main_loss,
            metrics[round].train_accuracy,
            wsr
        );
        for r in results {
            log.append(r.log);
            if let Some(rows) = r.received {
                captured.push(rows);
            }
        }
        batches.extend(stats);
        model = next;
    }
    Ok(RunOutput {
        model,
        metrics,
        log,
        captured,
        batches,
    })
}
