//! Synchronous federated training: server state machine, client training
//! loops, parameter aggregation, and pluggable byte transports.
//!
//! Each round the coordinator deploys the shared parameter slice, every
//! client runs its local epochs and uploads its slice back, and the
//! coordinator averages the uploads behind a full barrier — no partial
//! aggregation. Which parameters count as "shared" is decided entirely by
//! the [`StrategyId`] partition, so strategies differ only in what crosses
//! the wire and which penalty joins the local objective.
//!
//! Both transports move identical encoded frames, so an in-process run and
//! a socket run with the same configuration produce bit-identical models.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{Receiver, Sender};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::ftn::CountLevel;
use crate::metrics::MetricReport;
use crate::optim::{
    fedprox_term, gwc_loss, recon_loss, AdamState, LossWeights, GWC_WARMUP_EPOCHS,
};
use crate::param_tree::{check_snapshots_congruent, ParamTree, TreeEntry, TreeSnapshot};
use crate::phantom::{augment, Sample, SiteDataset};
use crate::rng;
use crate::tensor::{no_grad, Element, Tensor};
use crate::unet::{DenoiserModel, StrategyId, UNetConfig};
use crate::wire::{self, Message, MessageKind};

/// Upper bound on a single transport frame; anything larger is a protocol
/// breakdown, not a legitimate parameter payload.
pub const MAX_FRAME_BYTES: usize = 1 << 30;

const CONNECT_ATTEMPTS: usize = 100;
const CONNECT_RETRY_DELAY: Duration = Duration::from_millis(30);

// ---------------------------------------------------------------------------
// Transports
// ---------------------------------------------------------------------------

/// A bidirectional, blocking, whole-frame byte channel. Frames arrive
/// intact and in order or the conduit fails.
pub trait Conduit: Send {
    fn send(&mut self, frame: &[u8]) -> Result<()>;
    fn recv(&mut self) -> Result<Vec<u8>>;
}

impl Conduit for Box<dyn Conduit> {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        (**self).send(frame)
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        (**self).recv()
    }
}

/// In-process conduit over a pair of byte channels.
pub struct ChannelConduit {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Two connected in-process endpoints.
pub fn channel_pair() -> (ChannelConduit, ChannelConduit) {
    let (atx, brx) = mpsc::channel();
    let (btx, arx) = mpsc::channel();
    (
        ChannelConduit { tx: atx, rx: arx },
        ChannelConduit { tx: btx, rx: brx },
    )
}

impl Conduit for ChannelConduit {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        self.tx
            .send(frame.to_vec())
            .map_err(|_| Error::transport("peer hung up before receiving the frame"))
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        self.rx
            .recv()
            .map_err(|_| Error::transport("peer hung up before sending a frame"))
    }
}

/// Stream-socket conduit: frames are a `u32` little-endian length prefix
/// followed by the payload bytes.
pub struct TcpConduit {
    stream: TcpStream,
}

impl TcpConduit {
    pub fn from_stream(stream: TcpStream) -> Self {
        stream.set_nodelay(true).ok();
        TcpConduit { stream }
    }

    /// Connects with retries, since the coordinator may still be binding.
    pub fn connect(addr: &str) -> Result<Self> {
        let mut last: Option<std::io::Error> = None;
        for _ in 0..CONNECT_ATTEMPTS {
            match TcpStream::connect(addr) {
                Ok(stream) => return Ok(TcpConduit::from_stream(stream)),
                Err(e) => {
                    last = Some(e);
                    thread::sleep(CONNECT_RETRY_DELAY);
                }
            }
        }
        Err(Error::transport(format!(
            "could not connect to {addr}: {}",
            last.map(|e| e.to_string()).unwrap_or_default()
        )))
    }
}

impl Conduit for TcpConduit {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        if frame.len() > MAX_FRAME_BYTES {
            return Err(Error::transport(format!(
                "frame of {} bytes exceeds the {MAX_FRAME_BYTES} byte cap",
                frame.len()
            )));
        }
        let len = (frame.len() as u32).to_le_bytes();
        self.stream
            .write_all(&len)
            .and_then(|()| self.stream.write_all(frame))
            .and_then(|()| self.stream.flush())
            .map_err(|e| Error::transport(format!("socket write: {e}")))
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        let mut len = [0u8; 4];
        self.stream
            .read_exact(&mut len)
            .map_err(|e| Error::transport(format!("socket read: {e}")))?;
        let len = u32::from_le_bytes(len) as usize;
        if len > MAX_FRAME_BYTES {
            return Err(Error::transport(format!(
                "incoming frame claims {len} bytes, cap is {MAX_FRAME_BYTES}"
            )));
        }
        let mut frame = vec![0u8; len];
        self.stream
            .read_exact(&mut frame)
            .map_err(|e| Error::transport(format!("socket read: {e}")))?;
        Ok(frame)
    }
}

/// One frame captured off a conduit, as seen from the wrapping side.
#[derive(Debug, Clone)]
pub struct CapturedFrame {
    pub outbound: bool,
    pub bytes: Vec<u8>,
}

/// Shared sink for captured traffic.
pub type FrameRecorder = Arc<Mutex<Vec<CapturedFrame>>>;

pub fn frame_recorder() -> FrameRecorder {
    Arc::new(Mutex::new(Vec::new()))
}

/// Wrapper that copies every frame into a [`FrameRecorder`] for offline
/// traffic audits.
pub struct RecordingConduit<C: Conduit> {
    inner: C,
    log: FrameRecorder,
}

impl<C: Conduit> RecordingConduit<C> {
    pub fn new(inner: C, log: FrameRecorder) -> Self {
        RecordingConduit { inner, log }
    }
}

impl<C: Conduit> Conduit for RecordingConduit<C> {
    fn send(&mut self, frame: &[u8]) -> Result<()> {
        self.log.lock().unwrap().push(CapturedFrame {
            outbound: true,
            bytes: frame.to_vec(),
        });
        self.inner.send(frame)
    }

    fn recv(&mut self) -> Result<Vec<u8>> {
        let frame = self.inner.recv()?;
        self.log.lock().unwrap().push(CapturedFrame {
            outbound: false,
            bytes: frame.clone(),
        });
        Ok(frame)
    }
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Per-name, per-element arithmetic mean of congruent parameter trees.
/// Accumulates in `f64` regardless of the tree precision.
pub fn aggregate<T: Element>(uploads: &[ParamTree<T>]) -> Result<ParamTree<T>> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::contract("aggregation over an empty upload list"))?;
    for upload in &uploads[1..] {
        first.check_congruent(upload)?;
    }
    let snapshots: Vec<TreeSnapshot<T>> = uploads.iter().map(|u| u.snapshot()).collect();
    ParamTree::from_snapshot(&mean_of_snapshots(&snapshots))
}

/// Snapshot-level mean used by the coordinator; same contract as
/// [`aggregate`].
pub fn aggregate_snapshots<T: Element>(uploads: &[TreeSnapshot<T>]) -> Result<TreeSnapshot<T>> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::contract("aggregation over an empty upload list"))?;
    for upload in &uploads[1..] {
        check_snapshots_congruent(first, upload)?;
    }
    Ok(mean_of_snapshots(uploads))
}

fn mean_of_snapshots<T: Element>(uploads: &[TreeSnapshot<T>]) -> TreeSnapshot<T> {
    let n = uploads.len() as f64;
    let first = &uploads[0];
    let mut out = Vec::with_capacity(first.len());
    for (i, entry) in first.iter().enumerate() {
        let mut acc = vec![0.0f64; entry.data.len()];
        for upload in uploads {
            for (a, v) in acc.iter_mut().zip(&upload[i].data) {
                *a += v.to_f64();
            }
        }
        out.push(TreeEntry {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            data: acc.into_iter().map(|a| T::from_f64(a / n)).collect(),
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Server state machine
// ---------------------------------------------------------------------------

/// Coordinator lifecycle phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    AwaitRegistration,
    Deployed,
    Collecting,
    Aggregating,
    Done,
}

/// Observable coordinator transitions, kept for protocol assertions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerEvent {
    SiteRegistered { site: u32 },
    RoundDeployed { epoch: usize },
    UploadReceived { site: u32, epoch: usize, pending: usize },
    RoundAggregated { epoch: usize, uploads: usize },
    RunFinished,
}

/// The coordinator: a sequential state machine fed whole messages. The
/// only synchronization point is the per-round upload barrier —
/// aggregation is impossible until every registered site has uploaded.
pub struct ServerState {
    strategy: StrategyId,
    total_epochs: usize,
    epoch: usize,
    registered: BTreeSet<u32>,
    pending: BTreeMap<u32, TreeSnapshot<f32>>,
    aggregated: TreeSnapshot<f32>,
    phase: Phase,
    acks: BTreeSet<u32>,
    events: Vec<ServerEvent>,
}

impl ServerState {
    /// `init_shared` is the common initialization broadcast in round one.
    pub fn new(strategy: StrategyId, total_epochs: usize, init_shared: TreeSnapshot<f32>) -> Self {
        ServerState {
            strategy,
            total_epochs,
            epoch: 0,
            registered: BTreeSet::new(),
            pending: BTreeMap::new(),
            aggregated: init_shared,
            phase: Phase::AwaitRegistration,
            acks: BTreeSet::new(),
            events: Vec::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn events(&self) -> &[ServerEvent] {
        &self.events
    }

    pub fn aggregated(&self) -> &TreeSnapshot<f32> {
        &self.aggregated
    }

    pub fn register(&mut self, site: u32) -> Result<()> {
        if self.phase != Phase::AwaitRegistration {
            return Err(Error::protocol(format!(
                "registration from site {site} outside the registration phase"
            )));
        }
        if !self.registered.insert(site) {
            return Err(Error::protocol(format!("site {site} registered twice")));
        }
        self.events.push(ServerEvent::SiteRegistered { site });
        log::info!("site {site} registered ({} total)", self.registered.len());
        Ok(())
    }

    /// Opens the next round: bumps the epoch and returns the deployment
    /// carrying the current aggregate.
    pub fn begin_round(&mut self) -> Result<Message> {
        let ready = match self.phase {
            Phase::AwaitRegistration => !self.registered.is_empty() && self.epoch == 0,
            Phase::Aggregating => self.epoch < self.total_epochs,
            _ => false,
        };
        if !ready {
            return Err(Error::contract(format!(
                "cannot open round {} from phase {:?}",
                self.epoch + 1,
                self.phase
            )));
        }
        self.epoch += 1;
        self.phase = Phase::Deployed;
        self.events.push(ServerEvent::RoundDeployed { epoch: self.epoch });
        log::info!("round {} of {}: deploying", self.epoch, self.total_epochs);
        Ok(Message::new(
            MessageKind::Deploy,
            0,
            self.epoch as u32,
            self.aggregated.clone(),
        ))
    }

    /// Accepts one upload for the current round. Returns `true` once every
    /// registered site has uploaded.
    pub fn receive_upload(&mut self, msg: &Message) -> Result<bool> {
        if self.phase != Phase::Deployed && self.phase != Phase::Collecting {
            return Err(Error::protocol(format!(
                "upload from site {} in phase {:?}",
                msg.site_id, self.phase
            )));
        }
        if msg.kind != MessageKind::Upload {
            return Err(Error::protocol(format!(
                "expected an upload, got {:?} from site {}",
                msg.kind, msg.site_id
            )));
        }
        if msg.epoch as usize != self.epoch {
            return Err(Error::protocol(format!(
                "site {} uploaded for epoch {}, round is {}",
                msg.site_id, msg.epoch, self.epoch
            )));
        }
        if !self.registered.contains(&msg.site_id) {
            return Err(Error::protocol(format!(
                "upload from unregistered site {}",
                msg.site_id
            )));
        }
        if self.pending.contains_key(&msg.site_id) {
            return Err(Error::protocol(format!(
                "site {} uploaded twice in round {}",
                msg.site_id, self.epoch
            )));
        }
        for entry in &msg.snapshot {
            if !self.strategy.is_shared(&entry.name) {
                return Err(Error::protocol(format!(
                    "upload from site {} carries non-shared parameter {:?}",
                    msg.site_id, entry.name
                )));
            }
        }
        check_snapshots_congruent(&self.aggregated, &msg.snapshot)?;
        self.phase = Phase::Collecting;
        self.pending.insert(msg.site_id, msg.snapshot.clone());
        self.events.push(ServerEvent::UploadReceived {
            site: msg.site_id,
            epoch: self.epoch,
            pending: self.pending.len(),
        });
        Ok(self.pending.len() == self.registered.len())
    }

    /// Averages the round's uploads. Refuses to run before the barrier is
    /// full — that is the core synchronization guarantee.
    pub fn aggregate_round(&mut self) -> Result<()> {
        if self.phase != Phase::Collecting {
            return Err(Error::contract(format!(
                "aggregation requested in phase {:?}",
                self.phase
            )));
        }
        if self.pending.len() != self.registered.len() {
            return Err(Error::contract(format!(
                "aggregation with {} of {} uploads",
                self.pending.len(),
                self.registered.len()
            )));
        }
        let uploads: Vec<TreeSnapshot<f32>> = self.pending.values().cloned().collect();
        self.aggregated = aggregate_snapshots(&uploads)?;
        let count = self.pending.len();
        self.pending.clear();
        self.phase = Phase::Aggregating;
        self.events.push(ServerEvent::RoundAggregated {
            epoch: self.epoch,
            uploads: count,
        });
        log::info!("round {}: aggregated {count} uploads", self.epoch);
        Ok(())
    }

    /// The closing broadcast carrying the final aggregate.
    pub fn finish_message(&self) -> Result<Message> {
        if self.phase != Phase::Aggregating || self.epoch != self.total_epochs {
            return Err(Error::contract(format!(
                "finish requested at epoch {} phase {:?}",
                self.epoch, self.phase
            )));
        }
        Ok(Message::new(
            MessageKind::Finish,
            0,
            self.epoch as u32,
            self.aggregated.clone(),
        ))
    }

    pub fn confirm_ack(&mut self, msg: &Message) -> Result<()> {
        if msg.kind != MessageKind::Ack || msg.epoch as usize != self.total_epochs {
            return Err(Error::protocol(format!(
                "expected a final acknowledgement, got {:?} for epoch {}",
                msg.kind, msg.epoch
            )));
        }
        if !self.registered.contains(&msg.site_id) || !self.acks.insert(msg.site_id) {
            return Err(Error::protocol(format!(
                "unexpected acknowledgement from site {}",
                msg.site_id
            )));
        }
        if self.acks.len() == self.registered.len() {
            self.phase = Phase::Done;
            self.events.push(ServerEvent::RunFinished);
            log::info!("run finished after {} rounds", self.epoch);
        }
        Ok(())
    }
}

/// Drives a [`ServerState`] over one conduit per client until completion.
pub fn run_server(conduits: &mut [Box<dyn Conduit>], state: &mut ServerState) -> Result<()> {
    for conduit in conduits.iter_mut() {
        let msg = recv_message(conduit.as_mut())?;
        if msg.kind != MessageKind::Register {
            return Err(Error::protocol(format!(
                "expected a registration, got {:?}",
                msg.kind
            )));
        }
        state.register(msg.site_id)?;
    }
    for _ in 0..state.total_epochs {
        let deploy = wire::encode(&state.begin_round()?)?;
        for conduit in conduits.iter_mut() {
            conduit.send(&deploy)?;
        }
        for conduit in conduits.iter_mut() {
            let msg = recv_message(conduit.as_mut())?;
            state.receive_upload(&msg)?;
        }
        state.aggregate_round()?;
    }
    let finish = wire::encode(&state.finish_message()?)?;
    for conduit in conduits.iter_mut() {
        conduit.send(&finish)?;
    }
    for conduit in conduits.iter_mut() {
        let msg = recv_message(conduit.as_mut())?;
        state.confirm_ack(&msg)?;
    }
    Ok(())
}

fn recv_message(conduit: &mut dyn Conduit) -> Result<Message> {
    let frame = conduit.recv()?;
    wire::decode(&frame)
}

fn expect_message(conduit: &mut dyn Conduit, kind: MessageKind, epoch: u32) -> Result<Message> {
    let msg = recv_message(conduit)?;
    if msg.kind != kind || msg.epoch != epoch {
        return Err(Error::protocol(format!(
            "expected {kind:?} for epoch {epoch}, got {:?} for epoch {}",
            msg.kind, msg.epoch
        )));
    }
    Ok(msg)
}

// ---------------------------------------------------------------------------
// Local training
// ---------------------------------------------------------------------------

/// Shared knobs for one local optimization pass.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub batch_size: usize,
    /// Cubic crop edge for training-time augmentation; `None` trains on
    /// whole volumes without cropping or flipping.
    pub crop: Option<usize>,
    pub flip_augment: bool,
    pub weights: LossWeights,
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if let Some(c) = self.crop {
            if c == 0 {
                return Err(Error::config("crop must be at least 1 voxel"));
            }
        }
        self.weights.validate()
    }
}

/// Per-epoch means of the objective's two parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub recon: f64,
    pub penalty: f64,
}

/// Builds the strategy's objective for one batch and reports the value of
/// each part. Matches the warm-up gate exactly: before it opens, the
/// returned tensor IS the reconstruction loss — no penalty graph exists.
pub fn batch_objective<T: Element>(
    model: &DenoiserModel<T>,
    batch: &[(Tensor<T>, Tensor<T>, CountLevel)],
    anchor: Option<&ParamTree<T>>,
    strategy: StrategyId,
    weights: &LossWeights,
    q: u32,
) -> Result<(Tensor<T>, f64, f64)> {
    let recon = recon_loss(model, batch)?;
    let recon_val = recon.item().to_f64();
    match strategy {
        StrategyId::FedFtn if q > GWC_WARMUP_EPOCHS => {
            let anchor = anchor.ok_or_else(|| {
                Error::contract(format!(
                    "weight constraint active at epoch {q} but no anchor deployed"
                ))
            })?;
            let local = model.params.subset(|n| n.starts_with("denoiser."));
            let anchor_sub = anchor.subset(|n| n.starts_with("denoiser."));
            let gwc = gwc_loss(&local, &anchor_sub, weights.gwc_raw_sum)?;
            let scaled = gwc.scale(T::from_f64(weights.lambda_gwc))?;
            let penalty_val = scaled.item().to_f64();
            Ok((recon.add(&scaled)?, recon_val, penalty_val))
        }
        StrategyId::FedProx => {
            let anchor = anchor.ok_or_else(|| {
                Error::contract("proximal training requires a deployed anchor")
            })?;
            let in_term = |n: &str| strategy.is_shared(n) && !n.starts_with("norm_stats.");
            let local = model.params.subset(in_term);
            let anchor_sub = anchor.subset(in_term);
            let prox = fedprox_term(&local, &anchor_sub, weights.mu_fedprox)?;
            let penalty_val = prox.item().to_f64();
            Ok((recon.add(&prox)?, recon_val, penalty_val))
        }
        _ => Ok((recon, recon_val, 0.0)),
    }
}

/// Runs `epochs` full passes over `samples`, updating the model in place.
/// `q` is the 1-based global epoch (0 for standalone fine-tuning); batch
/// order and augmentation randomness derive from `(seed, q, p)` only, so
/// identically configured sites behave identically.
pub fn train_epochs<T: Element>(
    model: &DenoiserModel<T>,
    adam: &mut AdamState<T>,
    samples: &[Sample<T>],
    anchor: Option<&ParamTree<T>>,
    strategy: StrategyId,
    epochs: usize,
    q: usize,
    settings: &TrainSettings,
) -> Result<Vec<EpochStats>> {
    if samples.is_empty() {
        return Err(Error::config("training requested on an empty dataset"));
    }
    settings.validate()?;
    let trainable = model.trainable();
    let mut stats = Vec::with_capacity(epochs);
    for p in 1..=epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng = rng::stream(settings.seed, "batch", &[q as u64, p as u64]);
        order.shuffle(&mut shuffle_rng);
        let mut aug_rng = rng::stream(settings.seed, "augment", &[q as u64, p as u64]);
        let mut recon_sum = 0.0;
        let mut penalty_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(settings.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &ix in chunk {
                let s = &samples[ix];
                match settings.crop {
                    Some(c) => {
                        let (x, y) = augment(&s.x, &s.y, c, settings.flip_augment, &mut aug_rng)?;
                        batch.push((x, y, s.d));
                    }
                    None => batch.push((s.x.clone(), s.y.clone(), s.d)),
                }
            }
            let (total, recon_val, penalty_val) =
                batch_objective(model, &batch, anchor, strategy, &settings.weights, q as u32)?;
            total.backward()?;
            adam.step(&trainable)?;
            recon_sum += recon_val;
            penalty_sum += penalty_val;
            batches += 1;
        }
        stats.push(EpochStats {
            recon: recon_sum / batches as f64,
            penalty: penalty_sum / batches as f64,
        });
        log::debug!(
            "epoch q={q} p={p}: recon {:.6}, penalty {:.6}",
            stats.last().unwrap().recon,
            stats.last().unwrap().penalty
        );
    }
    Ok(stats)
}

/// Post-federation local fine-tuning: every parameter trains (shared and
/// modulation alike) under a fresh optimizer at a reduced rate, with no
/// communication. Mutates the model in place and returns per-epoch stats.
pub fn site_adaptation<T: Element>(
    model: &DenoiserModel<T>,
    samples: &[Sample<T>],
    epochs: usize,
    lr: f64,
    settings: &TrainSettings,
) -> Result<Vec<EpochStats>> {
    if epochs == 0 {
        return Ok(Vec::new());
    }
    let trainable = model.trainable();
    let mut adam = AdamState::new(&trainable, lr);
    train_epochs(
        model,
        &mut adam,
        samples,
        None,
        StrategyId::LocalOnly,
        epochs,
        0,
        settings,
    )
}

/// Default fine-tuning schedule: 10 epochs at a reduced rate.
pub const ADAPT_EPOCHS: usize = 10;
pub const ADAPT_LR: f64 = 2e-5;

// ---------------------------------------------------------------------------
// Full runs
// ---------------------------------------------------------------------------

/// Everything a federated run needs besides the per-site data.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub strategy: StrategyId,
    pub unet: UNetConfig,
    pub global_epochs: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub adam_reset_per_round: bool,
    /// Emit metric rows every this many global epochs (the final epoch is
    /// always emitted; 0 means final only).
    pub metrics_every: usize,
    pub train: TrainSettings,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.train.validate()?;
        if self.global_epochs == 0 {
            return Err(Error::config("global_epochs must be at least 1"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if let Some(c) = self.train.crop {
            if c % self.unet.spatial_divisor() != 0 {
                return Err(Error::config(format!(
                    "crop {c} is not divisible by the network's pooling factor {}",
                    self.unet.spatial_divisor()
                )));
            }
        }
        Ok(())
    }
}

/// Deferred dataset construction, so each client thread can materialize
/// its own tensors (tensor graphs never cross threads).
pub type DatasetProvider<T> = Box<dyn FnOnce() -> Result<SiteDataset<T>> + Send>;

/// One client's identity and data source.
pub struct SiteTask<T: Element> {
    pub site_id: u32,
    pub provider: DatasetProvider<T>,
}

/// How clients and coordinator talk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    /// `host:port`; port 0 binds an ephemeral port.
    Socket(String),
}

/// One evaluation record: model quality on a (site, split, count level)
/// cell after the given global epoch, plus that round's training means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub site: u32,
    pub split: String,
    pub count_level: f64,
    pub psnr: f64,
    pub nmse: f64,
    pub ssim: f64,
    pub recon_loss: f64,
    pub gwc_loss: f64,
}

/// A finished client: its personalized parameters and evaluation log.
pub struct SiteRunResult<T: Element> {
    pub site_id: u32,
    pub final_params: TreeSnapshot<T>,
    pub rows: Vec<MetricRow>,
}

/// A finished run: per-site results (sorted by site) plus the coordinator
/// event log.
pub struct RunOutcome<T: Element> {
    pub sites: Vec<SiteRunResult<T>>,
    pub events: Vec<ServerEvent>,
}

fn mean_stats(stats: &[EpochStats]) -> (f64, f64) {
    if stats.is_empty() {
        return (0.0, 0.0);
    }
    let n = stats.len() as f64;
    (
        stats.iter().map(|s| s.recon).sum::<f64>() / n,
        stats.iter().map(|s| s.penalty).sum::<f64>() / n,
    )
}

/// Whether epoch `q` of `total` produces metric rows.
fn emits_metrics(q: usize, total: usize, every: usize) -> bool {
    q == total || (every > 0 && q % every == 0)
}

/// Evaluates the model on every split and count level of the dataset.
pub fn evaluate_rows<T: Element>(
    model: &DenoiserModel<T>,
    dataset: &SiteDataset<T>,
    site: u32,
    epoch: usize,
    recon_loss_mean: f64,
    penalty_mean: f64,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for (split, samples) in [
        ("train", &dataset.train),
        ("val", &dataset.val),
        ("test", &dataset.test),
    ] {
        let mut levels: Vec<f64> = Vec::new();
        for s in samples.iter() {
            if !levels.contains(&s.d.value()) {
                levels.push(s.d.value());
            }
        }
        for &level in &levels {
            let mut psnr_sum = 0.0;
            let mut nmse_sum = 0.0;
            let mut ssim_sum = 0.0;
            let mut count = 0usize;
            for s in samples.iter().filter(|s| s.d.value() == level) {
                let pred = no_grad(|| model.forward(&s.x, s.d, false))?;
                let report = MetricReport::measure(&pred, &s.y, site, level, s.subject_id)?;
                psnr_sum += report.psnr_db;
                nmse_sum += report.nmse;
                ssim_sum += report.ssim;
                count += 1;
            }
            rows.push(MetricRow {
                epoch,
                site,
                split: split.to_string(),
                count_level: level,
                psnr: psnr_sum / count as f64,
                nmse: nmse_sum / count as f64,
                ssim: ssim_sum / count as f64,
                recon_loss: recon_loss_mean,
                gwc_loss: penalty_mean,
            });
        }
    }
    Ok(rows)
}

/// One client's whole life: register, then per round load the deployment,
/// train locally, upload the shared slice; finally load the closing
/// aggregate and acknowledge.
fn client_loop<T: Element>(
    conduit: &mut dyn Conduit,
    site_id: u32,
    provider: DatasetProvider<T>,
    config: &RunConfig,
) -> Result<SiteRunResult<T>> {
    let dataset = provider()?;
    if dataset.train.is_empty() {
        return Err(Error::config(format!("site {site_id} has no training data")));
    }
    let mut init_rng = rng::stream(config.train.seed, "model", &[]);
    let model = DenoiserModel::<T>::init(config.unet.clone(), &mut init_rng)?;
    let trainable = model.trainable();
    let mut adam = AdamState::new(&trainable, config.lr);
    let total = config.global_epochs;
    let mut rows = Vec::new();
    let mut prev_round_stats = (0.0, 0.0);

    conduit.send(&wire::encode(&Message::control(
        MessageKind::Register,
        site_id,
        0,
    ))?)?;

    for q in 1..=total {
        let deploy = expect_message(conduit, MessageKind::Deploy, q as u32)?;
        for entry in &deploy.snapshot {
            if !config.strategy.is_shared(&entry.name) {
                return Err(Error::protocol(format!(
                    "deployment carries non-shared parameter {:?}",
                    entry.name
                )));
            }
        }
        let native = wire::from_wire::<T>(&deploy.snapshot);
        model.params.load_snapshot(&native)?;
        if q >= 2 && emits_metrics(q - 1, total, config.metrics_every) {
            rows.extend(evaluate_rows(
                &model,
                &dataset,
                site_id,
                q - 1,
                prev_round_stats.0,
                prev_round_stats.1,
            )?);
        }
        let anchor = ParamTree::from_snapshot(&native)?;
        if config.adam_reset_per_round {
            adam = AdamState::new(&trainable, config.lr);
        }
        let stats = train_epochs(
            &model,
            &mut adam,
            &dataset.train,
            Some(&anchor),
            config.strategy,
            config.local_epochs,
            q,
            &config.train,
        )?;
        prev_round_stats = mean_stats(&stats);
        let upload = wire::to_wire(&model.partition(config.strategy).0.snapshot());
        conduit.send(&wire::encode(&Message::new(
            MessageKind::Upload,
            site_id,
            q as u32,
            upload,
        ))?)?;
    }

    let finish = expect_message(conduit, MessageKind::Finish, total as u32)?;
    let native = wire::from_wire::<T>(&finish.snapshot);
    model.params.load_snapshot(&native)?;
    rows.extend(evaluate_rows(
        &model,
        &dataset,
        site_id,
        total,
        prev_round_stats.0,
        prev_round_stats.1,
    )?);
    conduit.send(&wire::encode(&Message::control(
        MessageKind::Ack,
        site_id,
        total as u32,
    ))?)?;

    Ok(SiteRunResult {
        site_id,
        final_params: model.params.snapshot(),
        rows,
    })
}

/// The coordinator's half of a full run: builds the common initialization,
/// serves all rounds, and returns the event log.
fn serve_run(
    mut conduits: Vec<Box<dyn Conduit>>,
    config: &RunConfig,
) -> Result<(Vec<ServerEvent>, TreeSnapshot<f32>)> {
    // The broadcast initialization is the shared slice of the same model
    // every client builds, so round one starts from agreement.
    let mut init_rng = rng::stream(config.train.seed, "model", &[]);
    let reference = DenoiserModel::<f32>::init(config.unet.clone(), &mut init_rng)?;
    let init_shared = reference.partition(config.strategy).0.snapshot();
    let mut state = ServerState::new(config.strategy, config.global_epochs, init_shared);
    run_server(&mut conduits, &mut state)?;
    let events = state.events().to_vec();
    let aggregated = state.aggregated().clone();
    Ok((events, aggregated))
}

/// Runs a complete synchronous federated training session and returns each
/// site's personalized model plus logs. Clients run on their own threads;
/// the coordinator runs on the calling thread.
pub fn run_federated_training<T: Element>(
    tasks: Vec<SiteTask<T>>,
    config: &RunConfig,
    transport: &TransportKind,
    recorder: Option<FrameRecorder>,
) -> Result<RunOutcome<T>> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::config("a federated run needs at least one site"));
    }
    let mut site_ids = BTreeSet::new();
    for t in &tasks {
        if !site_ids.insert(t.site_id) {
            return Err(Error::config(format!("duplicate site id {}", t.site_id)));
        }
    }

    let mut handles = Vec::with_capacity(tasks.len());
    let mut conduits: Vec<Box<dyn Conduit>> = Vec::with_capacity(tasks.len());

    match transport {
        TransportKind::InProcess => {
            for task in tasks {
                let (server_end, client_end) = channel_pair();
                conduits.push(Box::new(server_end));
                let cfg = config.clone();
                handles.push(thread::spawn(move || {
                    let mut conduit = client_end;
                    client_loop(&mut conduit, task.site_id, task.provider, &cfg)
                }));
            }
        }
        TransportKind::Socket(addr) => {
            let listener = TcpListener::bind(addr.as_str())
                .map_err(|e| Error::transport(format!("bind {addr}: {e}")))?;
            let local = listener
                .local_addr()
                .map_err(|e| Error::transport(format!("local address: {e}")))?
                .to_string();
            let n = tasks.len();
            for task in tasks {
                let cfg = config.clone();
                let target = local.clone();
                handles.push(thread::spawn(move || {
                    let mut conduit = TcpConduit::connect(&target)?;
                    client_loop(&mut conduit, task.site_id, task.provider, &cfg)
                }));
            }
            for _ in 0..n {
                let (stream, _) = listener
                    .accept()
                    .map_err(|e| Error::transport(format!("accept: {e}")))?;
                conduits.push(Box::new(TcpConduit::from_stream(stream)));
            }
        }
    }

    if let Some(log) = &recorder {
        conduits = conduits
            .into_iter()
            .map(|c| Box::new(RecordingConduit::new(c, log.clone())) as Box<dyn Conduit>)
            .collect();
    }

    let served = serve_run(conduits, config);

    let mut sites = Vec::with_capacity(handles.len());
    let mut client_error: Option<Error> = None;
    for handle in handles {
        match handle.join() {
            Ok(Ok(result)) => sites.push(result),
            Ok(Err(e)) => {
                // Transport failures are usually a downstream symptom of the
                // real fault; prefer reporting a root cause.
                if client_error.is_none() || !matches!(e, Error::Transport(_)) {
                    client_error = Some(e);
                }
            }
            Err(_) => client_error = Some(Error::transport("a client thread panicked")),
        }
    }
    let (events, _) = match (served, client_error) {
        (Ok(ok), None) => ok,
        (_, Some(client)) => return Err(client),
        (Err(server), None) => return Err(server),
    };
    sites.sort_by_key(|s| s.site_id);
    Ok(RunOutcome { sites, events })
}

// ---------------------------------------------------------------------------
// Traffic auditing
// ---------------------------------------------------------------------------

/// Decoded summary of captured traffic.
#[derive(Debug, Default, Clone)]
pub struct TrafficAudit {
    pub deploy_frames: usize,
    pub upload_frames: usize,
    pub other_frames: usize,
    /// Names found in Deploy/Upload payloads that start with a local-only
    /// modulation prefix. Must be empty for a compliant personalized run.
    pub leaked_names: Vec<String>,
}

/// Decodes every captured frame and scans Deploy/Upload payload names for
/// local-only modulation parameters.
pub fn audit_frames(frames: &[CapturedFrame]) -> Result<TrafficAudit> {
    let mut audit = TrafficAudit::default();
    for frame in frames {
        let msg = wire::decode(&frame.bytes)?;
        match msg.kind {
            MessageKind::Deploy | MessageKind::Upload => {
                if msg.kind == MessageKind::Deploy {
                    audit.deploy_frames += 1;
                } else {
                    audit.upload_frames += 1;
                }
                for entry in &msg.snapshot {
                    if entry.name.starts_with("ftn.") {
                        audit.leaked_names.push(entry.name.clone());
                    }
                }
            }
            _ => audit.other_frames += 1,
        }
    }
    Ok(audit)
}
