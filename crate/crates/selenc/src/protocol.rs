//! Federated rounds with selectively encrypted uploads.
//!
//! Clients and server run in-process and exchange serialized messages over
//! channels. The server only ever holds a [`PublicContext`]; every decryption
//! happens on a client and is recorded in the [`AuditLog`].
//!
//! Phases, in order: clients encrypt local sensitivity maps at the initial
//! model; the server aggregates them homomorphically; the lowest-numbered
//! present client decrypts the aggregate and selects the mask, which the
//! server broadcasts; then `rounds` training rounds of decrypt-merge, local
//! training, optional Laplace noise on clear coordinates, partial
//! encryption, and weighted aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand_core::RngCore;
use sha2::{Digest, Sha256};

use selenc_core::dp::{self, DpConfig, DpError, Policy};
use selenc_core::he::{quantize_weights, BackendId, Ciphertext, HeError, PublicContext, SecretContext};
use selenc_core::mask::{apply_mask, merge, select_mask, EncryptionMask, IndexedPart, MaskError};
use selenc_core::model::{self, Dataset, LossKind, ModelError, ModelShape};
use selenc_core::rng;
use selenc_core::sensitivity::{self, FdStep, SensitivityError};

pub const DEFAULT_LOCAL_STEPS: usize = 5;
pub const DEFAULT_LR: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("invalid round config: {0}")]
    Config(String),
    #[error(transparent)]
    He(#[from] HeError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error("every client dropped out of round {round}")]
    AllDropped { round: usize },
    #[error("upload from client {client} in round {round} does not match the broadcast mask")]
    MaskMismatch { client: usize, round: usize },
    #[error("client {client} sent an unexpected message")]
    UnexpectedReply { client: usize },
    #[error("client worker disconnected")]
    Disconnected,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpSettings {
    /// Laplace scale.
    pub b: f64,
    /// Cap on the per-coordinate sensitivity estimate.
    pub clip: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub weights: Vec<f64>,
    pub mask_ratio: f64,
    pub dp: Option<DpSettings>,
    /// Absent clients per round (rounds are 1-based).
    pub dropout: BTreeMap<usize, BTreeSet<usize>>,
    pub seed: u64,
    pub local_steps: usize,
    pub lr: f64,
    pub loss: LossKind,
    /// Worker threads for the client phase; 0 runs everything on the caller.
    pub threads: usize,
    /// Measure wall times. Off by default so outputs are reproducible.
    pub timings: bool,
}

impl RoundConfig {
    pub fn new(weights: Vec<f64>, rounds: usize, mask_ratio: f64, seed: u64) -> Self {
        RoundConfig {
            n_clients: weights.len(),
            rounds,
            weights,
            mask_ratio,
            dp: None,
            dropout: BTreeMap::new(),
            seed,
            local_steps: DEFAULT_LOCAL_STEPS,
            lr: DEFAULT_LR,
            loss: LossKind::SquaredError,
            threads: default_threads(),
            timings: false,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |msg: String| Err(ProtocolError::Config(msg));
        if self.n_clients == 0 {
            return bad("n_clients must be at least 1".into());
        }
        if self.weights.len() != self.n_clients {
            return bad(format!("{} weights for {} clients", self.weights.len(), self.n_clients));
        }
        if self.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return bad("weights must lie in [0, 1]".into());
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("weights sum to {total}, not 1"));
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} is outside [0, 1]", self.mask_ratio));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive".into());
        }
        if let Some(dp) = self.dp {
            if !(dp.b > 0.0 && dp.b.is_finite()) {
                return bad("dp.b must be positive".into());
            }
            if !(dp.clip > 0.0 && dp.clip.is_finite()) {
                return bad("dp.clip must be positive".into());
            }
        }
        for (&round, absent) in &self.dropout {
            if round == 0 || round > self.rounds {
                return bad(format!("dropout names round {round}, rounds are 1..={}", self.rounds));
            }
            if let Some(c) = absent.iter().find(|c| **c >= self.n_clients) {
                return bad(format!("dropout names client {c}, clients are 0..{}", self.n_clients));
            }
            if absent.len() == self.n_clients {
                return Err(ProtocolError::AllDropped { round });
            }
        }
        Ok(())
    }

    fn present(&self, round: usize) -> Vec<usize> {
        let absent = self.dropout.get(&round);
        (0..self.n_clients).filter(|c| absent.is_none_or(|a| !a.contains(c))).collect()
    }
}

/// Worker threads: `SELENC_THREADS` if set, else the available parallelism.
pub fn default_threads() -> usize {
    std::env::var("SELENC_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Renormalize the weights of the clients that arrived.
///
/// Returns one weight per arrived client, in the order given.
pub fn handle_dropout(expected: &[usize], arrived: &[usize], weights: &[f64]) -> Result<Vec<f64>, ProtocolError> {
    if arrived.is_empty() {
        return Err(ProtocolError::AllDropped { round: 0 });
    }
    if let Some(c) = arrived.iter().find(|c| !expected.contains(c) || **c >= weights.len()) {
        return Err(ProtocolError::Config(format!("client {c} arrived but was not expected")));
    }
    if arrived == expected {
        return Ok(arrived.iter().map(|&c| weights[c]).collect());
    }
    let total: f64 = arrived.iter().map(|&c| weights[c]).sum();
    if total <= 0.0 {
        return Err(ProtocolError::Config("arrived clients carry zero total weight".into()));
    }
    Ok(arrived.iter().map(|&c| weights[c] / total).collect())
}

/// `sum_i w_i * v_i`, accumulated in order starting from `w_0 * v_0`.
pub fn weighted_average(vectors: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let mut acc: Vec<f64> = vectors[0].iter().map(|v| weights[0] * v).collect();
    for (v, w) in vectors.iter().zip(weights).skip(1) {
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += w * x;
        }
    }
    acc
}

/// Plaintext FedAvg with the same schedule, dropout and local training.
pub fn fedavg_reference(cfg: &RoundConfig, shape: &ModelShape, datasets: &[Dataset]) -> Result<Vec<f64>, ProtocolError> {
    cfg.validate()?;
    let mut global = shape.init(cfg.seed).into_vec();
    for round in 1..=cfg.rounds {
        let present = cfg.present(round);
        let weights = handle_dropout(&(0..cfg.n_clients).collect::<Vec<_>>(), &present, &cfg.weights)?;
        let locals = present
            .iter()
            .map(|&c| Ok(model::train(&global, shape, &datasets[c], cfg.loss, cfg.local_steps, cfg.lr)?.0.into_vec()))
            .collect::<Result<Vec<_>, ProtocolError>>()?;
        let refs: Vec<&[f64]> = locals.iter().map(|v| v.as_slice()).collect();
        global = weighted_average(&refs, &weights);
    }
    Ok(global)
}

/// A model split by the mask: encrypted coordinates as one ciphertext,
/// clear coordinates in index order.
#[derive(Debug, Clone)]
pub struct PartialModel {
    pub mask_id: u64,
    pub round: usize,
    pub encrypted: Option<Ciphertext>,
    pub clear: Vec<f64>,
}

/// What travels over the channel.
#[derive(Debug, Clone, PartialEq)]
pub struct WireModel {
    pub mask_id: u64,
    pub round: usize,
    pub encrypted: Option<Vec<u8>>,
    pub clear: Vec<f64>,
}

impl PartialModel {
    pub fn to_wire(&self, pk: &PublicContext) -> WireModel {
        WireModel {
            mask_id: self.mask_id,
            round: self.round,
            encrypted: self.encrypted.as_ref().map(|c| pk.serialize(c)),
            clear: self.clear.clone(),
        }
    }

    pub fn from_wire(wire: &WireModel, pk: &PublicContext) -> Result<Self, ProtocolError> {
        Ok(PartialModel {
            mask_id: wire.mask_id,
            round: wire.round,
            encrypted: wire.encrypted.as_deref().map(|b| pk.deserialize(b)).transpose()?,
            clear: wire.clear.clone(),
        })
    }

    /// Ciphertext bytes as reported by the backend plus 8 bytes per clear value.
    pub fn reported_bytes(&self, pk: &PublicContext) -> u64 {
        self.encrypted.as_ref().map_or(0, |c| pk.reported_bytes(c)) + 8 * self.clear.len() as u64
    }
}

pub fn mask_id(mask: &EncryptionMask) -> u64 {
    let digest = Sha256::new_with_prefix(b"selenc/mask-id/v1").chain_update(mask.to_bytes()).finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Split and encrypt `w` under `mask`.
pub fn seal<R: RngCore + ?Sized>(
    pk: &PublicContext,
    w: &[f64],
    mask: &EncryptionMask,
    round: usize,
    rng: &mut R,
) -> Result<PartialModel, ProtocolError> {
    let (masked, clear) = apply_mask(w, mask)?;
    let encrypted = if masked.values.is_empty() { None } else { Some(pk.encrypt_vector(&masked.values, rng)?) };
    Ok(PartialModel { mask_id: mask_id(mask), round, encrypted, clear: clear.values })
}

/// Decrypt the encrypted part and merge it with the clear part.
pub fn open(keys: &SecretContext, pm: &PartialModel, mask: &EncryptionMask) -> Result<Vec<f64>, ProtocolError> {
    if pm.mask_id != mask_id(mask) {
        return Err(ProtocolError::MaskMismatch { client: usize::MAX, round: pm.round });
    }
    let masked_values = match &pm.encrypted {
        Some(c) => keys.decrypt_vector(c)?,
        None => Vec::new(),
    };
    let masked = IndexedPart { indices: mask.indices().collect(), values: masked_values };
    let clear = IndexedPart { indices: mask.complement_indices().collect(), values: pm.clear.clone() };
    Ok(merge(&masked, &clear, mask.len())?)
}

/// Weighted aggregation of partial models. Uses public key material only.
///
/// Paillier weights are quantized jointly so they still sum to exactly one
/// after fixed-point rounding; the mock backend and the clear part use the
/// weights as given.
pub fn server_aggregate(
    pk: &PublicContext,
    uploads: &[&PartialModel],
    weights: &[f64],
    round: usize,
) -> Result<PartialModel, ProtocolError> {
    let first = uploads.first().ok_or(ProtocolError::AllDropped { round })?;
    if weights.len() != uploads.len() {
        return Err(ProtocolError::Config(format!("{} weights for {} uploads", weights.len(), uploads.len())));
    }
    for (client, u) in uploads.iter().enumerate() {
        if u.mask_id != first.mask_id
            || u.clear.len() != first.clear.len()
            || u.encrypted.is_some() != first.encrypted.is_some()
        {
            return Err(ProtocolError::MaskMismatch { client, round });
        }
    }
    let encrypted = match first.encrypted {
        Some(_) => {
            let cts: Vec<&Ciphertext> = uploads.iter().map(|u| u.encrypted.as_ref().expect("checked")).collect();
            let he_weights = match pk.backend_id() {
                BackendId::Paillier => quantize_weights(pk.cfg(), weights)?,
                BackendId::Mock => weights.to_vec(),
            };
            Some(pk.weighted_sum(&cts, &he_weights)?)
        }
        None => None,
    };
    let clear = if first.clear.is_empty() {
        Vec::new()
    } else {
        let refs: Vec<&[f64]> = uploads.iter().map(|u| u.clear.as_slice()).collect();
        weighted_average(&refs, weights)
    };
    Ok(PartialModel { mask_id: first.mask_id, round, encrypted, clear })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Party {
    Server,
    Client(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Encrypt,
    Decrypt,
    Aggregate,
    SelectMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditEvent {
    pub party: Party,
    pub action: Action,
    pub round: usize,
}

/// Record of which party performed which key operation.
#[derive(Debug, Default)]
pub struct AuditLog(Mutex<Vec<AuditEvent>>);

impl AuditLog {
    fn record(&self, party: Party, action: Action, round: usize) {
        self.0.lock().expect("audit lock").push(AuditEvent { party, action, round });
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.0.lock().expect("audit lock").clone()
    }
}

/// Local state and update step of one client.
pub struct ClientContext<'a> {
    pub id: usize,
    pub data: &'a Dataset,
    pub shape: &'a ModelShape,
    pub keys: &'a SecretContext,
    pub cfg: &'a RoundConfig,
}

#[derive(Debug, Clone)]
pub struct ClientUpload {
    pub model: PartialModel,
    pub epsilon: f64,
    pub enc_ms: f64,
    pub dec_ms: f64,
    pub train_ms: f64,
}

fn timed<T>(on: bool, f: impl FnOnce() -> T) -> (T, f64) {
    if on {
        let start = Instant::now();
        let out = f();
        (out, start.elapsed().as_secs_f64() * 1e3)
    } else {
        (f(), 0.0)
    }
}

impl ClientContext<'_> {
    /// Start from `global` (a partial model, or the shared initial model),
    /// train locally, noise clear coordinates if DP is on, and encrypt the
    /// masked ones.
    pub fn update(&self, global: GlobalView<'_>, mask: &EncryptionMask, round: usize) -> Result<ClientUpload, ProtocolError> {
        let timings = self.cfg.timings;
        let (start, dec_ms) = match global {
            GlobalView::Initial(w) => (w.to_vec(), 0.0),
            GlobalView::Partial(pm) => {
                let (w, ms) = timed(timings, || open(self.keys, pm, mask));
                (w.map_err(|e| match e {
                    ProtocolError::MaskMismatch { .. } => ProtocolError::MaskMismatch { client: self.id, round },
                    e => e,
                })?, ms)
            }
        };
        let (trained, train_ms) =
            timed(timings, || model::train(&start, self.shape, self.data, self.cfg.loss, self.cfg.local_steps, self.cfg.lr));
        let mut w = trained?.0.into_vec();

        let clear_count = mask.len() - mask.encrypted_count();
        let epsilon = match self.cfg.dp {
            Some(settings) => {
                let delta_f = self.delta_f(&start, settings.clip)?;
                let noise_seed = rng::derive(self.cfg.seed, "dp-noise", self.id as u64, round as u64).next_u64();
                let noise = dp::laplace_noise(settings.b, clear_count, noise_seed)?;
                for (i, n) in mask.complement_indices().zip(noise) {
                    w[i] += n;
                }
                dp::budget_for_policy(&DpConfig::new(settings.b, delta_f)?, mask, Policy::SelectiveP)?.epsilon
            }
            None if clear_count > 0 => f64::INFINITY,
            None => 0.0,
        };

        let mut stream = rng::derive(self.cfg.seed, "encrypt", self.id as u64, round as u64);
        let (sealed, enc_ms) = timed(timings, || seal(self.keys.public(), &w, mask, round, &mut stream));
        Ok(ClientUpload { model: sealed?, epsilon, enc_ms, dec_ms, train_ms })
    }

    /// Per-coordinate sensitivity estimate: the largest per-sample gradient
    /// magnitude at the starting model, capped at `clip`.
    fn delta_f(&self, w: &[f64], clip: f64) -> Result<Vec<f64>, ProtocolError> {
        let mut out = vec![0.0f64; w.len()];
        let mut g = vec![0.0; w.len()];
        for k in 0..self.data.len() {
            g.iter_mut().for_each(|x| *x = 0.0);
            model::sample_loss_and_grad(w, self.shape, self.data.input(k), self.data.target(k), self.cfg.loss, &mut g);
            for (o, gi) in out.iter_mut().zip(&g) {
                *o = o.max(gi.abs());
            }
        }
        Ok(out.into_iter().map(|d| if d.is_finite() { d.min(clip) } else { clip }).collect())
    }

    fn encrypted_map(&self, initial: &[f64]) -> Result<(Vec<u8>, f64), ProtocolError> {
        let map = sensitivity::sensitivity(initial, self.shape, self.data, self.cfg.loss, FdStep::default())?;
        let mut stream = rng::derive(self.cfg.seed, "encrypt-map", self.id as u64, 0);
        let (ct, ms) = timed(self.cfg.timings, || self.keys.public().encrypt_vector(&map.scores, &mut stream));
        Ok((self.keys.public().serialize(&ct?), ms))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum GlobalView<'a> {
    Initial(&'a [f64]),
    Partial(&'a PartialModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub round: usize,
    /// `None` for server rows.
    pub client: Option<usize>,
    pub phase: &'static str,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub enc_ms: f64,
    pub agg_ms: f64,
    pub dec_ms: f64,
    pub train_ms: f64,
    pub epsilon_round: f64,
    pub epsilon_total: f64,
}

impl MetricRow {
    fn new(round: usize, client: Option<usize>, phase: &'static str) -> Self {
        MetricRow {
            round,
            client,
            phase,
            bytes_up: 0,
            bytes_down: 0,
            enc_ms: 0.0,
            agg_ms: 0.0,
            dec_ms: 0.0,
            train_ms: 0.0,
            epsilon_round: 0.0,
            epsilon_total: 0.0,
        }
    }
}

#[derive(Debug)]
pub struct ProtocolOutput {
    pub final_model: Vec<f64>,
    pub mask: EncryptionMask,
    pub metrics: Vec<MetricRow>,
    pub audit: Vec<AuditEvent>,
    pub epsilon_total: f64,
}

enum Request {
    Map { initial: Arc<Vec<f64>> },
    Select { aggregate: Arc<Vec<u8>> },
    InstallMask { mask: Arc<Vec<u8>> },
    Train { round: usize, global: Option<Arc<WireModel>> },
    Open { global: Arc<WireModel> },
}

enum Reply {
    Map { bytes: Vec<u8>, enc_ms: f64 },
    Mask { bytes: Vec<u8>, dec_ms: f64 },
    Installed,
    Upload { model: WireModel, epsilon: f64, enc_ms: f64, dec_ms: f64, train_ms: f64 },
    Opened { model: Vec<f64>, dec_ms: f64 },
}

struct Client<'a> {
    ctx: ClientContext<'a>,
    audit: &'a AuditLog,
    initial: Arc<Vec<f64>>,
    mask: Option<EncryptionMask>,
}

impl Client<'_> {
    fn mask(&self) -> Result<&EncryptionMask, ProtocolError> {
        self.mask.as_ref().ok_or(ProtocolError::UnexpectedReply { client: self.ctx.id })
    }

    fn handle(&mut self, req: Request) -> Result<Reply, ProtocolError> {
        let me = Party::Client(self.ctx.id);
        let pk = self.ctx.keys.public();
        match req {
            Request::Map { initial } => {
                self.audit.record(me, Action::Encrypt, 0);
                let (bytes, enc_ms) = self.ctx.encrypted_map(&initial)?;
                Ok(Reply::Map { bytes, enc_ms })
            }
            Request::Select { aggregate } => {
                self.audit.record(me, Action::Decrypt, 0);
                let ct = pk.deserialize(&aggregate)?;
                let (scores, dec_ms) = timed(self.ctx.cfg.timings, || self.ctx.keys.decrypt_vector(&ct));
                self.audit.record(me, Action::SelectMask, 0);
                let mask = select_mask(&scores?, self.ctx.cfg.mask_ratio)?;
                Ok(Reply::Mask { bytes: mask.to_bytes(), dec_ms })
            }
            Request::InstallMask { mask } => {
                self.mask = Some(EncryptionMask::from_bytes(&mask)?);
                Ok(Reply::Installed)
            }
            Request::Train { round, global } => {
                let global = global.map(|g| PartialModel::from_wire(&g, pk)).transpose()?;
                if let Some(g) = &global {
                    if g.encrypted.is_some() {
                        self.audit.record(me, Action::Decrypt, round);
                    }
                }
                let view = match &global {
                    Some(g) => GlobalView::Partial(g),
                    None => GlobalView::Initial(&self.initial),
                };
                let up = self.ctx.update(view, self.mask()?, round)?;
                if up.model.encrypted.is_some() {
                    self.audit.record(me, Action::Encrypt, round);
                }
                Ok(Reply::Upload {
                    model: up.model.to_wire(pk),
                    epsilon: up.epsilon,
                    enc_ms: up.enc_ms,
                    dec_ms: up.dec_ms,
                    train_ms: up.train_ms,
                })
            }
            Request::Open { global } => {
                let pm = PartialModel::from_wire(&global, pk)?;
                if pm.encrypted.is_some() {
                    self.audit.record(me, Action::Decrypt, pm.round);
                }
                let (model, dec_ms) = timed(self.ctx.cfg.timings, || open(self.ctx.keys, &pm, self.mask()?));
                Ok(Reply::Opened { model: model?, dec_ms })
            }
        }
    }
}

type Job = (usize, Request);
type Answer = (usize, Result<Reply, ProtocolError>);

/// Delivers requests to clients, either inline or over per-worker channels.
enum Pool<'a> {
    Inline(Vec<Client<'a>>),
    Threads { jobs: Vec<mpsc::Sender<Job>>, answers: mpsc::Receiver<Answer> },
}

impl<'a> Pool<'a> {
    fn start<'scope>(scope: &'scope std::thread::Scope<'scope, '_>, clients: Vec<Client<'a>>, threads: usize) -> Self
    where
        'a: 'scope,
    {
        let threads = threads.min(clients.len());
        if threads <= 1 {
            return Pool::Inline(clients);
        }
        let (answer_tx, answers) = mpsc::channel::<Answer>();
        let mut per_worker: Vec<Vec<Client<'a>>> = (0..threads).map(|_| Vec::new()).collect();
        for c in clients {
            per_worker[c.ctx.id % threads].push(c);
        }
        let jobs = per_worker
            .into_iter()
            .map(|mut mine| {
                let (tx, rx) = mpsc::channel::<Job>();
                let answer_tx = answer_tx.clone();
                scope.spawn(move || {
                    for (id, req) in rx {
                        let reply = mine[id / threads].handle(req);
                        if answer_tx.send((id, reply)).is_err() {
                            break;
                        }
                    }
                });
                tx
            })
            .collect();
        Pool::Threads { jobs, answers }
    }

    /// Send one request per listed client; replies come back in client order.
    fn call(&mut self, requests: Vec<(usize, Request)>) -> Result<Vec<(usize, Reply)>, ProtocolError> {
        let mut out = Vec::with_capacity(requests.len());
        match self {
            Pool::Inline(clients) => {
                for (id, req) in requests {
                    out.push((id, clients[id].handle(req)?));
                }
            }
            Pool::Threads { jobs, answers } => {
                let n = requests.len();
                for (id, req) in requests {
                    jobs[id % jobs.len()].send((id, req)).map_err(|_| ProtocolError::Disconnected)?;
                }
                let mut first_err = None;
                for _ in 0..n {
                    let (id, reply) = answers.recv().map_err(|_| ProtocolError::Disconnected)?;
                    match reply {
                        Ok(r) => out.push((id, r)),
                        Err(e) => {
                            first_err.get_or_insert((id, e));
                        }
                    }
                }
                if let Some((_, e)) = first_err {
                    return Err(e);
                }
                out.sort_by_key(|(id, _)| *id);
            }
        }
        Ok(out)
    }
}

/// Run the whole protocol and return the model every client ends up with.
pub fn run_protocol(
    cfg: &RoundConfig,
    shape: &ModelShape,
    datasets: &[Dataset],
    keys: &SecretContext,
) -> Result<ProtocolOutput, ProtocolError> {
    cfg.validate()?;
    if datasets.len() != cfg.n_clients {
        return Err(ProtocolError::Config(format!("{} datasets for {} clients", datasets.len(), cfg.n_clients)));
    }
    for d in datasets {
        if d.input_dim() != shape.input_dim() || d.target_dim() != shape.output_dim() {
            return Err(ModelError::ShapeMismatch { expected: shape.input_dim(), got: d.input_dim() }.into());
        }
    }
    let audit = AuditLog::default();
    let initial = Arc::new(shape.init(cfg.seed).into_vec());
    let clients: Vec<Client<'_>> = datasets
        .iter()
        .enumerate()
        .map(|(id, data)| Client {
            ctx: ClientContext { id, data, shape, keys, cfg },
            audit: &audit,
            initial: Arc::clone(&initial),
            mask: None,
        })
        .collect();
    // From here on the server side sees only this.
    let pk = keys.public().clone();

    let output = std::thread::scope(|scope| {
        let mut pool = Pool::start(scope, clients, cfg.threads);
        let server = Server { pk: &pk, cfg, audit: &audit };
        server.run(&mut pool, shape.total_params(), &initial)
    })?;
    Ok(ProtocolOutput { audit: audit.events(), ..output })
}

struct Server<'a> {
    pk: &'a PublicContext,
    cfg: &'a RoundConfig,
    audit: &'a AuditLog,
}

impl Server<'_> {
    fn run(&self, pool: &mut Pool<'_>, n_params: usize, initial: &Arc<Vec<f64>>) -> Result<ProtocolOutput, ProtocolError> {
        let cfg = self.cfg;
        let all: Vec<usize> = (0..cfg.n_clients).collect();
        let mut metrics = Vec::new();

        let mask = self.agree_mask(pool, n_params, initial, &mut metrics)?;
        let mask_bytes = Arc::new(mask.to_bytes());
        pool.call(all.iter().map(|&c| (c, Request::InstallMask { mask: Arc::clone(&mask_bytes) })).collect())?;
        let expected_id = mask_id(&mask);

        let mut global: Option<Arc<WireModel>> = None;
        let mut epsilon_total = 0.0;
        for round in 1..=cfg.rounds {
            let present = cfg.present(round);
            let down = match &global {
                Some(g) => PartialModel::from_wire(g, self.pk)?.reported_bytes(self.pk),
                None => 0,
            };
            let replies = pool.call(
                present.iter().map(|&c| (c, Request::Train { round, global: global.clone() })).collect(),
            )?;

            let mut uploads = Vec::with_capacity(replies.len());
            let mut rows = Vec::with_capacity(replies.len());
            let mut epsilon_round = 0.0f64;
            for (client, reply) in replies {
                let Reply::Upload { model, epsilon, enc_ms, dec_ms, train_ms } = reply else {
                    return Err(ProtocolError::UnexpectedReply { client });
                };
                let pm = PartialModel::from_wire(&model, self.pk)?;
                if pm.mask_id != expected_id || pm.round != round {
                    return Err(ProtocolError::MaskMismatch { client, round });
                }
                epsilon_round = epsilon_round.max(epsilon);
                let mut row = MetricRow::new(round, Some(client), "train");
                row.bytes_up = pm.reported_bytes(self.pk);
                row.bytes_down = down;
                row.enc_ms = enc_ms;
                row.dec_ms = dec_ms;
                row.train_ms = train_ms;
                rows.push(row);
                uploads.push(pm);
            }

            let weights = handle_dropout(&all, &present, &cfg.weights)?;
            self.audit.record(Party::Server, Action::Aggregate, round);
            let refs: Vec<&PartialModel> = uploads.iter().collect();
            let (aggregate, agg_ms) = timed(cfg.timings, || server_aggregate(self.pk, &refs, &weights, round));
            let aggregate = aggregate?;

            epsilon_total += epsilon_round;
            let mut server_row = MetricRow::new(round, None, "aggregate");
            server_row.agg_ms = agg_ms;
            rows.push(server_row);
            for row in &mut rows {
                row.epsilon_round = epsilon_round;
                row.epsilon_total = epsilon_total;
            }
            metrics.extend(rows);
            global = Some(Arc::new(aggregate.to_wire(self.pk)));
        }

        // Any key holder can open the final model; the first client does.
        let global = global.expect("rounds >= 1");
        let mut opened = pool.call(vec![(0, Request::Open { global: Arc::clone(&global) })])?;
        let (client, reply) = opened.pop().expect("one reply");
        let Reply::Opened { model, dec_ms } = reply else {
            return Err(ProtocolError::UnexpectedReply { client });
        };
        let mut row = MetricRow::new(cfg.rounds, Some(client), "final");
        row.bytes_down = PartialModel::from_wire(&global, self.pk)?.reported_bytes(self.pk);
        row.dec_ms = dec_ms;
        row.epsilon_total = epsilon_total;
        metrics.push(row);

        Ok(ProtocolOutput { final_model: model, mask, metrics, audit: Vec::new(), epsilon_total })
    }

    /// Encrypted sensitivity round. With `p` at 0 or 1 the mask does not
    /// depend on the scores, so the round is skipped.
    fn agree_mask(
        &self,
        pool: &mut Pool<'_>,
        n_params: usize,
        initial: &Arc<Vec<f64>>,
        metrics: &mut Vec<MetricRow>,
    ) -> Result<EncryptionMask, ProtocolError> {
        let cfg = self.cfg;
        if cfg.mask_ratio == 0.0 {
            return Ok(EncryptionMask::empty(n_params));
        }
        if cfg.mask_ratio == 1.0 {
            return Ok(EncryptionMask::full(n_params));
        }
        // clients dropped from round 1 also sit out mask agreement
        let present = cfg.present(1);
        let replies = pool.call(present.iter().map(|&c| (c, Request::Map { initial: Arc::clone(initial) })).collect())?;
        let mut maps = Vec::with_capacity(replies.len());
        let mut rows = Vec::with_capacity(replies.len());
        for (client, reply) in replies {
            let Reply::Map { bytes, enc_ms } = reply else {
                return Err(ProtocolError::UnexpectedReply { client });
            };
            let ct = self.pk.deserialize(&bytes)?;
            let mut row = MetricRow::new(0, Some(client), "mask");
            row.bytes_up = self.pk.reported_bytes(&ct);
            row.enc_ms = enc_ms;
            rows.push(row);
            maps.push(ct);
        }
        let weights = handle_dropout(&(0..cfg.n_clients).collect::<Vec<_>>(), &present, &cfg.weights)?;
        self.audit.record(Party::Server, Action::Aggregate, 0);
        let (aggregate, agg_ms) = timed(cfg.timings, || sensitivity::aggregate_maps(self.pk, &maps, &normalized(&weights)));
        let aggregate = aggregate?;
        let agg_bytes = Arc::new(self.pk.serialize(&aggregate));

        let selector = present[0];
        let mut selected = pool.call(vec![(selector, Request::Select { aggregate: Arc::clone(&agg_bytes) })])?;
        let (_, reply) = selected.pop().expect("one reply");
        let Reply::Mask { bytes, dec_ms } = reply else {
            return Err(ProtocolError::UnexpectedReply { client: selector });
        };
        let mask = EncryptionMask::from_bytes(&bytes)?;
        for row in &mut rows {
            row.bytes_down = bytes.len() as u64;
            if row.client == Some(selector) {
                row.bytes_down += self.pk.reported_bytes(&aggregate);
                row.bytes_up += bytes.len() as u64;
                row.dec_ms = dec_ms;
            }
        }
        let mut server_row = MetricRow::new(0, None, "mask");
        server_row.agg_ms = agg_ms;
        rows.push(server_row);
        metrics.extend(rows);
        Ok(mask)
    }
}

/// Sensitivity maps and the agreed mask, computed in one place instead of
/// over the message flow. Produces the same aggregate scores and mask as
/// [`run_protocol`]. Scores are empty when `p` is 0 or 1.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    /// Local maps of the clients present in round 1, by client id.
    pub local: Vec<(usize, Vec<f64>)>,
    pub aggregate: Vec<f64>,
    pub mask: EncryptionMask,
}

pub fn mask_plan(
    cfg: &RoundConfig,
    shape: &ModelShape,
    datasets: &[Dataset],
    keys: &SecretContext,
) -> Result<MaskPlan, ProtocolError> {
    cfg.validate()?;
    let initial = shape.init(cfg.seed).into_vec();
    let present = cfg.present(1);
    let mut local = Vec::with_capacity(present.len());
    let mut cts = Vec::with_capacity(present.len());
    for &id in &present {
        let data = datasets.get(id).ok_or_else(|| ProtocolError::Config(format!("no dataset for client {id}")))?;
        let ctx = ClientContext { id, data, shape, keys, cfg };
        let map = sensitivity::sensitivity(&initial, shape, data, cfg.loss, FdStep::default())?;
        local.push((id, map.scores));
        if cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0 {
            cts.push(keys.public().deserialize(&ctx.encrypted_map(&initial)?.0)?);
        }
    }
    let n = shape.total_params();
    if cts.is_empty() {
        let mask = if cfg.mask_ratio == 0.0 { EncryptionMask::empty(n) } else { EncryptionMask::full(n) };
        return Ok(MaskPlan { local, aggregate: Vec::new(), mask });
    }
    let weights = handle_dropout(&(0..cfg.n_clients).collect::<Vec<_>>(), &present, &cfg.weights)?;
    let aggregate = keys.decrypt_vector(&sensitivity::aggregate_maps(keys.public(), &cts, &normalized(&weights))?)?;
    let mask = select_mask(&aggregate, cfg.mask_ratio)?;
    Ok(MaskPlan { local, aggregate, mask })
}

/// Weights that sum to one to within rounding of the last term.
fn normalized(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}
