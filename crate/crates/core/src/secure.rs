//! Secure model recombination.
//!
//! Before models reach the server, the K active clients exchange layers among
//! themselves in four stages, repeated `repeats` times:
//!
//! 1. each client draws `n` uniformly from `[n_low, n_high]`, picks `n`
//!    distinct layers and sends each one to a uniformly chosen peer;
//! 2. receivers buffer incoming layers by index and remember `(sender, index)`;
//! 3. for every remembered pair the receiver returns a uniformly chosen layer
//!    from that index's buffer to the sender;
//! 4. returned layers are buffered and every buffer is left with exactly one
//!    layer, which becomes that position of the client's new model.
//!
//! Clients are state machines that only interact through [`ProtocolMessage`]s
//! on a [`MessageBus`]. Layers travel sealed; the default [`TaggingSealer`]
//! only binds the payload to its nonce.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::{LayerBlock, LayeredModel, ModelList};
use crate::rng::{self, stream, SimRng};

/// Opaque layer transform applied before a layer leaves its owner.
pub trait Sealer {
    fn seal(&self, block: &LayerBlock, nonce: u64) -> Vec<u8>;
    fn unseal(&self, payload: &[u8], nonce: u64) -> Result<LayerBlock>;
}

/// Payload = nonce (8 bytes LE) followed by the block in the model container
/// format. No confidentiality; unsealing only checks the nonce binding.
#[derive(Clone, Copy, Debug, Default)]
pub struct TaggingSealer;

impl Sealer for TaggingSealer {
    fn seal(&self, block: &LayerBlock, nonce: u64) -> Vec<u8> {
        let single = LayeredModel::from_blocks(vec![LayerBlock {
            layer_index: 0,
            ..block.clone()
        }])
        .expect("a valid block forms a valid one-layer model");
        let mut out = nonce.to_le_bytes().to_vec();
        out.extend_from_slice(&(block.layer_index as u64).to_le_bytes());
        out.extend(io::encode_model(&single));
        out
    }

    fn unseal(&self, payload: &[u8], nonce: u64) -> Result<LayerBlock> {
        if payload.len() < 16 {
            return Err(Error::Format("sealed payload too short".into()));
        }
        let tag = u64::from_le_bytes(payload[..8].try_into().unwrap());
        if tag != nonce {
            return Err(Error::Format(format!("payload sealed under nonce {tag}, expected {nonce}")));
        }
        let index = u64::from_le_bytes(payload[8..16].try_into().unwrap()) as usize;
        let model = io::decode_model(&payload[16..])?;
        let block = model.layers[0].as_ref().clone();
        Ok(LayerBlock {
            layer_index: index,
            ..block
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedLayer {
    pub layer_index: usize,
    pub payload: Arc<[u8]>,
    pub nonce: u64,
    /// Parameter bytes of the underlying block; what traffic accounting charges.
    pub size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Stage1,
    Stage2,
    Stage3,
    Stage4,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Send,
    Return,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolMessage {
    pub kind: MessageKind,
    pub from: usize,
    pub to: usize,
    pub layer: SealedLayer,
}

#[derive(Clone, Debug)]
pub struct ClientProtocolState {
    pub client_id: usize,
    pub layer_buffers: Vec<Vec<SealedLayer>>,
    pub pending_returns: VecDeque<(usize, usize)>,
    pub phase: Phase,
    sent: usize,
    received_back: usize,
}

impl ClientProtocolState {
    /// Seals every layer of `model`, drawing nonces from `next_nonce`.
    pub fn from_model(client_id: usize, model: &LayeredModel, sealer: &dyn Sealer, next_nonce: &mut u64) -> Self {
        let layer_buffers = model
            .layers
            .iter()
            .map(|b| {
                let nonce = *next_nonce;
                *next_nonce += 1;
                vec![SealedLayer {
                    layer_index: b.layer_index,
                    payload: sealer.seal(b, nonce).into(),
                    nonce,
                    size: b.byte_size(),
                }]
            })
            .collect();
        Self {
            client_id,
            layer_buffers,
            pending_returns: VecDeque::new(),
            phase: Phase::Done,
            sent: 0,
            received_back: 0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layer_buffers.len()
    }

    fn begin(&mut self) -> Result<()> {
        if self.phase != Phase::Done {
            return Err(Error::Protocol(format!(
                "client {} starts a repetition in phase {:?}",
                self.client_id, self.phase
            )));
        }
        self.phase = Phase::Stage1;
        self.sent = 0;
        self.received_back = 0;
        Ok(())
    }

    /// Stage 1: send `n` distinct layers, each to one uniformly chosen peer.
    fn send_layers(&mut self, n: usize, peers: &[usize], rng: &mut SimRng, bus: &mut MessageBus) -> Result<()> {
        let others: Vec<usize> = peers.iter().copied().filter(|&p| p != self.client_id).collect();
        if n > 0 && others.is_empty() {
            return Err(Error::Protocol(format!("client {} has no peers", self.client_id)));
        }
        let mut chosen = rand::seq::index::sample(rng, self.num_layers(), n).into_vec();
        chosen.sort_unstable();
        for idx in chosen {
            let to = others[rng.random_range(0..others.len())];
            let layer = self.layer_buffers[idx].pop().ok_or_else(|| {
                Error::Protocol(format!("client {} buffer {idx} empty at stage 1", self.client_id))
            })?;
            bus.post(ProtocolMessage {
                kind: MessageKind::Send,
                from: self.client_id,
                to,
                layer,
            })?;
            self.sent += 1;
        }
        self.phase = Phase::Stage2;
        Ok(())
    }

    pub fn receive(&mut self, msg: ProtocolMessage) -> Result<()> {
        let idx = msg.layer.layer_index;
        if idx >= self.num_layers() {
            return Err(Error::Protocol(format!("layer index {idx} outside the architecture")));
        }
        match (self.phase, msg.kind) {
            (Phase::Stage2, MessageKind::Send) => {
                self.layer_buffers[idx].push(msg.layer);
                self.pending_returns.push_back((msg.from, idx));
            }
            (Phase::Stage4, MessageKind::Return) => {
                self.layer_buffers[idx].push(msg.layer);
                self.received_back += 1;
            }
            (phase, kind) => {
                return Err(Error::Protocol(format!(
                    "client {} got a {kind:?} message in phase {phase:?}",
                    self.client_id
                )))
            }
        }
        Ok(())
    }

    /// Stage 3: answer every buffered receipt with a random layer of that index.
    fn return_layers(&mut self, rng: &mut SimRng, bus: &mut MessageBus) -> Result<()> {
        self.phase = Phase::Stage3;
        while let Some((to, idx)) = self.pending_returns.pop_front() {
            let buf = &mut self.layer_buffers[idx];
            if buf.is_empty() {
                return Err(Error::Protocol(format!("client {} buffer {idx} empty at stage 3", self.client_id)));
            }
            let layer = buf.swap_remove(rng.random_range(0..buf.len()));
            bus.post(ProtocolMessage {
                kind: MessageKind::Return,
                from: self.client_id,
                to,
                layer,
            })?;
        }
        self.phase = Phase::Stage4;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if self.sent != self.received_back {
            return Err(Error::Protocol(format!(
                "client {} sent {} layers but got {} back",
                self.client_id, self.sent, self.received_back
            )));
        }
        if let Some((i, b)) = self.layer_buffers.iter().enumerate().find(|(_, b)| b.len() != 1) {
            return Err(Error::Protocol(format!(
                "client {} ends with {} layers at index {i}",
                self.client_id,
                b.len()
            )));
        }
        self.phase = Phase::Done;
        Ok(())
    }

    /// Unseals the single remaining layer of every buffer.
    pub fn materialize(&self, sealer: &dyn Sealer) -> Result<LayeredModel> {
        if self.phase != Phase::Done {
            return Err(Error::Protocol(format!("client {} is not done", self.client_id)));
        }
        let blocks = self
            .layer_buffers
            .iter()
            .map(|b| sealer.unseal(&b[0].payload, b[0].nonce))
            .collect::<Result<Vec<_>>>()?;
        LayeredModel::from_blocks(blocks)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeliveryPolicy {
    Fifo,
    /// Delivers pending messages in a seeded random order.
    Shuffled { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub repetition: usize,
    /// Protocol stage that emitted the message (1 = send, 3 = return).
    pub stage: u8,
    pub kind: MessageKind,
    pub from: usize,
    pub to: usize,
    pub layer_index: usize,
    pub nonce: u64,
    pub bytes: usize,
}

/// In-memory message queue with delivery-order control and a trace.
pub struct MessageBus {
    queue: VecDeque<ProtocolMessage>,
    shuffle: Option<SimRng>,
    repetition: usize,
    trace: Vec<TraceEvent>,
}

impl MessageBus {
    pub fn new(policy: DeliveryPolicy) -> Self {
        Self {
            queue: VecDeque::new(),
            shuffle: match policy {
                DeliveryPolicy::Fifo => None,
                DeliveryPolicy::Shuffled { seed } => Some(rng::rng_for(seed, &[stream::BUS])),
            },
            repetition: 0,
            trace: Vec::new(),
        }
    }

    pub fn post(&mut self, msg: ProtocolMessage) -> Result<()> {
        if msg.from == msg.to {
            return Err(Error::Protocol(format!("client {} messaged itself", msg.from)));
        }
        self.queue.push_back(msg);
        Ok(())
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<TraceEvent> {
        self.trace
    }

    fn next(&mut self) -> Option<ProtocolMessage> {
        match &mut self.shuffle {
            None => self.queue.pop_front(),
            Some(rng) if !self.queue.is_empty() => {
                let i = rng.random_range(0..self.queue.len());
                self.queue.swap_remove_back(i)
            }
            Some(_) => None,
        }
    }

    /// Delivers everything queued, recording each delivery in the trace.
    pub fn deliver_all(&mut self, clients: &mut [ClientProtocolState]) -> Result<usize> {
        let slots: HashMap<usize, usize> = clients.iter().enumerate().map(|(i, c)| (c.client_id, i)).collect();
        let mut delivered = 0;
        while let Some(msg) = self.next() {
            let slot = *slots.get(&msg.to).ok_or(Error::Routing { to: msg.to })?;
            self.trace.push(TraceEvent {
                repetition: self.repetition,
                stage: match msg.kind {
                    MessageKind::Send => 1,
                    MessageKind::Return => 3,
                },
                kind: msg.kind,
                from: msg.from,
                to: msg.to,
                layer_index: msg.layer.layer_index,
                nonce: msg.layer.nonce,
                bytes: msg.layer.size,
            });
            clients[slot].receive(msg)?;
            delivered += 1;
        }
        Ok(delivered)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecureConfig {
    pub repeats: usize,
    pub n_low: usize,
    pub n_high: usize,
    pub seed: u64,
}

impl SecureConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.n_low > self.n_high {
            return Err(Error::InvalidBounds(format!("n_low = {} > n_high = {}", self.n_low, self.n_high)));
        }
        if self.n_high > num_layers {
            return Err(Error::InvalidBounds(format!(
                "n_high = {} exceeds the layer count {num_layers}",
                self.n_high
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepetitionTraffic {
    pub sends: usize,
    pub returns: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub repetitions: Vec<RepetitionTraffic>,
}

impl TrafficReport {
    pub fn total_messages(&self) -> usize {
        self.repetitions.iter().map(|r| r.sends + r.returns).sum()
    }

    pub fn total_bytes(&self) -> usize {
        self.repetitions.iter().map(|r| r.bytes).sum()
    }
}

/// Runs `cfg.repeats` repetitions of the four-stage exchange over `clients`.
///
/// Client stage actions run in slot order; the bus decides delivery order.
/// With fewer than two clients nothing is exchanged.
pub fn secure_round(clients: &mut [ClientProtocolState], cfg: &SecureConfig, bus: &mut MessageBus) -> Result<TrafficReport> {
    let num_layers = clients.first().map_or(0, |c| c.num_layers());
    if let Some(c) = clients.iter().find(|c| c.num_layers() != num_layers) {
        return Err(Error::ShapeMismatch(format!(
            "client {} holds {} layers, expected {num_layers}",
            c.client_id,
            c.num_layers()
        )));
    }
    cfg.validate(num_layers)?;
    let mut report = TrafficReport::default();
    if clients.len() < 2 {
        return Ok(report);
    }
    let peers: Vec<usize> = clients.iter().map(|c| c.client_id).collect();

    for rep in 0..cfg.repeats {
        bus.repetition = rep;
        let trace_start = bus.trace.len();
        let mut rngs: Vec<SimRng> = clients
            .iter()
            .map(|c| rng::rng_for(cfg.seed, &[stream::SECURE, rep as u64, c.client_id as u64]))
            .collect();

        for (client, rng) in clients.iter_mut().zip(&mut rngs) {
            client.begin()?;
            let n = rng.random_range(cfg.n_low..=cfg.n_high);
            client.send_layers(n, &peers, rng, bus)?;
        }
        bus.deliver_all(clients)?;
        for (client, rng) in clients.iter_mut().zip(&mut rngs) {
            client.return_layers(rng, bus)?;
        }
        bus.deliver_all(clients)?;
        for client in clients.iter_mut() {
            client.finish()?;
        }

        let events = &bus.trace[trace_start..];
        report.repetitions.push(RepetitionTraffic {
            sends: events.iter().filter(|e| e.kind == MessageKind::Send).count(),
            returns: events.iter().filter(|e| e.kind == MessageKind::Return).count(),
            bytes: events.iter().map(|e| e.bytes).sum(),
        });
    }
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct SecureOutcome {
    pub models: ModelList,
    pub report: TrafficReport,
    pub trace: Vec<TraceEvent>,
}

/// Seals `models`, runs the exchange, and materializes the recombined models.
pub fn secure_recombine(
    models: &ModelList,
    cfg: &SecureConfig,
    policy: DeliveryPolicy,
    sealer: &dyn Sealer,
) -> Result<SecureOutcome> {
    let mut nonce = 0u64;
    let mut clients: Vec<ClientProtocolState> = models
        .iter()
        .enumerate()
        .map(|(id, m)| ClientProtocolState::from_model(id, m, sealer, &mut nonce))
        .collect();
    let mut bus = MessageBus::new(policy);
    let report = secure_round(&mut clients, cfg, &mut bus)?;
    let out = clients
        .iter()
        .map(|c| c.materialize(sealer))
        .collect::<Result<Vec<_>>>()?;
    Ok(SecureOutcome {
        models: ModelList::new(out)?,
        report,
        trace: bus.into_trace(),
    })
}

/// Closed-form expected traffic in parameter bytes:
/// `repeats * (n_high + n_low) * K / len(w) * size(w)`.
///
/// Exact when all layers have the same size; for unequal layers it is the
/// size-averaged approximation.
pub fn expected_overhead(cfg: &SecureConfig, k: usize, arch: &LayeredModel) -> f64 {
    let per_repetition =
        (cfg.n_high + cfg.n_low) as f64 * k as f64 / arch.num_layers() as f64 * arch.byte_size() as f64;
    cfg.repeats as f64 * per_repetition
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceReport {
    /// Honest client -> layers the colluders can attribute to it.
    pub identifiable: BTreeMap<usize, usize>,
    pub max_identifiable: usize,
}

/// Counts, per honest client, the layers whose origin colluders observe
/// directly: stage-1 sends of the first repetition that land on a colluder.
/// Later receipts are indistinguishable from re-shuffled layers.
pub fn collusion_probe(trace: &[TraceEvent], colluders: &BTreeSet<usize>) -> ProvenanceReport {
    let mut identifiable: BTreeMap<usize, usize> = trace
        .iter()
        .flat_map(|e| [e.from, e.to])
        .filter(|c| !colluders.contains(c))
        .map(|c| (c, 0))
        .collect();
    for e in trace {
        if e.repetition == 0
            && e.kind == MessageKind::Send
            && colluders.contains(&e.to)
            && !colluders.contains(&e.from)
        {
            *identifiable.entry(e.from).or_default() += 1;
        }
    }
    let max_identifiable = identifiable.values().copied().max().unwrap_or(0);
    ProvenanceReport {
        identifiable,
        max_identifiable,
    }
}

pub fn write_trace_jsonl<W: Write>(mut out: W, trace: &[TraceEvent]) -> Result<()> {
    for e in trace {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
