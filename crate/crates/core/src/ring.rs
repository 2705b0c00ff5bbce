//! Ring communication: message codec, token passing, faults, and byte
//! accounting.
//!
//! Wire format, little-endian:
//!
//! ```text
//! "DRRM" | version u16 | precision u16 | round u32 | sender u32 | P u32 | K u16 | d u16
//! P learngene weights | K·d class means | K·d class log-variances | crc32 u32
//! ```
//!
//! `precision` is the byte width of each scalar (4 by default, 8 for exact
//! replay). The checksum covers everything before it.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::class_stats::ClassStats;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DRRM";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;
pub const CHECKSUM_LEN: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    fn from_width(w: u16) -> Option<Self> {
        match w {
            4 => Some(Precision::F32),
            8 => Some(Precision::F64),
            _ => None,
        }
    }
}

/// Encoded size of a message carrying `p` learngene weights and a
/// `classes × dim` statistics bank.
pub fn message_len(p: usize, classes: usize, dim: usize, precision: Precision) -> usize {
    HEADER_LEN + precision.width() * (p + 2 * classes * dim) + CHECKSUM_LEN
}

#[derive(Clone, Debug, PartialEq)]
pub struct RingMessage {
    pub round: u32,
    pub sender: u32,
    pub learngene: Vec<f64>,
    pub stats: ClassStats,
}

impl RingMessage {
    pub fn encoded_len(&self, precision: Precision) -> usize {
        message_len(self.learngene.len(), self.stats.classes, self.stats.dim, precision)
    }

    pub fn encode(&self, precision: Precision) -> Result<Vec<u8>> {
        let s = &self.stats;
        if s.means.len() != s.classes * s.dim || s.logvars.len() != s.classes * s.dim {
            return Err(Error::shape("encode", &[s.classes, s.dim], &[s.means.len(), s.logvars.len()]));
        }
        let p = u32::try_from(self.learngene.len()).map_err(|_| Error::Config("learngene too large".into()))?;
        let k = u16::try_from(s.classes).map_err(|_| Error::Config("too many classes for wire".into()))?;
        let d = u16::try_from(s.dim).map_err(|_| Error::Config("latent too wide for wire".into()))?;

        let mut out = Vec::with_capacity(self.encoded_len(precision));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(precision.width() as u16).to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&p.to_le_bytes());
        out.extend_from_slice(&k.to_le_bytes());
        out.extend_from_slice(&d.to_le_bytes());
        for &v in self.learngene.iter().chain(&s.means).chain(&s.logvars) {
            match precision {
                Precision::F32 => {
                    let f = v as f32;
                    if !f.is_finite() {
                        return Err(Error::NonFinite { op: "encode" });
                    }
                    out.extend_from_slice(&f.to_le_bytes());
                }
                Precision::F64 => {
                    if !v.is_finite() {
                        return Err(Error::NonFinite { op: "encode" });
                    }
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN + CHECKSUM_LEN,
                actual: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "bad magic, expected DRRM".into(),
            });
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != VERSION {
            return Err(Error::Parse {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let precision = Precision::from_width(u16_at(6)).ok_or_else(|| Error::Parse {
            offset: 6,
            message: format!("unsupported scalar width {}", u16_at(6)),
        })?;
        let (round, sender, p) = (u32_at(8), u32_at(12), u32_at(16) as usize);
        let (k, d) = (u16_at(20) as usize, u16_at(22) as usize);
        let expected = message_len(p, k, d, precision);
        if bytes.len() != expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        let body = expected - CHECKSUM_LEN;
        let stored = u32_at(body);
        let computed = crc32fast::hash(&bytes[..body]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let w = precision.width();
        let values: Vec<f64> = bytes[HEADER_LEN..body]
            .chunks_exact(w)
            .map(|c| match precision {
                Precision::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                Precision::F64 => f64::from_le_bytes(c.try_into().unwrap()),
            })
            .collect();
        let (learngene, rest) = values.split_at(p);
        let (means, logvars) = rest.split_at(k * d);
        Ok(RingMessage {
            round,
            sender,
            learngene: learngene.to_vec(),
            stats: ClassStats {
                classes: k,
                dim: d,
                means: means.to_vec(),
                logvars: logvars.to_vec(),
            },
        })
    }
}

/// `local ← (local + received) / 2`, elementwise.
pub fn merge_learngene(local: &mut [f64], received: &[f64]) -> Result<()> {
    if local.len() != received.len() {
        return Err(Error::shape("merge_learngene", &[local.len()], &[received.len()]));
    }
    for (l, &r) in local.iter_mut().zip(received) {
        *l = (*l + r) / 2.0;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RingMode {
    /// One token circulates; each client trains on its predecessor's
    /// freshest message.
    #[default]
    Sequential,
    /// Every client reads its predecessor's message from the end of the
    /// previous round and all train at once.
    ParallelSnapshot,
}

impl FromStr for RingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(RingMode::Sequential),
            "parallel" | "parallel_snapshot" => Ok(RingMode::ParallelSnapshot),
            _ => Err(Error::Config(format!("mode must be sequential or parallel, got {s:?}"))),
        }
    }
}

/// Result of moving the token one hop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hop {
    pub to: usize,
    /// Dead clients jumped over, in ring order.
    pub skipped: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingTopology {
    order: Vec<usize>,
    position: Vec<usize>,
    alive: Vec<bool>,
}

impl RingTopology {
    /// `order` must be a permutation of `0..M`.
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let m = order.len();
        let mut position = vec![usize::MAX; m];
        for (i, &c) in order.iter().enumerate() {
            if c >= m || position[c] != usize::MAX {
                return Err(Error::Config(format!("ring order {order:?} is not a permutation")));
            }
            position[c] = i;
        }
        if m == 0 {
            return Err(Error::Config("ring needs at least one client".into()));
        }
        Ok(RingTopology {
            order,
            position,
            alive: vec![true; m],
        })
    }

    pub fn identity(m: usize) -> Result<Self> {
        Self::new((0..m).collect())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn is_alive(&self, client: usize) -> bool {
        self.alive[client]
    }

    pub fn set_alive(&mut self, client: usize, alive: bool) {
        self.alive[client] = alive;
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    /// Next alive client clockwise from `from`.
    pub fn advance_token(&self, from: usize) -> Result<Hop> {
        let m = self.len();
        let p = self.position[from];
        let mut skipped = Vec::new();
        for step in 1..m {
            let c = self.order[(p + step) % m];
            if self.alive[c] {
                return Ok(Hop { to: c, skipped });
            }
            skipped.push(c);
        }
        Err(Error::LocalOnlyRound)
    }

    /// Nearest alive client counter-clockwise from `of`.
    pub fn predecessor(&self, of: usize) -> Option<usize> {
        let m = self.len();
        let p = self.position[of];
        (1..m)
            .map(|step| self.order[(p + m - step) % m])
            .find(|&c| self.alive[c])
    }

    /// Alive clients in ring order, starting from position `start` (or the
    /// first alive one after it).
    pub fn alive_from(&self, start: usize) -> Vec<usize> {
        let m = self.len();
        (0..m)
            .map(|i| self.order[(start + i) % m])
            .filter(|&c| self.alive[c])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub round: usize,
    pub client: usize,
    pub down: bool,
}

impl FromStr for FaultEvent {
    type Err = Error;

    /// `round:client` takes a client down; `round:client:up` revives it.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("fault must be round:client[:up|:down], got {s:?}"));
        let mut parts = s.split(':');
        let round = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let client = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let down = match parts.next() {
            None | Some("down") => true,
            Some("up") => false,
            Some(_) => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(FaultEvent { round, client, down })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RingEvent {
    Fault { round: usize, client: usize, down: bool },
    Skip { round: usize, from: usize, dead: usize },
    LocalOnly { round: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub messages: u64,
    pub bytes: u64,
    pub per_round: Vec<u64>,
    pub sent_by_client: Vec<u64>,
}

impl CommLedger {
    fn record(&mut self, round: usize, sender: usize, bytes: usize) {
        if self.per_round.len() <= round {
            self.per_round.resize(round + 1, 0);
        }
        self.per_round[round] += bytes as u64;
        self.sent_by_client[sender] += bytes as u64;
        self.bytes += bytes as u64;
        self.messages += 1;
    }
}

/// A participant in the ring. `inherited` is the decoded message from the
/// predecessor, or `None` when there is nothing to inherit (round 0,
/// isolated client, communication disabled).
pub trait RingNode {
    fn step(&mut self, round: usize, inherited: Option<&RingMessage>) -> Result<RingMessage>;
}

/// One client's turn within a round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub client: usize,
    /// Sender of the inherited message, if any.
    pub from: Option<usize>,
    /// Bytes emitted toward the successor (0 when nothing was sent).
    pub bytes_sent: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub visits: Vec<Visit>,
    pub messages: usize,
    pub bytes: u64,
    pub skips: usize,
    pub local_only: bool,
}

#[derive(Clone, Debug)]
pub struct RingConfig {
    pub mode: RingMode,
    pub precision: Precision,
    /// When false every client trains alone and nothing is sent.
    pub communicate: bool,
    pub faults: Vec<FaultEvent>,
    pub trace_dir: Option<PathBuf>,
}

impl Default for RingConfig {
    fn default() -> Self {
        RingConfig {
            mode: RingMode::Sequential,
            precision: Precision::F32,
            communicate: true,
            faults: Vec::new(),
            trace_dir: None,
        }
    }
}

/// Ring state across rounds: liveness, the last message each client put on
/// the wire, the byte ledger, and the event log.
#[derive(Debug)]
pub struct Ring {
    topology: RingTopology,
    config: RingConfig,
    outbox: Vec<Option<Vec<u8>>>,
    ledger: CommLedger,
    events: Vec<RingEvent>,
}

impl Ring {
    pub fn new(topology: RingTopology, config: RingConfig) -> Result<Self> {
        let m = topology.len();
        if let Some(f) = config.faults.iter().find(|f| f.client >= m) {
            return Err(Error::Config(format!("fault names client {} but M = {m}", f.client)));
        }
        Ok(Ring {
            topology,
            config,
            outbox: vec![None; m],
            ledger: CommLedger {
                sent_by_client: vec![0; m],
                ..CommLedger::default()
            },
            events: Vec::new(),
        })
    }

    pub fn topology(&self) -> &RingTopology {
        &self.topology
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn events(&self) -> &[RingEvent] {
        &self.events
    }

    pub fn config(&self) -> &RingConfig {
        &self.config
    }

    /// Last bytes `client` put on the wire.
    pub fn outbox(&self, client: usize) -> Option<&[u8]> {
        self.outbox[client].as_deref()
    }

    fn apply_faults(&mut self, round: usize) {
        for f in self.config.faults.iter().filter(|f| f.round == round) {
            self.topology.set_alive(f.client, !f.down);
            self.events.push(RingEvent::Fault {
                round,
                client: f.client,
                down: f.down,
            });
        }
    }

    fn inherited(&self, client: usize, source: &[Option<Vec<u8>>]) -> Result<Option<(usize, RingMessage)>> {
        if !self.config.communicate {
            return Ok(None);
        }
        match self.topology.predecessor(client) {
            Some(p) => source[p]
                .as_deref()
                .map(|b| RingMessage::decode(b).map(|m| (p, m)))
                .transpose(),
            None => Ok(None),
        }
    }

    /// Run one round over `nodes`, indexed by client id.
    pub fn run_round<N: RingNode + Send>(&mut self, round: usize, nodes: &mut [N]) -> Result<RoundReport> {
        if nodes.len() != self.topology.len() {
            return Err(Error::shape("run_round", &[self.topology.len()], &[nodes.len()]));
        }
        self.apply_faults(round);
        if self.topology.alive_count() == 0 {
            return Err(Error::Config(format!("round {round}: no alive clients")));
        }
        let m = self.topology.len();
        let visiting = self.topology.alive_from(round % m);
        let local_only = visiting.len() == 1 && self.config.communicate;
        if local_only {
            self.events.push(RingEvent::LocalOnly { round });
        }
        let sends = self.config.communicate && !local_only;

        let emitted: Vec<(usize, Option<usize>, RingMessage)> = match self.config.mode {
            RingMode::Sequential => {
                let mut out = Vec::with_capacity(visiting.len());
                for &c in &visiting {
                    let inherited = self.inherited(c, &self.outbox)?;
                    let from = inherited.as_ref().map(|(p, _)| *p);
                    let msg = nodes[c].step(round, inherited.as_ref().map(|(_, m)| m))?;
                    if sends {
                        self.outbox[c] = Some(msg.encode(self.config.precision)?);
                    }
                    out.push((c, from, msg));
                }
                out
            }
            RingMode::ParallelSnapshot => {
                let snapshot = self.outbox.clone();
                let inputs: Vec<Option<(usize, RingMessage)>> = visiting
                    .iter()
                    .map(|&c| self.inherited(c, &snapshot))
                    .collect::<Result<_>>()?;
                let mut alive_nodes: Vec<(usize, &mut N)> = nodes
                    .iter_mut()
                    .enumerate()
                    .filter(|(c, _)| self.topology.is_alive(*c))
                    .collect();
                // `visiting` is a rotation of the alive set; realign inputs by id.
                alive_nodes.sort_by_key(|(c, _)| visiting.iter().position(|v| v == c));
                let msgs: Vec<Result<RingMessage>> = alive_nodes
                    .par_iter_mut()
                    .zip(inputs.par_iter())
                    .map(|((_, node), inh)| node.step(round, inh.as_ref().map(|(_, m)| m)))
                    .collect();
                let mut out = Vec::with_capacity(visiting.len());
                for ((&c, inh), msg) in visiting.iter().zip(inputs).zip(msgs) {
                    let msg = msg?;
                    if sends {
                        self.outbox[c] = Some(msg.encode(self.config.precision)?);
                    }
                    out.push((c, inh.map(|(p, _)| p), msg));
                }
                out
            }
        };

        let mut report = RoundReport {
            round,
            visits: Vec::with_capacity(emitted.len()),
            messages: 0,
            bytes: 0,
            skips: 0,
            local_only,
        };
        let mut trace = Vec::new();
        for (c, from, _) in &emitted {
            let mut bytes_sent = 0;
            if sends {
                let hop = self.topology.advance_token(*c)?;
                for dead in hop.skipped {
                    self.events.push(RingEvent::Skip {
                        round,
                        from: *c,
                        dead,
                    });
                    report.skips += 1;
                }
                let bytes = self.outbox[*c].as_deref().expect("sent message stored");
                bytes_sent = bytes.len();
                self.ledger.record(round, *c, bytes_sent);
                trace.extend_from_slice(bytes);
                report.messages += 1;
                report.bytes += bytes_sent as u64;
            }
            report.visits.push(Visit {
                client: *c,
                from: *from,
                bytes_sent,
            });
        }
        if self.ledger.per_round.len() <= round {
            self.ledger.per_round.resize(round + 1, 0);
        }
        if let Some(dir) = &self.config.trace_dir {
            write_trace(dir, round, &trace)?;
        }
        Ok(report)
    }
}

fn write_trace(dir: &Path, round: usize, bytes: &[u8]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("round_{round:04}.bin"));
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

/// Split a trace file back into messages.
pub fn read_trace(bytes: &[u8]) -> Result<Vec<RingMessage>> {
    let mut out = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        if rest.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                actual: rest.len(),
            });
        }
        let w = u16::from_le_bytes([rest[6], rest[7]]) as usize;
        let p = u32::from_le_bytes(rest[16..20].try_into().unwrap()) as usize;
        let k = u16::from_le_bytes([rest[20], rest[21]]) as usize;
        let d = u16::from_le_bytes([rest[22], rest[23]]) as usize;
        let n = (HEADER_LEN + w * (p + 2 * k * d) + CHECKSUM_LEN).min(rest.len());
        out.push(RingMessage::decode(&rest[..n])?);
        rest = &rest[n..];
    }
    Ok(out)
}
