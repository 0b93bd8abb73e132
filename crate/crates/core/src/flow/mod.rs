//! Flow ingestion: packet events in, canonical bidirectional flows and
//! fixed-length direction-signed feature vectors out.
//!
//! A flow is keyed by its five-tuple with the two (addr, port) endpoints
//! ordered lexicographically, so both directions of a conversation land in
//! the same record. The sender of the flow's first packet defines the
//! positive sign of every packet length in the sequence.

mod ndjson;
mod pcap;

pub use ndjson::{
    parse_key_string, read_label_dict, read_records, write_label_dict, write_records,
    DatasetRecord, LabelDict,
};
pub use pcap::{read_pcap_events, PcapStats};

use std::collections::HashMap;
use std::fmt;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_PACKET_LEN: i64 = 65_535;

/// Default feature-vector length.
pub const DEFAULT_SEQ_LEN: usize = 32;
/// Default normalization divisor (Ethernet MTU); larger lengths clamp to ±1.
pub const DEFAULT_NORM_DIVISOR: u32 = 1500;
/// Default flow idle timeout in seconds.
pub const DEFAULT_IDLE_TIMEOUT_S: f64 = 64.0;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("event {index} out of order: ts {ts} < previous ts {prev}")]
    StreamOrder { index: usize, ts: i64, prev: i64 },
    #[error("event {index} invalid: {reason}")]
    InvalidEvent { index: usize, reason: String },
    #[error("flow has no packets after filtering")]
    EmptyFlow,
    #[error("idle timeout must be > 0, got {0}")]
    BadTimeout(f64),
    #[error("sequence length must be >= 1")]
    BadSeqLen,
    #[error("norm divisor must be >= 1")]
    BadDivisor,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("label dictionary invalid: {0}")]
    LabelDict(String),
    #[error("pcap: {0}")]
    Pcap(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
    Udp,
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transport::Tcp => write!(f, "tcp"),
            Transport::Udp => write!(f, "udp"),
        }
    }
}

/// Canonical bidirectional flow key. Endpoint `a` is lexicographically
/// `<=` endpoint `b`, so a flow and its reverse map to the same key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub addr_a: IpAddr,
    pub port_a: u16,
    pub addr_b: IpAddr,
    pub port_b: u16,
    pub transport: Transport,
}

impl FlowKey {
    /// Canonicalize a directed five-tuple. Returns the key plus whether the
    /// given source is endpoint `a`. Idempotent: re-canonicalizing either
    /// orientation yields the same key.
    pub fn canonical(
        src_addr: IpAddr,
        src_port: u16,
        dst_addr: IpAddr,
        dst_port: u16,
        transport: Transport,
    ) -> (FlowKey, bool) {
        let src = endpoint_ord(src_addr, src_port);
        let dst = endpoint_ord(dst_addr, dst_port);
        if src <= dst {
            (
                FlowKey {
                    addr_a: src_addr,
                    port_a: src_port,
                    addr_b: dst_addr,
                    port_b: dst_port,
                    transport,
                },
                true,
            )
        } else {
            (
                FlowKey {
                    addr_a: dst_addr,
                    port_a: dst_port,
                    addr_b: src_addr,
                    port_b: src_port,
                    transport,
                },
                false,
            )
        }
    }
}

fn endpoint_ord(addr: IpAddr, port: u16) -> (u8, u128, u16) {
    // IPv4 sorts before IPv6; within a family, by address bytes then port.
    match addr {
        IpAddr::V4(v4) => (4, u32::from(v4) as u128, port),
        IpAddr::V6(v6) => (6, u128::from(v6), port),
    }
}

/// One bidirectional flow: a direction-signed packet-length sequence plus
/// timing. Positive lengths travel in the direction of the flow's first
/// packet (the client); negative lengths are replies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub key: FlowKey,
    /// True when the client (first packet sender) is endpoint `a` of the key.
    pub client_is_a: bool,
    pub first_ts_us: i64,
    pub last_ts_us: i64,
    pub signed_lengths: Vec<i32>,
    pub label: Option<usize>,
}

impl FlowRecord {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.signed_lengths.is_empty() {
            return Err(FlowError::EmptyFlow);
        }
        for &l in &self.signed_lengths {
            if l == 0 || (l as i64).abs() > MAX_PACKET_LEN {
                return Err(FlowError::InvalidEvent {
                    index: 0,
                    reason: format!("signed length {l} out of range"),
                });
            }
        }
        if self.first_ts_us > self.last_ts_us {
            return Err(FlowError::InvalidEvent {
                index: 0,
                reason: "first_ts after last_ts".into(),
            });
        }
        Ok(())
    }

    /// `"tcp|udp:src:sport>dst:dport"` with the client endpoint first.
    pub fn key_string(&self) -> String {
        let (sa, sp, da, dp) = if self.client_is_a {
            (self.key.addr_a, self.key.port_a, self.key.addr_b, self.key.port_b)
        } else {
            (self.key.addr_b, self.key.port_b, self.key.addr_a, self.key.port_a)
        };
        format!("{}:{}:{}>{}:{}", self.key.transport, sa, sp, da, dp)
    }
}

/// Fixed-length normalized feature vector. Entries beyond `true_len` are
/// zero padding; every entry lies in [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub true_len: usize,
}

impl FeatureVector {
    pub fn from_lengths(lengths: &[i32], seq_len: usize, norm_divisor: u32) -> Result<Self, FlowError> {
        if seq_len == 0 {
            return Err(FlowError::BadSeqLen);
        }
        if norm_divisor == 0 {
            return Err(FlowError::BadDivisor);
        }
        if lengths.is_empty() {
            return Err(FlowError::EmptyFlow);
        }
        let true_len = lengths.len().min(seq_len);
        let div = norm_divisor as f64;
        let mut values = vec![0.0; seq_len];
        for (i, &l) in lengths.iter().take(true_len).enumerate() {
            values[i] = (l as f64 / div).clamp(-1.0, 1.0);
        }
        Ok(FeatureVector { values, true_len })
    }

    /// Recover integer packet lengths from the normalized entries. Exact for
    /// every length whose magnitude did not clamp at `norm_divisor`.
    pub fn to_lengths(&self, norm_divisor: u32) -> Vec<i32> {
        self.values[..self.true_len]
            .iter()
            .map(|v| (v * norm_divisor as f64).round() as i32)
            .collect()
    }
}

/// Feature extraction parameters shared by training, prediction, and pools.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub seq_len: usize,
    pub norm_divisor: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            seq_len: DEFAULT_SEQ_LEN,
            norm_divisor: DEFAULT_NORM_DIVISOR,
        }
    }
}

/// Normalize, clamp, truncate/pad a flow's length sequence into a feature
/// vector of exactly `seq_len` entries.
pub fn extract_features(
    flow: &FlowRecord,
    seq_len: usize,
    norm_divisor: u32,
) -> Result<FeatureVector, FlowError> {
    FeatureVector::from_lengths(&flow.signed_lengths, seq_len, norm_divisor)
}

/// One observed packet: a directed five-tuple at a timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketEvent {
    pub ts_us: i64,
    pub src_addr: IpAddr,
    pub src_port: u16,
    pub dst_addr: IpAddr,
    pub dst_port: u16,
    pub transport: Transport,
    pub payload_len: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub packets_in: usize,
    pub zero_payload_dropped: usize,
    pub flows_emitted: usize,
    pub empty_flows_discarded: usize,
}

struct OpenFlow {
    client_is_a: bool,
    first_ts_us: i64,
    last_ts_us: i64,
    signed_lengths: Vec<i32>,
}

/// Single-writer flow table. Push events in timestamp order; flows seal when
/// their idle gap reaches the timeout or at [`FlowAssembler::finish`].
///
/// Zero-payload packets (pure ACKs) keep a flow alive and may define its
/// orientation, but contribute no sequence entry. A flow left with no
/// entries is discarded and counted.
pub struct FlowAssembler {
    idle_timeout_us: i64,
    table: HashMap<FlowKey, OpenFlow>,
    last_ts_us: Option<i64>,
    next_index: usize,
    stats: IngestStats,
}

impl FlowAssembler {
    pub fn new(idle_timeout_s: f64) -> Result<Self, FlowError> {
        if !(idle_timeout_s > 0.0) {
            return Err(FlowError::BadTimeout(idle_timeout_s));
        }
        Ok(FlowAssembler {
            idle_timeout_us: (idle_timeout_s * 1e6).round() as i64,
            table: HashMap::new(),
            last_ts_us: None,
            next_index: 0,
            stats: IngestStats::default(),
        })
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    /// Feed one event; returns any flow sealed by an idle-timeout rollover.
    pub fn push(&mut self, ev: &PacketEvent) -> Result<Option<FlowRecord>, FlowError> {
        let index = self.next_index;
        self.next_index += 1;
        if let Some(prev) = self.last_ts_us {
            if ev.ts_us < prev {
                return Err(FlowError::StreamOrder {
                    index,
                    ts: ev.ts_us,
                    prev,
                });
            }
        }
        self.last_ts_us = Some(ev.ts_us);
        if ev.payload_len as i64 > MAX_PACKET_LEN {
            return Err(FlowError::InvalidEvent {
                index,
                reason: format!("payload length {} exceeds {}", ev.payload_len, MAX_PACKET_LEN),
            });
        }
        self.stats.packets_in += 1;
        if ev.payload_len == 0 {
            self.stats.zero_payload_dropped += 1;
        }

        let (key, src_is_a) = FlowKey::canonical(
            ev.src_addr,
            ev.src_port,
            ev.dst_addr,
            ev.dst_port,
            ev.transport,
        );

        let mut sealed = None;
        if let Some(open) = self.table.get(&key) {
            if ev.ts_us - open.last_ts_us >= self.idle_timeout_us {
                let open = self.table.remove(&key).unwrap();
                sealed = self.seal(key, open);
            }
        }

        let open = self.table.entry(key).or_insert_with(|| OpenFlow {
            client_is_a: src_is_a,
            first_ts_us: ev.ts_us,
            last_ts_us: ev.ts_us,
            signed_lengths: Vec::new(),
        });
        open.last_ts_us = ev.ts_us;
        if ev.payload_len > 0 {
            let sign = if src_is_a == open.client_is_a { 1 } else { -1 };
            open.signed_lengths.push(sign * ev.payload_len as i32);
        }
        Ok(sealed)
    }

    /// Seal every remaining flow, ordered by (first_ts, key string) so the
    /// output is a deterministic function of the event stream.
    pub fn finish(mut self) -> (Vec<FlowRecord>, IngestStats) {
        let drained: Vec<(FlowKey, OpenFlow)> = self.table.drain().collect();
        let mut records: Vec<FlowRecord> = drained
            .into_iter()
            .filter_map(|(key, open)| Self::seal_inner(key, open, &mut self.stats))
            .collect();
        records.sort_by(|x, y| {
            (x.first_ts_us, x.key_string()).cmp(&(y.first_ts_us, y.key_string()))
        });
        (records, self.stats)
    }

    fn seal(&mut self, key: FlowKey, open: OpenFlow) -> Option<FlowRecord> {
        Self::seal_inner(key, open, &mut self.stats)
    }

    fn seal_inner(key: FlowKey, open: OpenFlow, stats: &mut IngestStats) -> Option<FlowRecord> {
        if open.signed_lengths.is_empty() {
            stats.empty_flows_discarded += 1;
            return None;
        }
        stats.flows_emitted += 1;
        Some(FlowRecord {
            key,
            client_is_a: open.client_is_a,
            first_ts_us: open.first_ts_us,
            last_ts_us: open.last_ts_us,
            signed_lengths: open.signed_lengths,
            label: None,
        })
    }
}

/// Assemble an ordered event stream into flows in one call.
///
/// Timeout-sealed flows appear in seal order, followed by the end-of-stream
/// flows in (first_ts, key) order.
pub fn assemble_flows(
    events: &[PacketEvent],
    idle_timeout_s: f64,
) -> Result<(Vec<FlowRecord>, IngestStats), FlowError> {
    let mut asm = FlowAssembler::new(idle_timeout_s)?;
    let mut out = Vec::new();
    for ev in events {
        if let Some(flow) = asm.push(ev)? {
            out.push(flow);
        }
    }
    let (mut rest, stats) = asm.finish();
    out.append(&mut rest);
    Ok((out, stats))
}
