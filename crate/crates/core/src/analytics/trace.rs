//! Per-layer, per-epoch records of injected shift and scale noise.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::noise::NoiseDraw;
use crate::rng::{splitmix64, RngStream};
use crate::scalar::Scalar;

/// Values kept per (layer, epoch, kind) before reservoir sampling kicks in.
pub const DEFAULT_TRACE_CAPACITY: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Shift,
    Scale,
}

impl NoiseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Shift => "shift",
            Self::Scale => "scale",
        }
    }
}

/// Serialized form of one trace component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub layer: String,
    pub epoch: u64,
    pub kind: NoiseKind,
    pub values: Vec<f64>,
}

impl TraceRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace records always serialize")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// CSV with header `layer,epoch,kind,value`, one row per value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,epoch,kind,value\n");
        for v in &self.values {
            let _ = writeln!(out, "{},{},{},{}", self.layer, self.epoch, self.kind.as_str(), v);
        }
        out
    }
}

/// Fixed-capacity uniform sample (Algorithm R).
#[derive(Debug, Clone)]
struct Reservoir {
    values: Vec<f64>,
    seen: u64,
    capacity: usize,
    rng: RngStream,
}

impl Reservoir {
    fn new(capacity: usize, rng: RngStream) -> Self {
        Self { values: Vec::new(), seen: 0, capacity, rng }
    }

    fn push(&mut self, v: f64) {
        self.seen += 1;
        if self.values.len() < self.capacity {
            self.values.push(v);
        } else {
            let j = self.rng.index(self.seen as usize);
            if j < self.capacity {
                self.values[j] = v;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseTrace {
    pub layer: String,
    pub epoch: u64,
    /// Restrict recording to one channel.
    pub channel: Option<usize>,
    shift: Reservoir,
    scale: Reservoir,
}

impl NoiseTrace {
    pub fn new(layer: impl Into<String>, epoch: u64) -> Self {
        Self::with_capacity(layer, epoch, DEFAULT_TRACE_CAPACITY)
    }

    pub fn with_capacity(layer: impl Into<String>, epoch: u64, capacity: usize) -> Self {
        let layer = layer.into();
        let tag = layer.bytes().fold(epoch, |h, b| splitmix64(h ^ b as u64));
        let rng = RngStream::new(tag, 0x7ace);
        Self { layer, epoch, channel: None, shift: Reservoir::new(capacity, rng.derive(0)), scale: Reservoir::new(capacity, rng.derive(1)) }
    }

    pub fn for_channel(mut self, channel: usize) -> Self {
        self.channel = Some(channel);
        self
    }

    /// Appends every (sample, channel) shift and scale value of `draw`.
    pub fn record<T: Scalar>(&mut self, draw: &NoiseDraw<T>) {
        for (i, (&sh, &sc)) in draw.shift.iter().zip(&draw.scale).enumerate() {
            if self.channel.is_some_and(|c| c != i % draw.channels) {
                continue;
            }
            self.shift.push(sh.to_f64_lossy());
            self.scale.push(sc.to_f64_lossy());
        }
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift.values
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale.values
    }

    /// Total values offered, including those the reservoir dropped.
    pub fn seen(&self) -> u64 {
        self.shift.seen
    }

    pub fn is_empty(&self) -> bool {
        self.shift.values.is_empty()
    }

    pub fn records(&self) -> [TraceRecord; 2] {
        let rec = |kind, values: &[f64]| TraceRecord { layer: self.layer.clone(), epoch: self.epoch, kind, values: values.to_vec() };
        [rec(NoiseKind::Shift, self.shift()), rec(NoiseKind::Scale, self.scale())]
    }

    /// Rebuilds a trace from its two serialized components.
    pub fn from_records(shift: &TraceRecord, scale: &TraceRecord) -> Self {
        let mut t = Self::with_capacity(shift.layer.clone(), shift.epoch, DEFAULT_TRACE_CAPACITY.max(shift.values.len()));
        t.shift.values = shift.values.clone();
        t.shift.seen = shift.values.len() as u64;
        t.scale.values = scale.values.clone();
        t.scale.seen = scale.values.len() as u64;
        t
    }
}
