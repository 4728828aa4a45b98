//! Energy-thresholded low-rank gradient compression and the packet codec.
//!
//! A gradient tensor of rank ≥ 2 is viewed as a matrix `shape[0] × rest`
//! (conv kernels become `filters × (in_channels·kernel)`), transposed if
//! needed so that `P ≥ Q`, and decomposed. The smallest rank `R` whose
//! leading singular values keep more than `eps` of the squared energy is
//! selected, and the factors are only sent when `PR + R² + RQ < PQ`.
//! Everything else travels raw.
//!
//! Wire format, little-endian:
//!
//! ```text
//! "FKDG0001" | u32 entry count | entries...
//! entry: u16 name len | name (UTF-8) | u8 mode | u8 precision
//!        | u32 ndims | u32 dims... | payload
//! RAW payload:     prod(dims) values
//! LOWRANK payload: u32 R | U (P×R) | sigma (R) | Vᵀ (R×Q), row-major
//! ```
//!
//! `mode` is 0 = RAW, 1 = LOWRANK, 2 = LOWRANK_T (factors describe the
//! transposed matrix); `precision` is 0 = f32, 1 = f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{thin_svd, Matrix};
use crate::nn::{matrix_dims, Tensor};

pub const PACKET_MAGIC: &[u8; 8] = b"FKDG0001";
/// Magic plus entry count.
pub const PACKET_HEADER_BYTES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WirePrecision {
    F32,
    F64,
}

impl WirePrecision {
    pub fn bytes(self) -> usize {
        match self {
            WirePrecision::F32 => 4,
            WirePrecision::F64 => 8,
        }
    }

    fn code(self) -> u8 {
        match self {
            WirePrecision::F32 => 0,
            WirePrecision::F64 => 1,
        }
    }

    /// Rounds to the nearest value representable at this precision.
    #[inline]
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            WirePrecision::F32 => v as f32 as f64,
            WirePrecision::F64 => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionPolicy {
    pub eps_start: f64,
    pub eps_end: f64,
    pub wire_precision: WirePrecision,
    /// When false every tensor is sent raw.
    pub enabled: bool,
}

impl Default for CompressionPolicy {
    fn default() -> Self {
        Self {
            eps_start: 0.9,
            eps_end: 0.9,
            wire_precision: WirePrecision::F32,
            enabled: true,
        }
    }
}

impl CompressionPolicy {
    pub fn raw(wire_precision: WirePrecision) -> Self {
        Self {
            enabled: false,
            wire_precision,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [("eps_start", self.eps_start), ("eps_end", self.eps_end)] {
            if !(v > 0.0 && v <= 1.0) {
                errs.push(format!("{name} must lie in (0, 1], got {v}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// `eps_start + (eps_end − eps_start)·rho`.
pub fn dynamic_threshold(rho: f64, policy: &CompressionPolicy) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::domain(format!(
            "training progress must lie in [0, 1], got {rho}"
        )));
    }
    Ok((1.0 - rho) * policy.eps_start + rho * policy.eps_end)
}

/// Progress of 1-based `round` out of `total_rounds`: `(t − 1)/(T − 1)`, and
/// 0 for single-round runs.
pub fn training_progress(round: usize, total_rounds: usize) -> f64 {
    if total_rounds <= 1 {
        0.0
    } else {
        (round.saturating_sub(1)).min(total_rounds - 1) as f64 / (total_rounds - 1) as f64
    }
}

/// Smallest `R` with `Σ_{j≤R} σ_j² / Σ σ_j² > eps`, clamped to `[1, Q]`.
/// Returns 0 for an all-zero spectrum.
pub fn select_rank(sigma: &[f64], eps: f64) -> Result<usize> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::domain(format!("energy threshold must lie in (0, 1], got {eps}")));
    }
    if sigma.windows(2).any(|w| w[0] < w[1]) || sigma.iter().any(|&s| s < 0.0 || !s.is_finite()) {
        return Err(Error::domain(
            "singular values must be finite, non-negative and non-increasing",
        ));
    }
    let mut cumulative = Vec::with_capacity(sigma.len());
    let mut acc = 0.0;
    for s in sigma {
        acc += s * s;
        cumulative.push(acc);
    }
    let total = acc;
    if total == 0.0 {
        return Ok(0);
    }
    let r = cumulative
        .iter()
        .position(|&c| c / total > eps)
        .map_or(sigma.len(), |i| i + 1);
    Ok(r)
}

/// `PR + R² + RQ < PQ`.
pub fn lowrank_is_beneficial(p: usize, q: usize, r: usize) -> bool {
    p * r + r * r + r * q < p * q
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryMode {
    Raw,
    LowRank,
    /// Factors of the transposed matrix.
    LowRankT,
}

impl EntryMode {
    fn code(self) -> u8 {
        match self {
            EntryMode::Raw => 0,
            EntryMode::LowRank => 1,
            EntryMode::LowRankT => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Raw(Vec<f64>),
    /// `u` is `P × R`, `vt` is `R × Q`, for the (possibly transposed) matrix
    /// with `P ≥ Q`.
    LowRank {
        u: Matrix,
        sigma: Vec<f64>,
        vt: Matrix,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub mode: EntryMode,
    pub precision: WirePrecision,
    pub payload: Payload,
}

impl PacketEntry {
    pub fn rank(&self) -> Option<usize> {
        match &self.payload {
            Payload::LowRank { sigma, .. } => Some(sigma.len()),
            Payload::Raw(_) => None,
        }
    }

    fn value_count(&self) -> usize {
        match &self.payload {
            Payload::Raw(v) => v.len(),
            Payload::LowRank { u, sigma, vt } => u.len() + sigma.len() + vt.len(),
        }
    }

    fn encoded_len(&self) -> usize {
        let mut n = 2 + self.name.len() + 1 + 1 + 4 + 4 * self.shape.len();
        if matches!(self.payload, Payload::LowRank { .. }) {
            n += 4;
        }
        n + self.value_count() * self.precision.bytes()
    }

    /// Dense reconstruction in the tensor's own matrix layout.
    pub fn reconstruct(&self) -> Result<Tensor> {
        let values = match &self.payload {
            Payload::Raw(v) => v.clone(),
            Payload::LowRank { u, sigma, vt } => {
                let mut us = u.clone();
                for i in 0..us.rows() {
                    for (k, s) in sigma.iter().enumerate() {
                        let v = us.get(i, k) * s;
                        us.set(i, k, v);
                    }
                }
                let m = us.matmul(vt)?;
                match self.mode {
                    EntryMode::LowRankT => m.transpose().into_data(),
                    _ => m.into_data(),
                }
            }
        };
        Tensor::from_values(self.name.clone(), self.shape.clone(), values)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientPacket {
    pub entries: Vec<PacketEntry>,
}

/// Per-packet compression diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CompressionStats {
    pub lowrank_layers: usize,
    pub raw_layers: usize,
    /// Layers sent raw because the SVD did not converge.
    pub svd_fallbacks: usize,
}

impl CompressionStats {
    pub fn merge(&mut self, other: CompressionStats) {
        self.lowrank_layers += other.lowrank_layers;
        self.raw_layers += other.raw_layers;
        self.svd_fallbacks += other.svd_fallbacks;
    }
}

pub fn raw_entry(t: &Tensor, precision: WirePrecision) -> PacketEntry {
    PacketEntry {
        name: t.name.clone(),
        shape: t.shape.clone(),
        mode: EntryMode::Raw,
        precision,
        payload: Payload::Raw(t.values.data().iter().map(|&v| precision.quantize(v)).collect()),
    }
}

#[derive(Debug, Clone)]
pub struct LayerCompression {
    pub entry: PacketEntry,
    pub svd_fallback: bool,
}

/// Compresses one tensor at threshold `eps`. Never fails: vectors, scalars,
/// zero gradients, unprofitable ranks and SVD failures all fall back to raw.
pub fn compress_layer(t: &Tensor, eps: f64, precision: WirePrecision) -> LayerCompression {
    let raw = |fallback| LayerCompression {
        entry: raw_entry(t, precision),
        svd_fallback: fallback,
    };
    if t.shape.len() < 2 || !(eps > 0.0 && eps <= 1.0) {
        return raw(false);
    }
    let (rows, cols) = (t.values.rows(), t.values.cols());
    let (g, mode) = if rows >= cols {
        (t.values.clone(), EntryMode::LowRank)
    } else {
        (t.values.transpose(), EntryMode::LowRankT)
    };
    let (p, q) = (g.rows(), g.cols());
    // No rank can pay off; skip the decomposition.
    if !lowrank_is_beneficial(p, q, 1) {
        return raw(false);
    }
    let svd = match thin_svd(&g) {
        Ok(s) => s,
        Err(_) => return raw(true),
    };
    let r = match select_rank(&svd.sigma, eps) {
        Ok(r) => r,
        Err(_) => return raw(true),
    };
    if r == 0 || !lowrank_is_beneficial(p, q, r) {
        return raw(false);
    }
    let u = Matrix::from_fn(p, r, |i, k| precision.quantize(svd.u.get(i, k)));
    let sigma = svd.sigma[..r].iter().map(|&s| precision.quantize(s)).collect();
    let vt = Matrix::from_fn(r, q, |k, j| precision.quantize(svd.v.get(j, k)));
    LayerCompression {
        entry: PacketEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            mode,
            precision,
            payload: Payload::LowRank { u, sigma, vt },
        },
        svd_fallback: false,
    }
}

/// Compresses every tensor at `eps`, or sends all raw when the policy is off.
pub fn compress_tensors(
    tensors: &[Tensor],
    eps: f64,
    policy: &CompressionPolicy,
) -> (GradientPacket, CompressionStats) {
    let mut stats = CompressionStats::default();
    let entries = tensors
        .iter()
        .map(|t| {
            let entry = if policy.enabled {
                let lc = compress_layer(t, eps, policy.wire_precision);
                if lc.svd_fallback {
                    stats.svd_fallbacks += 1;
                }
                lc.entry
            } else {
                raw_entry(t, policy.wire_precision)
            };
            match entry.mode {
                EntryMode::Raw => stats.raw_layers += 1,
                _ => stats.lowrank_layers += 1,
            }
            entry
        })
        .collect();
    (GradientPacket { entries }, stats)
}

/// Reconstructs every entry, checking names and shapes against `expected`
/// in order.
pub fn decompress(pkt: &GradientPacket, expected: &[(String, Vec<usize>)]) -> Result<Vec<Tensor>> {
    if pkt.entries.len() != expected.len() {
        return Err(Error::Decode {
            layer: "<packet>".into(),
            reason: format!("expected {} entries, found {}", expected.len(), pkt.entries.len()),
        });
    }
    pkt.entries
        .iter()
        .zip(expected)
        .map(|(e, (name, shape))| {
            if &e.name != name || &e.shape != shape {
                return Err(Error::Decode {
                    layer: name.clone(),
                    reason: format!("expected `{name}` {shape:?}, found `{}` {:?}", e.name, e.shape),
                });
            }
            e.reconstruct().map_err(|err| Error::Decode {
                layer: name.clone(),
                reason: err.to_string(),
            })
        })
        .collect()
}

/// Exact encoded length of the packet.
pub fn packet_size_bytes(pkt: &GradientPacket) -> usize {
    PACKET_HEADER_BYTES + pkt.entries.iter().map(PacketEntry::encoded_len).sum::<usize>()
}

pub fn encode(pkt: &GradientPacket) -> Vec<u8> {
    let mut out = Vec::with_capacity(packet_size_bytes(pkt));
    out.extend_from_slice(PACKET_MAGIC);
    out.extend_from_slice(&(pkt.entries.len() as u32).to_le_bytes());
    for e in &pkt.entries {
        let name = e.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.mode.code());
        out.push(e.precision.code());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &e.payload {
            Payload::Raw(v) => put_values(&mut out, v, e.precision),
            Payload::LowRank { u, sigma, vt } => {
                out.extend_from_slice(&(sigma.len() as u32).to_le_bytes());
                put_values(&mut out, u.data(), e.precision);
                put_values(&mut out, sigma, e.precision);
                put_values(&mut out, vt.data(), e.precision);
            }
        }
    }
    out
}

fn put_values(out: &mut Vec<u8>, values: &[f64], precision: WirePrecision) {
    for &v in values {
        match precision {
            WirePrecision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            WirePrecision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, layer: &str, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Decode {
                layer: layer.to_string(),
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, layer: &str, what: &str) -> Result<u8> {
        Ok(self.take(1, layer, what)?[0])
    }

    fn u16(&mut self, layer: &str, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, layer, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, layer: &str, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, layer, what)?.try_into().unwrap()))
    }

    fn values(&mut self, n: usize, precision: WirePrecision, layer: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.saturating_mul(precision.bytes()), layer, "values")?;
        Ok(match precision {
            WirePrecision::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            WirePrecision::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<GradientPacket> {
    let header = "<header>";
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8, header, "magic")? != PACKET_MAGIC {
        return Err(Error::Decode {
            layer: header.into(),
            reason: "bad magic".into(),
        });
    }
    let count = cur.u32(header, "entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for idx in 0..count {
        let placeholder = format!("<entry {idx}>");
        let name_len = cur.u16(&placeholder, "name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, &placeholder, "name")?)
            .map_err(|_| Error::Decode {
                layer: placeholder.clone(),
                reason: "name is not UTF-8".into(),
            })?
            .to_string();
        let bad = |reason: String| Error::Decode {
            layer: name.clone(),
            reason,
        };
        let mode = match cur.u8(&name, "mode")? {
            0 => EntryMode::Raw,
            1 => EntryMode::LowRank,
            2 => EntryMode::LowRankT,
            m => return Err(bad(format!("unknown mode {m}"))),
        };
        let precision = match cur.u8(&name, "precision")? {
            0 => WirePrecision::F32,
            1 => WirePrecision::F64,
            p => return Err(bad(format!("unknown precision {p}"))),
        };
        let ndims = cur.u32(&name, "dims count")? as usize;
        if ndims > 8 {
            return Err(bad(format!("implausible rank {ndims}")));
        }
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(cur.u32(&name, "dims")? as usize);
        }
        let (rows, cols) = matrix_dims(&shape);
        let payload = match mode {
            EntryMode::Raw => Payload::Raw(cur.values(rows * cols, precision, &name)?),
            EntryMode::LowRank | EntryMode::LowRankT => {
                let (p, q) = if mode == EntryMode::LowRankT {
                    (cols, rows)
                } else {
                    (rows, cols)
                };
                let r = cur.u32(&name, "rank")? as usize;
                if r == 0 || shape.len() < 2 || p < q {
                    return Err(bad(format!("invalid low-rank header: R={r}, P={p}, Q={q}")));
                }
                if !lowrank_is_beneficial(p, q, r) {
                    return Err(bad(format!("rank {r} violates the size condition for {p}x{q}")));
                }
                let u = Matrix::new(p, r, cur.values(p * r, precision, &name)?)?;
                let sigma = cur.values(r, precision, &name)?;
                let vt = Matrix::new(r, q, cur.values(r * q, precision, &name)?)?;
                Payload::LowRank { u, sigma, vt }
            }
        };
        entries.push(PacketEntry {
            name,
            shape,
            mode,
            precision,
            payload,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Decode {
            layer: "<trailer>".into(),
            reason: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    Ok(GradientPacket { entries })
}
