//! Versioned, checksummed binary model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes  "QMOE"
//! format_version   u32
//! payload_len      u64      byte length of the payload section
//! payload          see below
//! checksum         32 bytes SHA-256 of everything before it
//! ```
//!
//! The payload carries the model schema version, quantile levels, network
//! shapes, the per-expert fixed output transforms, the feature scaler, and
//! finally every parameter block as raw `f64` bits in each component's flat
//! order. Serializing bit patterns (not decimal text) is what makes a
//! save/load round trip reproduce predictions to the last bit.
//!
//! The header's `payload_len` lets a reader distinguish a file that lost its
//! tail ([`Error::Truncated`]) from one whose bytes were damaged in place
//! ([`Error::ChecksumMismatch`]); the checksum is verified before any
//! payload field is trusted. Expert entries must appear in canonical
//! chemistry order — a permuted file is rejected as
//! [`Error::ExpertOrderMismatch`], not silently reordered, because the gate
//! indexes experts by position.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dataio::{Chemistry, FeatureScaler};
use crate::dist::QuantileLevels;
use crate::error::{Error, Result};
use crate::expert::{ExpertInit, ExpertParams};
use crate::gating::{GatingInit, GatingParams};
use crate::moe::{MoEModel, SCHEMA_VERSION};

const MAGIC: &[u8; 4] = b"QMOE";
const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;
/// magic + format_version + payload_len.
const PREFIX_LEN: usize = 4 + 4 + 8;

// ---------------------------------------------------------------------------
// Writing.

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Writer {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }
}

fn encode_payload(model: &MoEModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(model.schema_version());

    let levels = model.levels().as_slice();
    w.u32(levels.len() as u32);
    for &l in levels {
        w.f64(l);
    }

    let experts = model.experts();
    let first = &experts[0].1;
    w.u32(first.input_dim() as u32);
    w.u32(first.hidden_dim() as u32);
    w.u32(experts.len() as u32);
    for (chem, e) in experts {
        w.u8(chem.code());
        w.f64(e.dropout_rate);
        w.f64(e.block1.norm.epsilon);
        w.f64(e.output_mean);
        w.f64(e.output_scale);
    }

    let gate = model.gate();
    for d in gate.hidden_dims() {
        w.u32(d as u32);
    }
    w.f64(gate.negative_slope);

    let scaler = model.scaler();
    w.f64s(scaler.mean());
    w.f64s(scaler.std());

    for (_, e) in experts {
        w.f64s(&e.to_flat());
    }
    w.f64s(&gate.to_flat());
    w.buf
}

/// Serialize `model` to `path`. The file is assembled in memory, checksummed,
/// written to a sibling temporary file, and renamed into place, so a crash
/// mid-write cannot leave a half-written model at the destination.
pub fn save_model(model: &MoEModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let payload = encode_payload(model);

    let mut file = Vec::with_capacity(PREFIX_LEN + payload.len() + CHECKSUM_LEN);
    file.extend_from_slice(MAGIC);
    file.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    file.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    file.extend_from_slice(&payload);
    let digest = Sha256::digest(&file);
    file.extend_from_slice(&digest);

    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, &file)?;
    match fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e.into())
        }
    }
}

// ---------------------------------------------------------------------------
// Reading.

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Reader<'a> {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                detail: format!(
                    "payload ended inside {what} ({} byte(s) left, {n} needed)",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.u64(what)? as usize;
        // Guard against a corrupt length claiming more than the payload holds,
        // before allocating.
        if self.pos + n.saturating_mul(8) > self.bytes.len() {
            return Err(Error::Truncated {
                detail: format!("{what} claims {n} values, more than the payload holds"),
            });
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64(what)?);
        }
        Ok(out)
    }

    fn finished(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode_payload(bytes: &[u8]) -> Result<MoEModel> {
    let mut r = Reader::new(bytes);

    let schema = r.u32("schema version")?;
    if schema != SCHEMA_VERSION {
        return Err(Error::SchemaMismatch {
            expected: SCHEMA_VERSION,
            actual: schema,
        });
    }

    let k = r.u32("quantile count")? as usize;
    let mut levels = Vec::with_capacity(k);
    for _ in 0..k {
        levels.push(r.f64("quantile levels")?);
    }
    let levels = QuantileLevels::new(levels)?;

    let input_dim = r.u32("input width")? as usize;
    let hidden_dim = r.u32("hidden width")? as usize;
    let expert_count = r.u32("expert count")? as usize;
    if expert_count == 0 {
        return Err(Error::EmptyInput("model file has no experts".to_string()));
    }
    struct ExpertHeader {
        chem: Chemistry,
        dropout_rate: f64,
        norm_epsilon: f64,
        output_mean: f64,
        output_scale: f64,
    }
    let mut headers = Vec::with_capacity(expert_count);
    for _ in 0..expert_count {
        headers.push(ExpertHeader {
            chem: Chemistry::from_code(r.u8("expert chemistry")?)?,
            dropout_rate: r.f64("expert dropout")?,
            norm_epsilon: r.f64("expert norm epsilon")?,
            output_mean: r.f64("expert output mean")?,
            output_scale: r.f64("expert output scale")?,
        });
    }
    for w in headers.windows(2) {
        if w[1].chem.index() <= w[0].chem.index() {
            return Err(Error::ExpertOrderMismatch {
                detail: format!("{} listed after {}", w[1].chem, w[0].chem),
            });
        }
    }

    let gate_hidden = [
        r.u32("gate width")? as usize,
        r.u32("gate width")? as usize,
        r.u32("gate width")? as usize,
    ];
    let negative_slope = r.f64("gate slope")?;

    let scaler_mean = r.f64s("scaler mean")?;
    let scaler_std = r.f64s("scaler std")?;
    let scaler = FeatureScaler::from_parts(scaler_mean, scaler_std)?;

    let mut experts = Vec::with_capacity(expert_count);
    for h in headers {
        let mut init = ExpertInit::new(input_dim, hidden_dim, k, 0);
        init.dropout_rate = h.dropout_rate;
        init.norm_epsilon = h.norm_epsilon;
        let mut e = ExpertParams::zeros(&init)?;
        e.set_output_transform(h.output_mean, h.output_scale)?;
        let flat = r.f64s("expert parameters")?;
        if flat.len() != e.param_count() {
            return Err(Error::dim("expert parameter block", e.param_count(), flat.len()));
        }
        e.load_flat(&flat)?;
        experts.push((h.chem, e));
    }

    let mut gate = GatingParams::zeros(&GatingInit {
        input_dim,
        hidden_dims: gate_hidden,
        expert_count,
        negative_slope,
        seed: 0,
    })?;
    let flat = r.f64s("gate parameters")?;
    if flat.len() != gate.param_count() {
        return Err(Error::dim("gate parameter block", gate.param_count(), flat.len()));
    }
    gate.load_flat(&flat)?;

    if !r.finished() {
        return Err(Error::Truncated {
            detail: format!(
                "payload length disagrees with its contents ({} unread byte(s))",
                bytes.len() - r.pos
            ),
        });
    }

    MoEModel::new(experts, gate, levels, scaler)
}

/// Read, verify (length, then checksum), and reconstruct a model file.
pub fn load_model(path: impl AsRef<Path>) -> Result<MoEModel> {
    let bytes = fs::read(path.as_ref())?;
    load_model_bytes(&bytes)
}

fn load_model_bytes(bytes: &[u8]) -> Result<MoEModel> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            detail: format!("file is {} byte(s), shorter than the magic", bytes.len()),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < PREFIX_LEN {
        return Err(Error::Truncated {
            detail: "file ends inside the fixed header".to_string(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let payload_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expected = PREFIX_LEN
        .checked_add(payload_len)
        .and_then(|n| n.checked_add(CHECKSUM_LEN))
        .ok_or_else(|| Error::Truncated {
            detail: "declared payload length overflows".to_string(),
        })?;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            detail: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let body = &bytes[..PREFIX_LEN + payload_len];
    let stored = &bytes[PREFIX_LEN + payload_len..];
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(Error::ChecksumMismatch);
    }
    decode_payload(&bytes[PREFIX_LEN..PREFIX_LEN + payload_len])
}
