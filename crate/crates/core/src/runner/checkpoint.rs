//! Binary checkpoint container.
//!
//! `FCPO-POL v1\n`, then tagged sections: a 4-byte tag, a little-endian
//! `u64` payload length, the payload. Parameter sections (`POL `, `VAL `,
//! `CST `) hold a layout table followed by the flat values.

use std::path::Path;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::ingest::{Group, GroupAssignment};
use crate::nn::{Layout, ParamVector};

const MAGIC: &[u8] = b"FCPO-POL v1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub policy: ParamVector,
    pub value: ParamVector,
    pub cost: ParamVector,
    pub groups: GroupAssignment,
    pub seed: u64,
    /// First training round not yet run; every random stream is keyed by
    /// `(seed, round)`, so this pins the generator state.
    pub next_round: u64,
}

fn put_u32(buf: &mut Vec<u8>, x: usize) {
    buf.extend_from_slice(&(x as u32).to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, x: u64) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn encode_params(p: &ParamVector) -> Vec<u8> {
    let mut buf = Vec::new();
    put_u32(&mut buf, p.layout.entries().len());
    for (name, shape) in p.layout.entries() {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, shape.len());
        for &s in shape {
            put_u64(&mut buf, s as u64);
        }
    }
    put_u64(&mut buf, p.values.len() as u64);
    for v in &p.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn encode_groups(g: &GroupAssignment) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&g.quantile.to_le_bytes());
    put_u64(&mut buf, g.labels.len() as u64);
    buf.extend(g.labels.iter().map(|l| u8::from(*l == Group::LongTail)));
    for &c in &g.exposure_count {
        put_u64(&mut buf, c);
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode_params(bytes: &[u8]) -> Result<ParamVector> {
    let mut r = Reader { bytes, pos: 0 };
    let mut layout = Layout::new();
    for _ in 0..r.u32()? {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?).map_err(|_| corrupt("layout name is not utf-8"))?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u64().map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
        layout.push(name, &shape);
    }
    let n = r.u64()? as usize;
    if n != layout.len() {
        return Err(corrupt(format!("layout covers {} values but {n} are stored", layout.len())));
    }
    let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    if !r.done() {
        return Err(corrupt("trailing bytes in parameter section"));
    }
    ParamVector::new(layout, values)
}

fn decode_groups(bytes: &[u8]) -> Result<GroupAssignment> {
    let mut r = Reader { bytes, pos: 0 };
    let quantile = r.f64()?;
    let n = r.u64()? as usize;
    let labels = r
        .take(n)?
        .iter()
        .map(|&b| match b {
            0 => Ok(Group::Popular),
            1 => Ok(Group::LongTail),
            _ => Err(corrupt(format!("bad group label {b}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let exposure_count = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    Ok(GroupAssignment { labels, exposure_count, quantile })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let mut rng = Vec::new();
        put_u64(&mut rng, self.seed);
        put_u64(&mut rng, self.next_round);
        let sections: [(&[u8; 4], Vec<u8>); 6] = [
            (b"CFG ", self.config.to_text().into_bytes()),
            (b"POL ", encode_params(&self.policy)),
            (b"VAL ", encode_params(&self.value)),
            (b"CST ", encode_params(&self.cost)),
            (b"GRP ", encode_groups(&self.groups)),
            (b"RNG ", rng),
        ];
        for (tag, payload) in sections {
            out.extend_from_slice(tag);
            put_u64(&mut out, payload.len() as u64);
            out.extend(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = bytes.strip_prefix(MAGIC).ok_or_else(|| corrupt("missing FCPO-POL v1 header"))?;
        let mut r = Reader { bytes: body, pos: 0 };
        let (mut config, mut policy, mut value, mut cost, mut groups, mut rng) = (None, None, None, None, None, None);
        while !r.done() {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let len = r.u64()? as usize;
            let payload = r.take(len)?;
            match &tag {
                b"CFG " => {
                    let text = std::str::from_utf8(payload).map_err(|_| corrupt("config is not utf-8"))?;
                    config = Some(ExperimentConfig::from_text(text)?);
                }
                b"POL " => policy = Some(decode_params(payload)?),
                b"VAL " => value = Some(decode_params(payload)?),
                b"CST " => cost = Some(decode_params(payload)?),
                b"GRP " => groups = Some(decode_groups(payload)?),
                b"RNG " => {
                    let mut s = Reader { bytes: payload, pos: 0 };
                    rng = Some((s.u64()?, s.u64()?));
                }
                other => log::warn!("skipping unknown checkpoint section {:?}", String::from_utf8_lossy(other)),
            }
        }
        let missing = |what: &str| corrupt(format!("missing {what} section"));
        let (seed, next_round) = rng.ok_or_else(|| missing("RNG"))?;
        Ok(Checkpoint {
            config: config.ok_or_else(|| missing("CFG"))?,
            policy: policy.ok_or_else(|| missing("POL"))?,
            value: value.ok_or_else(|| missing("VAL"))?,
            cost: cost.ok_or_else(|| missing("CST"))?,
            groups: groups.ok_or_else(|| missing("GRP"))?,
            seed,
            next_round,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
