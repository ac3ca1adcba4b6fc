use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::{AdadeltaSlot, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::models::{Asr, AsrConfig, Lm, LmConfig, Tts, TtsConfig};

const MAGIC: &[u8; 4] = b"EATC";
const VERSION: u16 = 1;

/// Models, optimizer accumulators and bookkeeping for one run.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub asr: Option<Asr>,
    pub tts: Option<Tts>,
    pub lm: Option<Lm>,
    /// Adadelta accumulators keyed by model name (`asr`, `tts`, `lm`).
    pub optim: BTreeMap<String, Vec<AdadeltaSlot>>,
    pub step: u64,
    pub config_hash: u64,
}

fn split_u64(v: u64) -> Vec<f64> {
    vec![(v >> 32) as f64, (v & 0xffff_ffff) as f64]
}

fn join_u64(t: &Tensor) -> Result<u64> {
    match t.data() {
        [hi, lo] => Ok(((*hi as u64) << 32) | (*lo as u64)),
        _ => Err(Error::Config("malformed 64-bit meta entry".into())),
    }
}

fn dims(store: &ParamStore, name: &str) -> Result<Vec<usize>> {
    let id = store
        .find(name)
        .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
    Ok(store.get(id).shape().to_vec())
}

fn asr_config(p: &ParamStore) -> Result<AsrConfig> {
    let embed = dims(p, "dec.embed")?;
    Ok(AsrConfig {
        vocab: embed[0],
        embed: embed[1],
        feat_dim: dims(p, "enc.fwd.w_ih")?[0],
        enc_hidden: dims(p, "enc.fwd.w_hh")?[0],
        att_dim: dims(p, "att.key")?[1],
        dec_hidden: dims(p, "dec.gru.w_hh")?[0],
    })
}

fn tts_config(p: &ParamStore, window_sharpness: f64) -> Result<TtsConfig> {
    let embed = dims(p, "embed")?;
    Ok(TtsConfig {
        vocab: embed[0],
        embed: embed[1],
        hidden: dims(p, "gru.w_hh")?[0],
        feat_dim: dims(p, "mu.w")?[1],
        window_sharpness,
    })
}

fn lm_config(p: &ParamStore) -> Result<LmConfig> {
    let embed = dims(p, "embed")?;
    Ok(LmConfig {
        vocab: embed[0],
        embed: embed[1],
        hidden: dims(p, "gru.w_hh")?[0],
    })
}

impl Checkpoint {
    fn entries(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut models: Vec<(&str, &ParamStore)> = Vec::new();
        if let Some(m) = &self.asr {
            models.push(("asr", m.params()));
        }
        if let Some(m) = &self.tts {
            models.push(("tts", m.params()));
            let ws = Tensor::scalar(m.config().window_sharpness).expect("finite config");
            out.push(("meta/tts_window_sharpness".to_string(), ws));
        }
        if let Some(m) = &self.lm {
            models.push(("lm", m.params()));
        }
        for (prefix, store) in &models {
            for (name, t) in store.iter() {
                let plain = Tensor::new(t.shape(), t.data().to_vec()).expect("valid parameter");
                out.push((format!("{prefix}/{name}"), plain));
            }
            if let Some(slots) = self.optim.get(*prefix) {
                for ((name, t), slot) in store.iter().zip(slots) {
                    for (kind, v) in [("sq_grad", &slot.sq_grad), ("sq_delta", &slot.sq_delta)] {
                        let e = Tensor::new(t.shape(), v.clone()).expect("slot matches parameter");
                        out.push((format!("opt/{prefix}/{name}/{kind}"), e));
                    }
                }
            }
        }
        let meta = |v| Tensor::new(&[2], split_u64(v)).expect("two entries");
        out.push(("meta/step".to_string(), meta(self.step)));
        out.push(("meta/config_hash".to_string(), meta(self.config_hash)));
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let entries = self.entries();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in &entries {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.shape().len() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.fail(0, "bad magic"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(r.fail(4, &format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut table: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut order = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.fail(at, "entry name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let at = r.pos;
            let data: Vec<f64> = r
                .take(n.checked_mul(8).ok_or_else(|| r.fail(at, "extent overflow"))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| r.fail(at, &e.to_string()))?;
            order.push(name.clone());
            if table.insert(name.clone(), t).is_some() {
                return Err(r.fail(at, &format!("duplicate entry {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, "trailing bytes"));
        }

        let store_of = |prefix: &str| -> Option<ParamStore> {
            let lead = format!("{prefix}/");
            let mut s = ParamStore::new();
            for name in &order {
                if let Some(rest) = name.strip_prefix(&lead) {
                    s.add(rest, table[name].clone());
                }
            }
            (!s.is_empty()).then_some(s)
        };
        let mut ck = Checkpoint::default();
        if let Some(p) = store_of("asr") {
            ck.asr = Some(Asr::from_params(asr_config(&p)?, &p)?);
        }
        if let Some(p) = store_of("tts") {
            let ws = table
                .get("meta/tts_window_sharpness")
                .map(|t| t.data()[0])
                .ok_or_else(|| Error::Config("checkpoint lacks TTS window sharpness".into()))?;
            ck.tts = Some(Tts::from_params(tts_config(&p, ws)?, &p)?);
        }
        if let Some(p) = store_of("lm") {
            ck.lm = Some(Lm::from_params(lm_config(&p)?, &p)?);
        }
        for (prefix, store) in [
            ("asr", ck.asr.as_ref().map(Asr::params)),
            ("tts", ck.tts.as_ref().map(Tts::params)),
            ("lm", ck.lm.as_ref().map(Lm::params)),
        ] {
            let Some(store) = store else { continue };
            let mut slots = Vec::new();
            for (name, _) in store.iter() {
                let g = table.get(&format!("opt/{prefix}/{name}/sq_grad"));
                let d = table.get(&format!("opt/{prefix}/{name}/sq_delta"));
                match (g, d) {
                    (Some(g), Some(d)) => slots.push(AdadeltaSlot {
                        sq_grad: g.data().to_vec(),
                        sq_delta: d.data().to_vec(),
                    }),
                    _ => break,
                }
            }
            if slots.len() == store.len() {
                ck.optim.insert(prefix.to_string(), slots);
            }
        }
        if let Some(t) = table.get("meta/step") {
            ck.step = join_u64(t)?;
        }
        if let Some(t) = table.get("meta/config_hash") {
            ck.config_hash = join_u64(t)?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, reason: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(self.bytes.len(), "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
