//! Versioned binary parameter container.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        4 bytes  "VPQC"
//! version      u32      1
//! meta_len     u32      byte length of the metadata block
//! meta         UTF-8    "key=value\n" lines, keys sorted
//! n_entries    u32
//! entry        name_len u32, name UTF-8, rank u32, shape u64 x rank,
//!              values f64 x product(shape), row-major
//! trailer      u64      FNV-1a of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::agent::{Agent, AgentDims};
use crate::encoder::{EmbeddingTable, Encoder};
use crate::ensemble::QEnsemble;
use crate::error::{Error, Result};
use crate::files;
use crate::numerics::DenseNet;
use crate::seed::fnv1a64;
use crate::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VPQC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, shape: Vec<usize>, values: &[T]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let values = values.iter().map(|v| v.as_f64()).collect();
        self.entries.insert(name.into(), Tensor { shape, values });
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Corrupt(format!("checkpoint has no entry `{name}`")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Corrupt(format!("checkpoint metadata lacks `{key}`")))
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let s = self.meta_str(key)?;
        s.parse()
            .map_err(|_| Error::Corrupt(format!("checkpoint metadata `{key}` has bad value `{s}`")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta.as_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let h = fnv1a64(&buf);
        buf.extend_from_slice(&h.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: CHECKPOINT_VERSION });
        }
        if bytes.len() < 16 {
            return Err(Error::Corrupt("checkpoint truncated".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        if fnv1a64(body) != u64::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(Error::Corrupt("checkpoint hash mismatch (truncated or modified)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.bytes(meta_len)?)
            .map_err(|_| Error::Corrupt("checkpoint metadata is not UTF-8".into()))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Corrupt(format!("bad metadata line `{line}`")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let n = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.bytes(len)?)
                .map_err(|_| Error::Corrupt("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&c| c <= body.len())
                .ok_or_else(|| Error::Corrupt(format!("entry `{name}` has an impossible shape")))?;
            let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            entries.insert(name, Tensor { shape, values });
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes after the last entry".into()));
        }
        Ok(Checkpoint { meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        files::write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&files::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt("checkpoint ends mid-record".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

fn put_net<T: Scalar>(ck: &mut Checkpoint, prefix: &str, net: &DenseNet<T>) {
    let dims = net.layer_dims();
    for l in 0..net.num_layers() {
        ck.insert(format!("{prefix}.w{l}"), vec![dims[l + 1], dims[l]], net.weights(l));
        ck.insert(format!("{prefix}.b{l}"), vec![dims[l + 1]], net.biases(l));
    }
}

fn cast<T: Scalar>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::lit(x)).collect()
}

fn get_net<T: Scalar>(ck: &Checkpoint, prefix: &str) -> Result<DenseNet<T>> {
    let mut dims = Vec::new();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut l = 0;
    while let Some(w) = ck.entries.get(&format!("{prefix}.w{l}")) {
        let b = ck.tensor(&format!("{prefix}.b{l}"))?;
        if w.shape.len() != 2 || b.shape.len() != 1 || b.shape[0] != w.shape[0] {
            return Err(Error::Corrupt(format!("layer {l} of `{prefix}` has inconsistent shapes")));
        }
        if dims.is_empty() {
            dims.push(w.shape[1]);
        } else if *dims.last().unwrap() != w.shape[1] {
            return Err(Error::Corrupt(format!("layer {l} of `{prefix}` does not chain")));
        }
        dims.push(w.shape[0]);
        weights.push(cast(&w.values));
        biases.push(cast(&b.values));
        l += 1;
    }
    if l == 0 {
        return Err(Error::Corrupt(format!("checkpoint has no network `{prefix}`")));
    }
    DenseNet::from_parts(&dims, weights, biases).map_err(|e| Error::Corrupt(e.to_string()))
}

fn put_encoder<T: Scalar>(ck: &mut Checkpoint, prefix: &str, enc: &Encoder<T>) {
    let t = &enc.table;
    ck.insert(format!("{prefix}.table"), vec![t.catalog_size() + 1, t.dim()], t.data());
    put_net(ck, &format!("{prefix}.head"), &enc.head);
}

fn get_encoder<T: Scalar>(ck: &Checkpoint, prefix: &str) -> Result<Encoder<T>> {
    let t = ck.tensor(&format!("{prefix}.table"))?;
    if t.shape.len() != 2 || t.shape[0] == 0 {
        return Err(Error::Corrupt(format!("`{prefix}.table` is not a matrix")));
    }
    let table = EmbeddingTable::from_data(t.shape[0] - 1, t.shape[1], cast(&t.values))
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    Encoder::from_parts(table, get_net(ck, &format!("{prefix}.head"))?).map_err(|e| Error::Corrupt(e.to_string()))
}

/// Every parameter of the agent, its dimensions, and `extra` metadata.
pub fn agent_checkpoint<T: Scalar>(agent: &Agent<T>, extra: &BTreeMap<String, String>) -> Checkpoint {
    let mut ck = Checkpoint { meta: extra.clone(), ..Default::default() };
    let d = agent.dims;
    for (k, v) in [
        ("catalog_size", d.catalog_size),
        ("window_len", d.window_len),
        ("d_embed", d.d_embed),
        ("d_state", d.d_state),
        ("heads", d.heads),
    ] {
        ck.meta.insert(k.into(), v.to_string());
    }
    ck.meta.insert("updates_since_sync".into(), agent.ensemble.updates_since_sync().to_string());
    put_encoder(&mut ck, "encoder", &agent.encoder);
    put_encoder(&mut ck, "target_encoder", &agent.target_encoder);
    for (k, (h, t)) in agent.ensemble.heads().iter().zip(agent.ensemble.targets()).enumerate() {
        put_net(&mut ck, &format!("q.{k}"), h);
        put_net(&mut ck, &format!("q_target.{k}"), t);
    }
    put_net(&mut ck, "ce", &agent.ce_head);
    ck
}

pub fn agent_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<Agent<T>> {
    let dims = AgentDims {
        catalog_size: ck.meta_parse("catalog_size")?,
        window_len: ck.meta_parse("window_len")?,
        d_embed: ck.meta_parse("d_embed")?,
        d_state: ck.meta_parse("d_state")?,
        heads: ck.meta_parse("heads")?,
    };
    dims.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
    let heads = (0..dims.heads).map(|k| get_net(ck, &format!("q.{k}"))).collect::<Result<Vec<_>>>()?;
    let targets = (0..dims.heads).map(|k| get_net(ck, &format!("q_target.{k}"))).collect::<Result<Vec<_>>>()?;
    let mut ensemble = QEnsemble::from_parts(heads, targets).map_err(|e| Error::Corrupt(e.to_string()))?;
    ensemble.set_updates_since_sync(ck.meta_parse("updates_since_sync")?);
    let agent = Agent {
        dims,
        encoder: get_encoder(ck, "encoder")?,
        target_encoder: get_encoder(ck, "target_encoder")?,
        ensemble,
        ce_head: get_net(ck, "ce")?,
    };
    let consistent = agent.encoder.catalog_size() == dims.catalog_size
        && agent.encoder.state_dim() == dims.d_state
        && agent.encoder.table.dim() == dims.d_embed
        && agent.target_encoder.table.dim() == dims.d_embed
        && agent.target_encoder.catalog_size() == dims.catalog_size
        && agent.target_encoder.head.layer_dims() == agent.encoder.head.layer_dims()
        && agent.ensemble.state_dim() == dims.d_state
        && agent.ensemble.n_actions() == dims.catalog_size
        && agent.ce_head.layer_dims() == [dims.d_state, dims.catalog_size];
    if !consistent {
        return Err(Error::Corrupt("checkpoint tensors disagree with its dimensions".into()));
    }
    Ok(agent)
}
