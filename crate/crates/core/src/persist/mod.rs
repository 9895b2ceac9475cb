//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic b"CLABCKPT"
//! 8       4     format version (u32) = 1
//! 12      8     config record length C (u64)
//! 20      C     config record, UTF-8 JSON
//! 20+C    4     manifest entry count E (u32)
//! ...           E manifest entries:
//!                 u8   section (0 params, 1 optimizer m, 2 optimizer v)
//!                 u16  path length P, then P bytes of UTF-8 path
//!                 u8   element type (0 = f32)
//!                 u8   rank R, then R x u64 dimensions
//!                 u64  payload offset (relative to payload start)
//!                 u64  byte length
//! ...     8     payload length L (u64)
//! ...     L     payload (little-endian f32)
//! ```
//!
//! Entries are written in section order, then path order, with contiguous
//! offsets. The checkpoint id is the hex SHA-256 of the whole file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{param_shapes, ModelConfig, ParamGroup, ParamStore};
use crate::numerics::Tensor;
use crate::pretrain::AdamState;
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 8] = b"CLABCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// The JSON config record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub vocab_fingerprint: String,
    /// Ancestor checkpoint ids, root first.
    #[serde(default)]
    pub lineage: Vec<String>,
    /// Completed optimizer updates when optimizer state is stored.
    #[serde(default)]
    pub optimizer_step: Option<u64>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Section {
    Params = 0,
    AdamM = 1,
    AdamV = 2,
}

impl Section {
    fn from_u8(b: u8) -> Option<Self> {
        match b {
            0 => Some(Section::Params),
            1 => Some(Section::AdamM),
            2 => Some(Section::AdamV),
            _ => None,
        }
    }
}

/// Hex SHA-256 of the serialized bytes.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamStore<f32>, vocab: &Vocabulary) -> Self {
        Self {
            meta: CheckpointMeta {
                config,
                vocab_fingerprint: vocab.fingerprint().to_string(),
                lineage: Vec::new(),
                optimizer_step: None,
                metadata: BTreeMap::new(),
            },
            params,
            optimizer: None,
        }
    }

    pub fn with_optimizer(mut self, state: AdamState) -> Self {
        self.meta.optimizer_step = Some(state.step);
        self.optimizer = Some(state);
        self
    }

    /// Lineage for a checkpoint derived from this one.
    pub fn child_lineage(&self) -> Vec<String> {
        let mut l = self.meta.lineage.clone();
        l.push(self.id());
        l
    }

    pub fn id(&self) -> String {
        checkpoint_id(&self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = self.meta.clone();
        meta.optimizer_step = self.optimizer.as_ref().map(|o| o.step);
        let config = serde_json::to_vec(&meta).expect("config record serializes");
        let mut sections: Vec<(Section, &ParamStore<f32>)> = vec![(Section::Params, &self.params)];
        if let Some(o) = &self.optimizer {
            sections.push((Section::AdamM, &o.m));
            sections.push((Section::AdamV, &o.v));
        }
        let n_entries: usize = sections.iter().map(|(_, s)| s.len()).sum();

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(n_entries as u32).to_le_bytes());
        let mut offset = 0u64;
        for (sec, store) in &sections {
            for (path, t) in store.iter() {
                out.push(*sec as u8);
                out.extend_from_slice(&(path.len() as u16).to_le_bytes());
                out.extend_from_slice(path.as_bytes());
                out.push(DTYPE_F32);
                out.push(t.shape().len() as u8);
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                let nbytes = (t.numel() * 4) as u64;
                out.extend_from_slice(&offset.to_le_bytes());
                out.extend_from_slice(&nbytes.to_le_bytes());
                offset += nbytes;
            }
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, store) in &sections {
            for (_, t) in store.iter() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(r.err_at(0, "bad magic bytes"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.err_at(8, &format!("unsupported format version {version}")));
        }
        let clen = r.u64("config length")?;
        let cstart = r.pos;
        let craw = r.take(r.bounded(clen, "config record")?, "config record")?;
        let meta: CheckpointMeta =
            serde_json::from_slice(craw).map_err(|e| Error::Integrity { pos: cstart as u64, msg: format!("config record: {e}") })?;

        let count = r.u32("manifest count")? as usize;
        // Smallest entry: section + path len + dtype + rank + offset + nbytes.
        if count.saturating_mul(1 + 2 + 1 + 1 + 16) > r.remaining() {
            return Err(r.err_at(r.pos, &format!("manifest declares {count} entries, more than the file can hold")));
        }
        struct Entry {
            at: usize,
            section: Section,
            path: String,
            shape: Vec<usize>,
            offset: u64,
            nbytes: u64,
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.pos;
            let sec = r.u8("section")?;
            let section = Section::from_u8(sec).ok_or_else(|| r.err_at(at, &format!("unknown section {sec}")))?;
            let plen = r.u16("path length")? as usize;
            let ppos = r.pos;
            let path = match std::str::from_utf8(r.take(plen, "path")?) {
                Ok(p) => p.to_string(),
                Err(_) => return Err(r.err_at(ppos, "path is not UTF-8")),
            };
            let dpos = r.pos;
            let dtype = r.u8("element type")?;
            if dtype != DTYPE_F32 {
                return Err(r.err_at(dpos, &format!("unsupported element type {dtype}")));
            }
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let offset = r.u64("offset")?;
            let nbytes = r.u64("byte length")?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if numel.and_then(|n| n.checked_mul(4)) != Some(nbytes as usize) {
                return Err(r.err_at(at, &format!("{path}: byte length {nbytes} does not match shape {shape:?}")));
            }
            entries.push(Entry { at, section, path, shape, offset, nbytes });
        }
        let plen = r.u64("payload length")?;
        let pstart = r.pos;
        if plen as usize != r.remaining() {
            return Err(r.err_at(pstart, &format!("payload length {plen} but {} bytes follow", r.remaining())));
        }
        let payload = &bytes[pstart..];

        let mut ordered: Vec<&Entry> = entries.iter().collect();
        ordered.sort_by_key(|e| e.offset);
        let mut cursor = 0u64;
        for e in &ordered {
            if e.offset < cursor {
                return Err(r.err_at(e.at, &format!("{}: payload range overlaps a previous tensor", e.path)));
            }
            let end = e.offset.checked_add(e.nbytes).filter(|&x| x <= plen);
            cursor = end.ok_or_else(|| r.err_at(e.at, &format!("{}: payload range outside payload", e.path)))?;
        }

        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for e in &entries {
            let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(e.shape.clone(), data)?;
            let store = match e.section {
                Section::Params => &mut params,
                Section::AdamM => &mut m,
                Section::AdamV => &mut v,
            };
            if store.contains(&e.path) {
                return Err(r.err_at(e.at, &format!("{} appears twice", e.path)));
            }
            store.insert(e.path.clone(), t);
        }

        check_params(&meta.config, &params).map_err(|msg| Error::Integrity { pos: cstart as u64, msg })?;
        let optimizer = match meta.optimizer_step {
            Some(step) => {
                for (path, t) in params.iter() {
                    let ok = |s: &ParamStore<f32>| s.get(path).is_some_and(|x| x.shape() == t.shape());
                    if !ok(&m) || !ok(&v) {
                        return Err(Error::Integrity {
                            pos: pstart as u64,
                            msg: format!("optimizer state missing or misshapen for {path}"),
                        });
                    }
                }
                Some(AdamState { step, m, v })
            }
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(Error::Integrity { pos: cstart as u64, msg: "optimizer section present without optimizer_step".into() }),
        };
        Ok(Checkpoint { meta, params, optimizer })
    }
}

/// Every trunk, MLM and NSP path must be present with the configured shape.
fn check_params(config: &ModelConfig, params: &ParamStore<f32>) -> std::result::Result<(), String> {
    config.validate().map_err(|e| e.to_string())?;
    for (path, shape) in param_shapes(config) {
        match params.get(&path) {
            Some(p) if p.shape() == shape.as_slice() => {}
            Some(p) => return Err(format!("{path} has shape {:?}, config implies {shape:?}", p.shape())),
            None => return Err(format!("missing parameter {path}")),
        }
    }
    for path in params.paths() {
        ParamGroup::of(path, config.n_layers).map_err(|e| e.to_string())?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn err_at(&self, pos: usize, msg: &str) -> Error {
        Error::Integrity { pos: pos as u64, msg: msg.to_string() }
    }

    fn bounded(&self, n: u64, what: &str) -> Result<usize> {
        if n > self.remaining() as u64 {
            return Err(self.err_at(self.pos, &format!("{what} of {n} bytes exceeds file")));
        }
        Ok(n as usize)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if n > self.remaining() {
            return Err(self.err_at(self.pos, &format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Write atomically (temp file then rename). Returns the checkpoint id.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<String> {
    let bytes = ckpt.to_bytes();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(".{}.tmp{}", path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint"), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(checkpoint_id(&bytes))
}

/// Load and return the checkpoint with its id.
pub fn load(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    Ok((ck, checkpoint_id(&bytes)))
}

/// Load, requiring the checkpoint to share `vocab`.
pub fn load_bound(path: &Path, vocab: &Vocabulary) -> Result<(Checkpoint, String)> {
    let (ck, id) = load(path)?;
    check_fingerprint(&ck, vocab)?;
    Ok((ck, id))
}

pub fn check_fingerprint(ck: &Checkpoint, vocab: &Vocabulary) -> Result<()> {
    if ck.meta.vocab_fingerprint != vocab.fingerprint() {
        return Err(Error::config(format!(
            "vocabulary fingerprint mismatch: checkpoint has {}, bound vocabulary has {}",
            ck.meta.vocab_fingerprint,
            vocab.fingerprint()
        )));
    }
    if ck.meta.config.vocab_size != vocab.len() {
        return Err(Error::config(format!("checkpoint expects {} tokens, vocabulary has {}", ck.meta.config.vocab_size, vocab.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageReport {
    pub ok: bool,
    pub mismatches: Vec<String>,
}

/// Check that `child` could have been derived from `parent` (with id
/// `parent_id`): same vocabulary, same architecture, every parent parameter
/// present in the child with its shape, and the parent in the child's lineage.
/// The child may carry extra heads.
pub fn verify_lineage(child: &Checkpoint, parent: &Checkpoint, parent_id: &str) -> LineageReport {
    let mut mismatches = Vec::new();
    if child.meta.vocab_fingerprint != parent.meta.vocab_fingerprint {
        mismatches.push(format!("vocab_fingerprint: {} vs {}", child.meta.vocab_fingerprint, parent.meta.vocab_fingerprint));
    }
    mismatches.extend(child.meta.config.architecture_diff(&parent.meta.config));
    for (path, t) in parent.params.iter() {
        match child.params.get(path) {
            Some(c) if c.shape() == t.shape() => {}
            Some(c) => mismatches.push(format!("{path}: shape {:?} vs {:?}", c.shape(), t.shape())),
            None => mismatches.push(format!("{path}: missing from child")),
        }
    }
    if !child.meta.lineage.iter().any(|id| id == parent_id) {
        mismatches.push(format!("lineage does not contain parent {parent_id}"));
    }
    LineageReport { ok: mismatches.is_empty(), mismatches }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{add_head, init_params, HeadKind};
    use crate::rng::substream;

    fn vocab(extra: &str) -> Vocabulary {
        let mut t: Vec<String> = crate::tokenizer::SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in ["a", "b", "c", extra] {
            t.push(w.into());
        }
        Vocabulary::from_tokens(t, false).unwrap()
    }

    fn toy(v: &Vocabulary) -> Checkpoint {
        let mut cfg = ModelConfig::toy(v.len());
        cfg.hidden_dim = 8;
        cfg.n_heads = 2;
        cfg.ff_dim = 16;
        cfg.max_seq_len = 8;
        let p = init_params(&cfg, &mut substream(1, "init", 0)).unwrap();
        Checkpoint::new(cfg, p, v)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let v = vocab("d");
        let ck = toy(&v).with_optimizer(AdamState::new(&toy(&v).params));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_fields_at_documented_offsets() {
        let v = vocab("d");
        let b = toy(&v).to_bytes();
        assert_eq!(&b[..8], b"CLABCKPT");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        let c = u64::from_le_bytes(b[12..20].try_into().unwrap()) as usize;
        assert!(std::str::from_utf8(&b[20..20 + c]).unwrap().starts_with("{\"config\""));
    }

    #[test]
    fn truncation_and_corruption_report_positions() {
        let v = vocab("d");
        let b = toy(&v).to_bytes();
        for cut in [0, 5, 15, 30, b.len() / 2, b.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&b[..cut]), Err(Error::Integrity { .. })), "cut {cut}");
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity { pos: 0, .. })));
        let mut bad = b.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity { pos: 8, .. })));
        let mut bad = b;
        bad[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity { pos: 20, .. })));
    }

    #[test]
    fn fingerprint_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let v = vocab("d");
        let id = save(&toy(&v), &path).unwrap();
        assert_eq!(load_bound(&path, &v).unwrap().1, id);
        assert!(matches!(load_bound(&path, &vocab("e")), Err(Error::Config(_))));
    }

    #[test]
    fn lineage_rules() {
        let v = vocab("d");
        let parent = toy(&v);
        let pid = parent.id();
        let mut child = parent.clone();
        child.meta.lineage = parent.child_lineage();
        add_head(&mut child.params, &child.meta.config, HeadKind::Ner, 3, &mut substream(2, "head", 0)).unwrap();
        assert!(verify_lineage(&child, &parent, &pid).ok);

        let mut wide = child.clone();
        wide.meta.config.hidden_dim = 16;
        let r = verify_lineage(&wide, &parent, &pid);
        assert!(!r.ok && r.mismatches.iter().any(|m| m.starts_with("hidden_dim")));
    }
}
