//! Checkpoint format: a plain-text manifest next to a flat blob of
//! little-endian `f64` values.
//!
//! ```text
//! dynexit-checkpoint 1
//! blob model.bin
//! config kind=transformer
//! config norm_eps=0.000001
//! tensor embed 257,64 0 131584
//! ```
//!
//! `tensor` lines give the name, the comma-separated shape, and the byte
//! offset and byte length inside the blob. Tensors are stored back to back
//! in parameter order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::exits::{classifier_param_count, ExitBank, ExitPlacement, ExitVariant};
use crate::mamba::{MambaConfig, MambaModel};
use crate::model::{Backbone, BackboneKind};
use crate::numkernel::{Tensor, NORM_EPS};
use crate::params::ParamSet;
use crate::transformer::{TransformerConfig, TransformerModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "dynexit-checkpoint";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub version: u32,
    pub blob: String,
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

fn header_err(reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        tensor: "<manifest>".into(),
        reason: reason.into(),
    }
}

fn tensor_err(name: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        tensor: name.into(),
        reason: reason.into(),
    }
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let first = lines.next().ok_or_else(|| header_err("empty manifest"))?;
        let version = match first.split_once(' ') {
            Some((MAGIC, v)) => v.trim().parse::<u32>().map_err(|_| header_err("bad version"))?,
            _ => return Err(header_err("missing format header")),
        };
        if version != FORMAT_VERSION {
            return Err(header_err(format!("unsupported format version {version}")));
        }
        let mut blob = None;
        let mut config = BTreeMap::new();
        let mut tensors = Vec::new();
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
            match tag {
                "blob" => blob = Some(rest.trim().to_string()),
                "config" => {
                    let (k, v) = rest
                        .split_once('=')
                        .ok_or_else(|| header_err(format!("bad config line `{line}`")))?;
                    config.insert(k.trim().to_string(), v.trim().to_string());
                }
                "tensor" => tensors.push(parse_tensor_line(rest)?),
                _ => return Err(header_err(format!("unknown manifest line `{line}`"))),
            }
        }
        let blob = blob.ok_or_else(|| header_err("missing blob line"))?;
        Ok(Self {
            version,
            blob,
            config,
            tensors,
        })
    }

    pub fn render(&self) -> String {
        let mut s = format!("{MAGIC} {}\nblob {}\n", self.version, self.blob);
        for (k, v) in &self.config {
            let _ = writeln!(s, "config {k}={v}");
        }
        for t in &self.tensors {
            let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "tensor {} {} {} {}", t.name, shape.join(","), t.offset, t.len);
        }
        s
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.config
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| header_err(format!("missing config `{key}`")))
    }

    pub fn get_num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| header_err(format!("bad config value for `{key}`")))
    }

    /// Slices every tensor out of `blob`, checking contiguity and bounds.
    pub fn decode(&self, blob: &[u8]) -> Result<Vec<(String, Tensor)>> {
        let mut expected = 0usize;
        let mut out = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let numel = t
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| tensor_err(&t.name, "shape overflows"))?;
            if t.offset != expected {
                return Err(tensor_err(&t.name, format!("offset {} but expected {expected}", t.offset)));
            }
            if numel.checked_mul(8) != Some(t.len) {
                return Err(tensor_err(&t.name, format!("length {} does not match shape {:?}", t.len, t.shape)));
            }
            let end = t
                .offset
                .checked_add(t.len)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| tensor_err(&t.name, "extends past the end of the blob"))?;
            let data = blob[t.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(t.shape.clone(), data).map_err(|e| tensor_err(&t.name, e.to_string()))?;
            out.push((t.name.clone(), tensor));
            expected = end;
        }
        if expected != blob.len() {
            return Err(header_err(format!("blob holds {} bytes, manifest covers {expected}", blob.len())));
        }
        Ok(out)
    }
}

fn parse_tensor_line(rest: &str) -> Result<TensorEntry> {
    let parts: Vec<&str> = rest.split_whitespace().collect();
    let name = parts.first().copied().unwrap_or("<unnamed>");
    if parts.len() != 4 {
        return Err(tensor_err(name, "expected `name shape offset length`"));
    }
    let shape = parts[1]
        .split(',')
        .map(|d| d.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| tensor_err(name, format!("bad shape `{}`", parts[1])))?;
    let offset = parts[2].parse().map_err(|_| tensor_err(name, "bad offset"))?;
    let len = parts[3].parse().map_err(|_| tensor_err(name, "bad length"))?;
    Ok(TensorEntry {
        name: name.to_string(),
        shape,
        offset,
        len,
    })
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(blob)
}

/// Writes `params` plus a config echo to `path` and `<path>.bin`.
pub fn save_params<P: ParamSet + ?Sized>(path: &Path, config: BTreeMap<String, String>, params: &P) -> Result<()> {
    let blob_name = format!(
        "{}.bin",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
    );
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in params.named_params() {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        blob: blob_name.clone(),
        config,
        tensors,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bp = blob_path(path, &blob_name);
    std::fs::write(&bp, &blob).map_err(|e| Error::io(&bp, e))?;
    std::fs::write(path, manifest.render()).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<(Manifest, Vec<u8>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = Manifest::parse(&text)?;
    let bp = blob_path(path, &manifest.blob);
    let blob = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    Ok((manifest, blob))
}

/// Copies stored tensors into `params`, which must have identical names
/// and shapes in the same order.
pub fn load_into<P: ParamSet + ?Sized>(manifest: &Manifest, blob: &[u8], params: &mut P) -> Result<()> {
    let stored = manifest.decode(blob)?;
    let names: Vec<(String, Vec<usize>)> = params
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if stored.len() != names.len() {
        return Err(header_err(format!(
            "manifest lists {} tensors, the configuration needs {}",
            stored.len(),
            names.len()
        )));
    }
    for (((name, shape), (sname, st)), dst) in names.iter().zip(&stored).zip(params.params_mut()) {
        if name != sname {
            return Err(tensor_err(sname, format!("expected tensor `{name}` at this position")));
        }
        if shape.as_slice() != st.shape() {
            return Err(tensor_err(name, format!("shape {:?} does not match expected {shape:?}", st.shape())));
        }
        *dst = st.clone();
    }
    Ok(())
}

fn backbone_config(b: &Backbone) -> BTreeMap<String, String> {
    let mut c = BTreeMap::new();
    c.insert("kind".into(), b.kind().to_string());
    c.insert("norm_eps".into(), NORM_EPS.to_string());
    match b {
        Backbone::Transformer(m) => {
            let k = &m.config;
            for (key, v) in [
                ("n_blocks", k.n_blocks),
                ("d_model", k.d_model),
                ("n_heads", k.n_heads),
                ("d_ff", k.d_ff),
                ("vocab_size", k.vocab_size),
                ("max_seq_len", k.max_seq_len),
            ] {
                c.insert(key.into(), v.to_string());
            }
        }
        Backbone::Mamba(m) => {
            let k = &m.config;
            for (key, v) in [
                ("n_blocks", k.n_blocks),
                ("d_model", k.d_model),
                ("d_inner", k.d_inner),
                ("d_state", k.d_state),
                ("d_conv", k.d_conv),
                ("n_groups", k.n_groups),
                ("vocab_size", k.vocab_size),
            ] {
                c.insert(key.into(), v.to_string());
            }
        }
    }
    c
}

/// Refuses configurations far larger than the blob before allocating them.
/// Near misses pass so that the per-tensor comparison can name the culprit.
fn check_size(expected_params: u128, blob: &[u8]) -> Result<()> {
    let stored = blob.len() as u128 / 8;
    if expected_params > 2 * stored + 1024 {
        return Err(header_err(format!(
            "blob holds {stored} parameters, the configuration needs {expected_params}"
        )));
    }
    Ok(())
}

fn check_eps(m: &Manifest) -> Result<()> {
    let eps: f64 = m.get_num("norm_eps")?;
    if eps != NORM_EPS {
        return Err(header_err(format!("checkpoint norm epsilon {eps} differs from {NORM_EPS}")));
    }
    Ok(())
}

pub fn save_backbone(path: &Path, backbone: &Backbone) -> Result<()> {
    save_params(path, backbone_config(backbone), backbone)
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    let (m, blob) = read_manifest(path)?;
    backbone_from(&m, &blob)
}

pub fn backbone_from(m: &Manifest, blob: &[u8]) -> Result<Backbone> {
    check_eps(m)?;
    let kind: BackboneKind = m.get("kind")?.parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut b = match kind {
        BackboneKind::Transformer => {
            let mut cfg = TransformerConfig::new(
                m.get_num("n_blocks")?,
                m.get_num("d_model")?,
                m.get_num("n_heads")?,
                m.get_num("vocab_size")?,
                m.get_num("max_seq_len")?,
            )?;
            cfg.d_ff = m.get_num("d_ff")?;
            cfg.validate()?;
            check_size(cfg.param_count(), blob)?;
            Backbone::Transformer(TransformerModel::init(cfg, &mut rng))
        }
        BackboneKind::Mamba => {
            let cfg = MambaConfig::new(
                m.get_num("n_blocks")?,
                m.get_num("d_model")?,
                m.get_num("d_state")?,
                m.get_num("d_conv")?,
                m.get_num("n_groups")?,
                m.get_num("vocab_size")?,
            )?;
            if cfg.d_inner != m.get_num::<usize>("d_inner")? {
                return Err(header_err("d_inner must be twice d_model"));
            }
            check_size(cfg.param_count(), blob)?;
            Backbone::Mamba(MambaModel::init(cfg, &mut rng))
        }
    };
    load_into(m, blob, &mut b)?;
    Ok(b)
}

pub fn save_exits(path: &Path, bank: &ExitBank, n_blocks: usize) -> Result<()> {
    let mut c = BTreeMap::new();
    c.insert("variant".into(), bank.variant.to_string());
    c.insert("d_model".into(), bank.d_model.to_string());
    c.insert("n_blocks".into(), n_blocks.to_string());
    let placements: Vec<String> = bank.placement.blocks().iter().map(usize::to_string).collect();
    c.insert("placements".into(), placements.join(","));
    c.insert("norm_eps".into(), NORM_EPS.to_string());
    save_params(path, c, bank)
}

pub fn load_exits(path: &Path) -> Result<ExitBank> {
    let (m, blob) = read_manifest(path)?;
    exits_from(&m, &blob)
}

pub fn exits_from(m: &Manifest, blob: &[u8]) -> Result<ExitBank> {
    check_eps(m)?;
    let variant: ExitVariant = m.get("variant")?.parse()?;
    let placements = m
        .get("placements")?
        .split(',')
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| header_err("bad placements"))?;
    let placement = ExitPlacement::new(placements, m.get_num("n_blocks")?)?;
    let d_model: usize = m.get_num("d_model")?;
    check_size(
        classifier_param_count(variant, d_model).saturating_mul(placement.len() as u128),
        blob,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bank = ExitBank::init(variant, placement, d_model, &mut rng);
    load_into(m, blob, &mut bank)?;
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn models() -> Vec<Backbone> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        vec![
            Backbone::Transformer(TransformerModel::init(TransformerConfig::new(4, 8, 2, 11, 16).unwrap(), &mut rng)),
            Backbone::Mamba(MambaModel::init(MambaConfig::new(4, 8, 4, 3, 1, 11).unwrap(), &mut rng)),
        ]
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for (i, b) in models().into_iter().enumerate() {
            let path = dir.path().join(format!("m{i}.ckpt"));
            save_backbone(&path, &b).unwrap();
            let back = load_backbone(&path).unwrap();
            assert_eq!(back.fingerprint(), b.fingerprint());
            let (m, _) = read_manifest(&path).unwrap();
            assert_eq!(m.tensors.len(), b.named_params().len());
            let path2 = dir.path().join(format!("again{i}.ckpt"));
            save_backbone(&path2, &back).unwrap();
            assert_eq!(std::fs::read(path.with_extension("ckpt.bin")).unwrap(), std::fs::read(path2.with_extension("ckpt.bin")).unwrap());
        }
    }

    #[test]
    fn analytic_parameter_counts() {
        for b in models() {
            let expected = match &b {
                Backbone::Transformer(m) => m.config.param_count(),
                Backbone::Mamba(m) => m.config.param_count(),
            };
            assert_eq!(expected, b.param_count() as u128);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for v in ExitVariant::ALL {
            let bank = ExitBank::init(v, ExitPlacement::default_for(8).unwrap(), 12, &mut rng);
            assert_eq!(3 * classifier_param_count(v, 12), bank.param_count() as u128);
        }
    }

    #[test]
    fn oversized_configuration_is_rejected_before_allocation() {
        let b = &models()[1];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_backbone(&path, b).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("config d_model=8", "config d_model=4000000000");
        let text = text.replace("config d_inner=16", "config d_inner=8000000000");
        std::fs::write(&path, text).unwrap();
        let err = load_backbone(&path).unwrap_err();
        assert_eq!(err.category(), "checkpoint");
    }

    #[test]
    fn exit_bank_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in ExitVariant::ALL {
            let bank = ExitBank::init(v, ExitPlacement::default_for(8).unwrap(), 8, &mut rng);
            let path = dir.path().join("exits.ckpt");
            save_exits(&path, &bank, 8).unwrap();
            assert_eq!(load_exits(&path).unwrap(), bank);
        }
    }

    #[test]
    fn corrupted_offset_names_the_tensor() {
        let b = &models()[0];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_backbone(&path, b).unwrap();
        let (mut m, blob) = read_manifest(&path).unwrap();
        m.tensors[3].offset += 8;
        let name = m.tensors[3].name.clone();
        match backbone_from(&m, &blob) {
            Err(Error::Checkpoint { tensor, .. }) => assert_eq!(tensor, name),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_and_version_mismatch() {
        let b = &models()[1];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_backbone(&path, b).unwrap();
        let (mut m, blob) = read_manifest(&path).unwrap();
        m.config.insert("d_state".into(), "5".into());
        match backbone_from(&m, &blob) {
            Err(Error::Checkpoint { tensor, .. }) => assert!(tensor.starts_with("blocks.0.")),
            other => panic!("unexpected {other:?}"),
        }
        let text = std::fs::read_to_string(&path).unwrap().replacen(" 1\n", " 2\n", 1);
        assert!(matches!(Manifest::parse(&text), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let b = &models()[0];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_backbone(&path, b).unwrap();
        let (m, blob) = read_manifest(&path).unwrap();
        let last = m.tensors.last().unwrap().name.clone();
        match m.decode(&blob[..blob.len() - 8]) {
            Err(Error::Checkpoint { tensor, .. }) => assert_eq!(tensor, last),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_checkpoint_is_io() {
        assert_eq!(load_backbone(Path::new("/no/such/file")).unwrap_err().category(), "io");
    }
}
