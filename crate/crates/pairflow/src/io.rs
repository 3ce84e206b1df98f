//! On-disk formats.
//!
//! - PFT1: tensor. magic "PFT1", u32 rank, u32 dims[], little-endian f64
//!   payload, row-major.
//! - PFCK: checkpoint. magic "PFCK", u32 version, u32 manifest length, JSON
//!   manifest, then tensors in the order the manifest lists them.
//! - PFDS: dataset. Same envelope as PFCK with magic "PFDS".
//! - Flat key=value config files and CSV training logs.
//!
//! All writes go through write-temp-then-rename.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::PairSet;
use crate::error::{Error, Result};
use crate::net::{DenoiserParams, LinearLayer, LoraAdapter};
use crate::tensor::{Matrix, Tensor};
use crate::trainer::TrainLog;

const PFT1_MAGIC: &[u8; 4] = b"PFT1";
const PFCK_MAGIC: &[u8; 4] = b"PFCK";
const PFDS_MAGIC: &[u8; 4] = b"PFDS";
const FORMAT_VERSION: u32 = 1;

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------- PFT1

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + t.len() * 8);
    out.extend_from_slice(PFT1_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn tensor_from_cursor(c: &mut Cursor) -> Result<Tensor> {
    if c.take(4)? != PFT1_MAGIC {
        return Err(Error::Format("bad PFT1 magic".into()));
    }
    let rank = c.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(c.u32()? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(c.f64()?);
    }
    Tensor::new(shape, data)
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let t = tensor_from_cursor(&mut c)?;
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after tensor".into()));
    }
    Ok(t)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    atomic_write(path, &tensor_to_bytes(t))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    tensor_from_bytes(&fs::read(path)?)
}

// ---------------------------------------------------------------- PFCK

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    kind: String,
    data_dim: Option<usize>,
    fourier_k: Option<usize>,
    rank: Option<usize>,
    scale: Option<f64>,
    /// Per layer [out, in] of the base linear layer.
    layer_shapes: Vec<[usize; 2]>,
    seed: Option<u64>,
}

fn envelope(magic: &[u8; 4], manifest_json: &[u8], tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest_json);
    for t in tensors {
        out.extend_from_slice(&tensor_to_bytes(t));
    }
    out
}

fn open_envelope<'a>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<(Vec<u8>, Cursor<'a>)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != magic {
        return Err(Error::Format(format!(
            "bad magic (expected {})",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", version)));
    }
    let mlen = c.u32()? as usize;
    let manifest = c.take(mlen)?.to_vec();
    Ok((manifest, c))
}

pub fn save_base(path: &Path, base: &DenoiserParams, seed: Option<u64>) -> Result<()> {
    let manifest = CheckpointManifest {
        kind: "base".into(),
        data_dim: Some(base.data_dim),
        fourier_k: Some(base.fourier_k),
        rank: None,
        scale: None,
        layer_shapes: base.layers.iter().map(|l| [l.w.rows, l.w.cols]).collect(),
        seed,
    };
    let mut tensors = Vec::new();
    for l in &base.layers {
        tensors.push(Tensor::new(vec![l.w.rows, l.w.cols], l.w.data.clone())?);
        tensors.push(Tensor::new(vec![l.b.len()], l.b.clone())?);
    }
    let json = serde_json::to_vec(&manifest)?;
    atomic_write(path, &envelope(PFCK_MAGIC, &json, &tensors))
}

pub fn load_base(path: &Path) -> Result<DenoiserParams> {
    let bytes = fs::read(path)?;
    let (mjson, mut c) = open_envelope(PFCK_MAGIC, &bytes)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&mjson)?;
    if manifest.kind != "base" {
        return Err(Error::Format(format!(
            "expected base checkpoint, found '{}'",
            manifest.kind
        )));
    }
    let mut layers = Vec::new();
    for [rows, cols] in &manifest.layer_shapes {
        let w = tensor_from_cursor(&mut c)?;
        let b = tensor_from_cursor(&mut c)?;
        if w.shape() != [*rows, *cols] || b.shape() != [*rows] {
            return Err(Error::Format("layer tensor shape mismatch".into()));
        }
        layers.push(LinearLayer {
            w: Matrix {
                rows: *rows,
                cols: *cols,
                data: w.data().to_vec(),
            },
            b: b.data().to_vec(),
        });
    }
    Ok(DenoiserParams {
        layers,
        data_dim: manifest
            .data_dim
            .ok_or_else(|| Error::Format("missing data_dim".into()))?,
        fourier_k: manifest
            .fourier_k
            .ok_or_else(|| Error::Format("missing fourier_k".into()))?,
    })
}

pub fn save_adapter(path: &Path, adapter: &LoraAdapter, seed: Option<u64>) -> Result<()> {
    let manifest = CheckpointManifest {
        kind: "adapter".into(),
        data_dim: None,
        fourier_k: None,
        rank: Some(adapter.rank),
        scale: Some(adapter.scale),
        layer_shapes: adapter
            .layers
            .iter()
            .map(|(a, b)| [b.rows, a.cols])
            .collect(),
        seed,
    };
    let mut tensors = Vec::new();
    for (a, b) in &adapter.layers {
        tensors.push(Tensor::new(vec![a.rows, a.cols], a.data.clone())?);
        tensors.push(Tensor::new(vec![b.rows, b.cols], b.data.clone())?);
    }
    let json = serde_json::to_vec(&manifest)?;
    atomic_write(path, &envelope(PFCK_MAGIC, &json, &tensors))
}

pub fn load_adapter(path: &Path) -> Result<LoraAdapter> {
    let bytes = fs::read(path)?;
    let (mjson, mut c) = open_envelope(PFCK_MAGIC, &bytes)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&mjson)?;
    if manifest.kind != "adapter" {
        return Err(Error::Format(format!(
            "expected adapter checkpoint, found '{}'",
            manifest.kind
        )));
    }
    let rank = manifest
        .rank
        .ok_or_else(|| Error::Format("missing rank".into()))?;
    let mut layers = Vec::new();
    for [out, inp] in &manifest.layer_shapes {
        let a = tensor_from_cursor(&mut c)?;
        let b = tensor_from_cursor(&mut c)?;
        if a.shape() != [rank, *inp] || b.shape() != [*out, rank] {
            return Err(Error::Format("adapter tensor shape mismatch".into()));
        }
        layers.push((
            Matrix {
                rows: rank,
                cols: *inp,
                data: a.data().to_vec(),
            },
            Matrix {
                rows: *out,
                cols: rank,
                data: b.data().to_vec(),
            },
        ));
    }
    Ok(LoraAdapter {
        layers,
        rank,
        scale: manifest.scale.unwrap_or(1.0),
    })
}

// ---------------------------------------------------------------- PFDS

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    name: String,
    n_pairs: usize,
    dim: usize,
    has_direction: bool,
    seed: u64,
}

pub fn save_pairs(path: &Path, name: &str, seed: u64, set: &PairSet) -> Result<()> {
    let n = set.pairs.len();
    let dim = set.pairs[0].0.len();
    let manifest = DatasetManifest {
        name: name.into(),
        n_pairs: n,
        dim,
        has_direction: set.direction.is_some(),
        seed,
    };
    let stack = |sel: fn(&(Tensor, Tensor)) -> &Tensor| -> Result<Tensor> {
        let mut data = Vec::with_capacity(n * dim);
        for p in &set.pairs {
            data.extend_from_slice(sel(p).data());
        }
        Tensor::new(vec![n, dim], data)
    };
    let mut tensors = vec![stack(|p| &p.0)?, stack(|p| &p.1)?];
    if let Some(g) = &set.direction {
        tensors.push(g.clone());
    }
    let json = serde_json::to_vec(&manifest)?;
    atomic_write(path, &envelope(PFDS_MAGIC, &json, &tensors))
}

pub fn load_pairs(path: &Path) -> Result<(String, PairSet)> {
    let bytes = fs::read(path)?;
    let (mjson, mut c) = open_envelope(PFDS_MAGIC, &bytes)?;
    let manifest: DatasetManifest = serde_json::from_slice(&mjson)?;
    let x0a = tensor_from_cursor(&mut c)?;
    let x0b = tensor_from_cursor(&mut c)?;
    if x0a.shape() != [manifest.n_pairs, manifest.dim] || x0b.shape() != x0a.shape() {
        return Err(Error::Format("dataset tensor shape mismatch".into()));
    }
    let direction = if manifest.has_direction {
        Some(tensor_from_cursor(&mut c)?)
    } else {
        None
    };
    let mut pairs = Vec::with_capacity(manifest.n_pairs);
    for i in 0..manifest.n_pairs {
        let row = |t: &Tensor| -> Result<Tensor> {
            Tensor::new(
                vec![manifest.dim],
                t.data()[i * manifest.dim..(i + 1) * manifest.dim].to_vec(),
            )
        };
        pairs.push((row(&x0a)?, row(&x0b)?));
    }
    Ok((manifest.name, PairSet { pairs, direction }))
}

// ---------------------------------------------------------------- config

/// Flat key=value file; '#' starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value", ln + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn load_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut text = String::new();
    fs::File::open(path)?.read_to_string(&mut text)?;
    parse_kv(&text)
}

// ---------------------------------------------------------------- logs

pub const TRAIN_LOG_HEADER: &str = "step,l_content,l_semantic,l_total";

pub fn train_log_csv(log: &TrainLog) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.l_content, r.l_semantic, r.l_total
        ));
    }
    out
}

// ---------------------------------------------------------------- PGM

/// Binary PGM (P5, maxval 255); values clamped from [0,1].
pub fn to_pgm(t: &Tensor, h: usize, w: usize) -> Result<Vec<u8>> {
    if t.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "tensor len {} vs {}x{}",
            t.len(),
            h,
            w
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    for &v in t.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{benchmark_i1, benchmark_v1, make_pairs};
    use crate::net::{DenoiserParams, LoraAdapter};
    use crate::rng::RngState;

    #[test]
    fn tensor_bytes_roundtrip() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, 7.0]).unwrap();
        let bytes = tensor_to_bytes(&t);
        assert_eq!(&bytes[..4], b"PFT1");
        let back = tensor_from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn tensor_bad_magic_rejected() {
        assert!(tensor_from_bytes(b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00").is_err());
    }

    #[test]
    fn base_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.pfck");
        let mut rng = RngState::new(3);
        let base = DenoiserParams::new_mlp(4, 8, 2, &mut rng);
        save_base(&path, &base, Some(3)).unwrap();
        let back = load_base(&path).unwrap();
        assert_eq!(back, base);
    }

    #[test]
    fn adapter_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.pfck");
        let mut rng = RngState::new(4);
        let base = DenoiserParams::new_mlp(4, 8, 2, &mut rng);
        let mut adapter = LoraAdapter::init(&mut rng, &base, 2, 0.1).unwrap();
        adapter.scale = 0.75;
        for (_, b) in &mut adapter.layers {
            for v in &mut b.data {
                *v = rng.next_gauss();
            }
        }
        save_adapter(&path, &adapter, None).unwrap();
        let back = load_adapter(&path).unwrap();
        assert_eq!(back, adapter);
    }

    #[test]
    fn adapter_checkpoint_is_not_a_base() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.pfck");
        let mut rng = RngState::new(4);
        let base = DenoiserParams::new_mlp(4, 8, 2, &mut rng);
        let adapter = LoraAdapter::init(&mut rng, &base, 2, 0.1).unwrap();
        save_adapter(&path, &adapter, None).unwrap();
        assert!(load_base(&path).is_err());
    }

    #[test]
    fn dataset_roundtrip_with_and_without_direction() {
        let dir = tempfile::tempdir().unwrap();
        for (spec, file) in [
            (benchmark_v1(0, 3), "v1.pfds"),
            (benchmark_i1(1, 2), "i1.pfds"),
        ] {
            let set = make_pairs(&spec).unwrap();
            let path = dir.path().join(file);
            save_pairs(&path, &spec.name, spec.seed, &set).unwrap();
            let (name, back) = load_pairs(&path).unwrap();
            assert_eq!(name, spec.name);
            assert_eq!(back.pairs.len(), set.pairs.len());
            for ((a, b), (c, d)) in back.pairs.iter().zip(&set.pairs) {
                assert_eq!(a.data(), c.data());
                assert_eq!(b.data(), d.data());
            }
            match (&back.direction, &set.direction) {
                (Some(x), Some(y)) => assert_eq!(x.data(), y.data()),
                (None, None) => {}
                _ => panic!("direction presence mismatch"),
            }
        }
    }

    #[test]
    fn kv_parsing() {
        let map = parse_kv("steps = 500\nlr=2e-3 # learning rate\n\n# comment\nseed=7\n").unwrap();
        assert_eq!(map["steps"], "500");
        assert_eq!(map["lr"], "2e-3");
        assert_eq!(map["seed"], "7");
        assert!(parse_kv("not a pair\n").is_err());
    }

    #[test]
    fn pgm_layout() {
        let t = Tensor::new(vec![4], vec![0.0, 0.5, 1.0, 2.0]).unwrap();
        let pgm = to_pgm(&t, 2, 2).unwrap();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        let px = &pgm[pgm.len() - 4..];
        assert_eq!(px, &[0, 128, 255, 255]);
    }
}
