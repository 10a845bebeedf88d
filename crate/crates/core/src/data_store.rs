//! On-disk tensor container, MNIST IDX ingestion, dataset files with
//! manifest sidecars, and deterministic batch iteration.
//!
//! Container layout (little-endian): magic `GNWD`, u32 version, u32 ndims,
//! ndims × u64 dims, then the row-major f32 payload. Checkpoints are a
//! `GNWP` header followed by (name, tensor block) pairs. A dataset file is a
//! plain concatenation of sample records; the manifest sidecar records one
//! byte offset per record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::config::TextDoc;
use crate::error::{Error, Result};
use crate::rand_util;
use crate::tensor::TensorF32;

pub const TENSOR_MAGIC: &[u8; 4] = b"GNWD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GNWP";
pub const FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Tensor container blocks
// ---------------------------------------------------------------------------

pub fn write_tensor_block(w: &mut impl Write, t: &TensorF32) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_block(r: &mut impl Read) -> Result<TensorF32> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {magic:02x?}, expected {TENSOR_MAGIC:02x?}"
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let ndims = read_u32(r)? as usize;
    if ndims == 0 || ndims > 8 {
        return Err(Error::Format(format!("implausible ndims {ndims}")));
    }
    let mut shape = Vec::with_capacity(ndims);
    let mut numel = 1usize;
    for _ in 0..ndims {
        let d = read_u64(r)? as usize;
        if d == 0 || numel.checked_mul(d).is_none() {
            return Err(Error::Format(format!("implausible dim {d}")));
        }
        numel *= d;
        shape.push(d);
    }
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload).map_err(|e| {
        Error::Length(format!(
            "tensor payload truncated: wanted {} bytes ({e})",
            numel * 4
        ))
    })?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    TensorF32::new(shape, data)
}

pub fn write_tensor_file(path: &Path, t: &TensorF32) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_block(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<TensorF32> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor_block(&mut r)
}

// ---------------------------------------------------------------------------
// Named-tensor checkpoints
// ---------------------------------------------------------------------------

pub fn write_checkpoint(path: &Path, entries: &[(String, TensorF32)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        write_tensor_block(&mut w, tensor)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, TensorF32)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:02x?}")));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!("implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("checkpoint name is not utf-8".into()))?;
        let tensor = read_tensor_block(&mut r)?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// MNIST IDX ingestion
// ---------------------------------------------------------------------------

/// Reads a big-endian IDX file of unsigned bytes (magic 0x0000_08NN) and
/// rescales values by 1/255 into [0, 1].
pub fn read_idx(path: &Path) -> Result<TensorF32> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("IDX header unreadable: {e}")))?;
    if magic[0] != 0 || magic[1] != 0 {
        return Err(Error::Format(format!("bad IDX magic {magic:02x?}")));
    }
    if magic[2] != 0x08 {
        return Err(Error::Format(format!(
            "unsupported IDX dtype 0x{:02x}, only unsigned byte (0x08) is supported",
            magic[2]
        )));
    }
    let ndims = magic[3] as usize;
    if ndims == 0 || ndims > 4 {
        return Err(Error::Format(format!("implausible IDX ndims {ndims}")));
    }
    let mut shape = Vec::with_capacity(ndims);
    let mut numel = 1usize;
    for _ in 0..ndims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Format("IDX header truncated".into()))?;
        let d = u32::from_be_bytes(b) as usize;
        if d == 0 {
            return Err(Error::Format("IDX dim of zero".into()));
        }
        numel *= d;
        shape.push(d);
    }
    let mut bytes = vec![0u8; numel];
    r.read_exact(&mut bytes).map_err(|_| {
        Error::Length(format!("IDX payload truncated: header promises {numel} bytes"))
    })?;
    let data: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    TensorF32::new(shape, data)
}

// ---------------------------------------------------------------------------
// Dataset records
// ---------------------------------------------------------------------------

/// Ground-truth simulator trajectory stored beside a sample: positions and
/// velocities are `[L, N, 2]`, masses `[N]`, per-state total energies `[L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMeta {
    pub positions: TensorF32,
    pub velocities: TensorF32,
    pub masses: TensorF32,
    pub energies: TensorF32,
}

/// One context/target pair. Context is `[L_in, H, W, C]`, target is
/// `[L_out, H, W, C]`; both share the spatial dims and hold values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub context: TensorF32,
    pub target: TensorF32,
    pub meta: Option<TrajectoryMeta>,
}

impl SequenceSample {
    pub fn new(context: TensorF32, target: TensorF32, meta: Option<TrajectoryMeta>) -> Result<Self> {
        if context.shape().len() != 4 || target.shape().len() != 4 {
            return Err(Error::contract("samples must be [L, H, W, C] tensors"));
        }
        if context.shape()[1..] != target.shape()[1..] {
            return Err(Error::ShapeMismatch {
                expected: context.shape().to_vec(),
                got: target.shape().to_vec(),
            });
        }
        Ok(SequenceSample { context, target, meta })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub count: usize,
    pub l_in: usize,
    pub l_out: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    pub split: String,
    pub offsets: Vec<u64>,
    /// Data file this manifest indexes (sibling of the manifest file).
    pub data_path: PathBuf,
}

impl DatasetManifest {
    pub fn manifest_path(data_path: &Path) -> PathBuf {
        data_path.with_extension("manifest")
    }

    pub fn save(&self) -> Result<()> {
        let mut doc = TextDoc::new();
        doc.set("manifest", "count", self.count);
        doc.set("manifest", "l_in", self.l_in);
        doc.set("manifest", "l_out", self.l_out);
        doc.set("manifest", "height", self.height);
        doc.set("manifest", "width", self.width);
        doc.set("manifest", "channels", self.channels);
        doc.set("manifest", "seed", self.seed);
        doc.set("manifest", "split", &self.split);
        let offsets: Vec<String> = self.offsets.iter().map(|o| o.to_string()).collect();
        doc.set("manifest", "offsets", offsets.join(","));
        doc.set(
            "manifest",
            "data_file",
            self.data_path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("data.gnwd"),
        );
        doc.save(&Self::manifest_path(&self.data_path))
    }

    pub fn load(manifest_path: &Path) -> Result<DatasetManifest> {
        let doc = TextDoc::load(manifest_path)?;
        let need = |key: &str| -> Result<&str> {
            doc.get("manifest", key)
                .ok_or_else(|| Error::Format(format!("manifest missing key `{key}`")))
        };
        let count = need("count")?
            .parse::<usize>()
            .map_err(|_| Error::Format("manifest count not an integer".into()))?;
        let offsets_raw = need("offsets")?;
        let offsets: Vec<u64> = if offsets_raw.is_empty() {
            Vec::new()
        } else {
            offsets_raw
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::Format(format!("bad offset `{s}`")))
                })
                .collect::<Result<_>>()?
        };
        if offsets.len() != count {
            return Err(Error::Length(format!(
                "manifest count {count} but {} offsets",
                offsets.len()
            )));
        }
        if offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("manifest offsets not strictly increasing".into()));
        }
        let data_file = need("data_file")?.to_string();
        let data_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(data_file);
        Ok(DatasetManifest {
            count,
            l_in: doc.get_usize("manifest", "l_in")?.unwrap_or(0),
            l_out: doc.get_usize("manifest", "l_out")?.unwrap_or(0),
            height: doc.get_usize("manifest", "height")?.unwrap_or(0),
            width: doc.get_usize("manifest", "width")?.unwrap_or(0),
            channels: doc.get_usize("manifest", "channels")?.unwrap_or(0),
            seed: doc.get_u64("manifest", "seed")?.unwrap_or(0),
            split: doc.get("manifest", "split").unwrap_or("train").to_string(),
            offsets,
            data_path,
        })
    }
}

/// Streaming dataset writer. Samples must share dims; offsets are recorded
/// per record. Writers are exclusive: one per output file.
pub struct DatasetWriter {
    w: BufWriter<File>,
    data_path: PathBuf,
    offsets: Vec<u64>,
    written: u64,
    dims: Option<(usize, usize, usize, usize, usize)>,
}

impl DatasetWriter {
    pub fn create(data_path: &Path) -> Result<Self> {
        Ok(DatasetWriter {
            w: BufWriter::new(File::create(data_path)?),
            data_path: data_path.to_path_buf(),
            offsets: Vec::new(),
            written: 0,
            dims: None,
        })
    }

    pub fn add(&mut self, sample: &SequenceSample) -> Result<()> {
        let cs = sample.context.shape();
        let ts = sample.target.shape();
        let dims = (cs[0], ts[0], cs[1], cs[2], cs[3]);
        match self.dims {
            None => self.dims = Some(dims),
            Some(d) if d == dims => {}
            Some(d) => {
                return Err(Error::contract(format!(
                    "sample dims {dims:?} do not match dataset dims {d:?}"
                )))
            }
        }
        self.offsets.push(self.written);
        let mut buf = Vec::new();
        buf.push(u8::from(sample.meta.is_some()));
        write_tensor_block(&mut buf, &sample.context)?;
        write_tensor_block(&mut buf, &sample.target)?;
        if let Some(meta) = &sample.meta {
            write_tensor_block(&mut buf, &meta.positions)?;
            write_tensor_block(&mut buf, &meta.velocities)?;
            write_tensor_block(&mut buf, &meta.masses)?;
            write_tensor_block(&mut buf, &meta.energies)?;
        }
        self.w.write_all(&buf)?;
        self.written += buf.len() as u64;
        Ok(())
    }

    pub fn finish(mut self, seed: u64, split: &str) -> Result<DatasetManifest> {
        self.w.flush()?;
        let (l_in, l_out, h, w, c) = self.dims.unwrap_or((0, 0, 0, 0, 0));
        let manifest = DatasetManifest {
            count: self.offsets.len(),
            l_in,
            l_out,
            height: h,
            width: w,
            channels: c,
            seed,
            split: split.to_string(),
            offsets: self.offsets,
            data_path: self.data_path,
        };
        manifest.save()?;
        Ok(manifest)
    }
}

/// Writes a stream of samples to `data_path` plus a manifest sidecar.
pub fn write_dataset<I>(samples: I, data_path: &Path, seed: u64, split: &str) -> Result<DatasetManifest>
where
    I: IntoIterator<Item = SequenceSample>,
{
    let mut writer = DatasetWriter::create(data_path)?;
    for sample in samples {
        writer.add(&sample)?;
    }
    writer.finish(seed, split)
}

/// Random-access dataset reader. Create one per worker; readers on an
/// immutable file are safe to use concurrently.
pub struct DatasetReader {
    manifest: DatasetManifest,
    file: BufReader<File>,
}

impl DatasetReader {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let file = BufReader::new(File::open(&manifest.data_path)?);
        Ok(DatasetReader { manifest, file })
    }

    pub fn from_manifest(manifest: DatasetManifest) -> Result<Self> {
        let file = BufReader::new(File::open(&manifest.data_path)?);
        Ok(DatasetReader { manifest, file })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn read_sample(&mut self, index: usize) -> Result<SequenceSample> {
        let offset = *self
            .manifest
            .offsets
            .get(index)
            .ok_or_else(|| Error::contract(format!("sample index {index} out of range")))?;
        self.file.seek(SeekFrom::Start(offset))?;
        let mut flag = [0u8; 1];
        self.file.read_exact(&mut flag)?;
        let context = read_tensor_block(&mut self.file)?;
        let target = read_tensor_block(&mut self.file)?;
        let meta = if flag[0] != 0 {
            Some(TrajectoryMeta {
                positions: read_tensor_block(&mut self.file)?,
                velocities: read_tensor_block(&mut self.file)?,
                masses: read_tensor_block(&mut self.file)?,
                energies: read_tensor_block(&mut self.file)?,
            })
        } else {
            None
        };
        SequenceSample::new(context, target, meta)
    }
}

// ---------------------------------------------------------------------------
// Deterministic batching
// ---------------------------------------------------------------------------

/// One-epoch batch iterator over sample indices: a seeded Fisher-Yates
/// permutation chunked into batches (last batch may be short). Single
/// consumer; create one per epoch with a per-epoch seed.
#[derive(Debug)]
pub struct BatchIter {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

pub fn batch_iter(count: usize, batch_size: usize, seed: u64) -> Result<BatchIter> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = rand_util::rng_from_seed(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    Ok(BatchIter {
        order,
        batch_size,
        cursor: 0,
    })
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(batch)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
