//! Binary shards of paired per-token activations.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "XCODSHRD"
//! version u32      1
//! n_sides u32      1 or 2
//! dims    u32 × n_sides
//! n_rows  u64
//! dtype   u8       0 = f32
//! payload n_rows × Σ dims × 4 bytes, row-major, side A then side B per row
//! ```
//!
//! Token metadata lives next to the shard in `<path>.meta.jsonl`, one JSON
//! record per payload row in the same order. Keeping it out of the payload
//! leaves the numeric part at a fixed stride.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coder::Batch;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

pub const SHARD_MAGIC: &[u8; 8] = b"XCODSHRD";
pub const SHARD_VERSION: u32 = 1;
pub const META_SUFFIX: &str = ".meta.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        4
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub n_sides: u32,
    pub dims: Vec<u32>,
    pub n_rows: u64,
    pub dtype: Dtype,
}

impl ShardHeader {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if !(1..=2).contains(&dims.len()) {
            return Err(Error::InvalidShape(format!(
                "shards hold 1 or 2 sides, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape("zero-width side".into()));
        }
        Ok(Self {
            n_sides: dims.len() as u32,
            dims: dims.iter().map(|&d| d as u32).collect(),
            n_rows: 0,
            dtype: Dtype::F32,
        })
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn row_width(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).sum()
    }

    pub fn row_bytes(&self) -> u64 {
        (self.row_width() * self.dtype.size()) as u64
    }

    pub fn encoded_len(&self) -> u64 {
        8 + 4 + 4 + 4 * self.dims.len() as u64 + 8 + 1
    }

    fn n_rows_offset(&self) -> u64 {
        8 + 4 + 4 + 4 * self.dims.len() as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len() as usize);
        out.extend_from_slice(SHARD_MAGIC);
        out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
        out.extend_from_slice(&self.n_sides.to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.n_rows.to_le_bytes());
        out.push(self.dtype.code());
        out
    }

    fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != SHARD_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: String::from_utf8_lossy(SHARD_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let version = read_u32(r).map_err(io)?;
        if version != SHARD_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                supported: SHARD_VERSION,
            });
        }
        let n_sides = read_u32(r).map_err(io)?;
        if !(1..=2).contains(&n_sides) {
            return Err(Error::InvalidShape(format!("{}: n_sides = {n_sides}", path.display())));
        }
        let dims = (0..n_sides)
            .map(|_| read_u32(r))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let mut n_rows = [0u8; 8];
        r.read_exact(&mut n_rows).map_err(io)?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype).map_err(io)?;
        Ok(Self {
            n_sides,
            dims,
            n_rows: u64::from_le_bytes(n_rows),
            dtype: Dtype::from_code(dtype[0])?,
        })
    }

    fn compatible_with(&self, other: &ShardHeader) -> bool {
        self.n_sides == other.n_sides && self.dims == other.dims && self.dtype == other.dtype
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub doc_id: u64,
    pub position: u64,
    pub token_id: u32,
    pub token_text: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(META_SUFFIX);
    PathBuf::from(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteSummary {
    pub rows_written: u64,
    /// Size of the shard file (header plus payload).
    pub byte_count: u64,
}

/// Streaming shard writer. The row count in the header is patched on
/// [`ShardWriter::finish`]; any error removes the partial files.
pub struct ShardWriter {
    path: PathBuf,
    header: ShardHeader,
    out: Option<BufWriter<File>>,
    meta: Option<BufWriter<File>>,
    rows: u64,
    scratch: Vec<u8>,
}

impl ShardWriter {
    /// Creates a shard with a metadata sidecar; every row needs a [`TokenMeta`].
    pub fn create(path: impl AsRef<Path>, dims: &[usize]) -> Result<Self> {
        Self::open(path.as_ref(), dims, true)
    }

    /// Creates a shard with no sidecar (e.g. an embedding table).
    pub fn create_without_meta(path: impl AsRef<Path>, dims: &[usize]) -> Result<Self> {
        Self::open(path.as_ref(), dims, false)
    }

    fn open(path: &Path, dims: &[usize], with_meta: bool) -> Result<Self> {
        let header = ShardHeader::new(dims)?;
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        out.write_all(&header.to_bytes()).map_err(|e| Error::io(path, e))?;
        let meta = if with_meta {
            let mp = sidecar_path(path);
            match File::create(&mp) {
                Ok(f) => Some(BufWriter::new(f)),
                Err(e) => {
                    let _ = std::fs::remove_file(path);
                    return Err(Error::io(mp, e));
                }
            }
        } else {
            None
        };
        Ok(Self {
            path: path.to_path_buf(),
            header,
            out: Some(out),
            meta,
            rows: 0,
            scratch: Vec::new(),
        })
    }

    pub fn header(&self) -> &ShardHeader {
        &self.header
    }

    pub fn rows_written(&self) -> u64 {
        self.rows
    }

    /// Appends one row, given as one slice per side.
    pub fn push(&mut self, row: &[&[f32]], meta: Option<&TokenMeta>) -> Result<()> {
        match self.push_inner(row, meta) {
            Ok(()) => Ok(()),
            Err(e) => {
                self.abort();
                Err(e)
            }
        }
    }

    fn push_inner(&mut self, row: &[&[f32]], meta: Option<&TokenMeta>) -> Result<()> {
        let row_index = self.rows;
        if row.len() != self.header.n_sides as usize {
            return Err(Error::RowShape {
                row: row_index,
                detail: format!("{} sides given, shard has {}", row.len(), self.header.n_sides),
            });
        }
        for (i, (side, &d)) in row.iter().zip(&self.header.dims).enumerate() {
            if side.len() != d as usize {
                return Err(Error::RowShape {
                    row: row_index,
                    detail: format!("side {i} has width {}, shard expects {d}", side.len()),
                });
            }
        }
        let out = self
            .out
            .as_mut()
            .ok_or_else(|| Error::InvalidConfig("writer already closed".into()))?;
        self.scratch.clear();
        for side in row {
            for v in *side {
                self.scratch.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&self.scratch).map_err(|e| Error::io(&self.path, e))?;
        match (&mut self.meta, meta) {
            (Some(w), Some(m)) => {
                serde_json::to_writer(&mut *w, m)?;
                w.write_all(b"\n").map_err(|e| Error::io(sidecar_path(&self.path), e))?;
            }
            (Some(_), None) => {
                return Err(Error::Misaligned(format!("row {row_index} has no token metadata")));
            }
            (None, _) => {}
        }
        self.rows += 1;
        Ok(())
    }

    /// Flushes, patches the row count and returns the write summary.
    pub fn finish(mut self) -> Result<WriteSummary> {
        match self.finish_inner() {
            Ok(summary) => Ok(summary),
            Err(e) => {
                self.abort();
                Err(e)
            }
        }
    }

    fn finish_inner(&mut self) -> Result<WriteSummary> {
        let path = self.path.clone();
        let io = |e| Error::io(&path, e);
        let mut out = self
            .out
            .take()
            .ok_or_else(|| Error::InvalidConfig("writer already closed".into()))?;
        out.flush().map_err(io)?;
        let mut file = out.into_inner().map_err(|e| io(e.into_error()))?;
        file.seek(SeekFrom::Start(self.header.n_rows_offset())).map_err(io)?;
        file.write_all(&self.rows.to_le_bytes()).map_err(io)?;
        file.sync_all().map_err(io)?;
        if let Some(mut m) = self.meta.take() {
            m.flush().map_err(|e| Error::io(sidecar_path(&path), e))?;
        }
        self.header.n_rows = self.rows;
        Ok(WriteSummary {
            rows_written: self.rows,
            byte_count: self.header.encoded_len() + self.rows * self.header.row_bytes(),
        })
    }

    fn abort(&mut self) {
        self.out = None;
        let had_meta = self.meta.take().is_some();
        let _ = std::fs::remove_file(&self.path);
        if had_meta {
            let _ = std::fs::remove_file(sidecar_path(&self.path));
        }
    }
}

/// Writes a complete shard from row and metadata iterators.
pub fn write_shard<R, M>(path: impl AsRef<Path>, dims: &[usize], rows: R, meta: M) -> Result<WriteSummary>
where
    R: IntoIterator<Item = Vec<Vec<f32>>>,
    M: IntoIterator<Item = TokenMeta>,
{
    let mut writer = ShardWriter::create(path, dims)?;
    let mut meta = meta.into_iter();
    for row in rows {
        let sides: Vec<&[f32]> = row.iter().map(Vec::as_slice).collect();
        let m = meta.next();
        writer.push(&sides, m.as_ref())?;
    }
    if meta.next().is_some() {
        writer.abort();
        return Err(Error::Misaligned("more metadata records than rows".into()));
    }
    writer.finish()
}

/// Sequential reader over one shard's payload.
pub struct ShardReader {
    path: PathBuf,
    header: ShardHeader,
    inner: BufReader<File>,
    next_row: u64,
    buf: Vec<u8>,
}

impl ShardReader {
    /// Opens and validates a shard. The header and payload length are checked
    /// before any row is read.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut inner = BufReader::new(file);
        let header = ShardHeader::read_from(&mut inner, path)?;
        let expected = header.n_rows.saturating_mul(header.row_bytes());
        let actual = file_len.saturating_sub(header.encoded_len());
        if expected != actual {
            return Err(Error::TruncatedPayload {
                path: path.to_path_buf(),
                expected,
                actual,
            });
        }
        let buf = vec![0u8; header.row_bytes() as usize];
        Ok(Self {
            path: path.to_path_buf(),
            header,
            inner,
            next_row: 0,
            buf,
        })
    }

    pub fn header(&self) -> &ShardHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Reads the next row into `out` (all sides concatenated). Returns
    /// `false` at end of payload.
    pub fn read_row_into(&mut self, out: &mut [f32]) -> Result<bool> {
        if self.next_row >= self.header.n_rows {
            return Ok(false);
        }
        debug_assert_eq!(out.len(), self.header.row_width());
        self.inner
            .read_exact(&mut self.buf)
            .map_err(|e| Error::io(&self.path, e))?;
        for (v, chunk) in out.iter_mut().zip(self.buf.chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        self.next_row += 1;
        Ok(true)
    }

    /// Next row split per side.
    pub fn next_row(&mut self) -> Result<Option<Vec<Vec<f32>>>> {
        let mut flat = vec![0.0f32; self.header.row_width()];
        if !self.read_row_into(&mut flat)? {
            return Ok(None);
        }
        Ok(Some(split_sides(&flat, &self.header.dims_usize())))
    }
}

fn split_sides(flat: &[f32], dims: &[usize]) -> Vec<Vec<f32>> {
    let mut out = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for &d in dims {
        out.push(flat[offset..offset + d].to_vec());
        offset += d;
    }
    out
}

pub fn open_shard(path: impl AsRef<Path>) -> Result<(ShardReader, ShardHeader)> {
    let reader = ShardReader::open(path)?;
    let header = reader.header().clone();
    Ok((reader, header))
}

/// Reads a shard's metadata sidecar in full.
pub fn read_meta(path: impl AsRef<Path>) -> Result<Vec<TokenMeta>> {
    MetaReader::open(path)?.collect()
}

/// Streaming reader over a `.meta.jsonl` sidecar.
pub struct MetaReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
}

impl MetaReader {
    /// Opens the sidecar belonging to the shard at `shard_path`.
    pub fn open(shard_path: impl AsRef<Path>) -> Result<Self> {
        let path = sidecar_path(shard_path.as_ref());
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            lines: BufReader::new(file).lines(),
        })
    }
}

impl Iterator for MetaReader {
    type Item = Result<TokenMeta>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(serde_json::from_str(&line).map_err(Error::from));
        }
    }
}

fn common_header(paths: &[PathBuf]) -> Result<ShardHeader> {
    let mut header: Option<ShardHeader> = None;
    for p in paths {
        let h = ShardReader::open(p)?.header().clone();
        match &header {
            None => header = Some(h),
            Some(first) if !first.compatible_with(&h) => {
                return Err(Error::HeaderMismatch(format!(
                    "{} has dims {:?}, {} has {:?}",
                    paths[0].display(),
                    first.dims,
                    p.display(),
                    h.dims
                )));
            }
            Some(_) => {}
        }
    }
    header.ok_or_else(|| Error::Empty("no shard paths given".into()))
}

/// Shuffled batch stream over a list of shards.
///
/// Rows pass through a seeded reservoir-style buffer: once the buffer is
/// full, each incoming row replaces a uniformly chosen resident, which is
/// emitted. At the end of an epoch the buffer drains in random order. The
/// final batch of the stream may be short.
pub struct BatchStream {
    paths: Vec<PathBuf>,
    dims: Vec<usize>,
    batch_size: usize,
    capacity: usize,
    rng: ChaCha8Rng,
    epochs: Option<u64>,
    epoch: u64,
    rows_this_epoch: u64,
    shard_index: usize,
    reader: Option<ShardReader>,
    buffer: Vec<Vec<f32>>,
    draining: bool,
    done: bool,
}

/// Opens a single-epoch shuffled batch stream.
pub fn stream_batches(paths: &[PathBuf], batch_size: usize, shuffle_buffer: usize, seed: u64) -> Result<BatchStream> {
    BatchStream::new(paths, batch_size, shuffle_buffer, seed)
}

impl BatchStream {
    pub fn new(paths: &[PathBuf], batch_size: usize, shuffle_buffer: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        let header = common_header(paths)?;
        Ok(Self {
            paths: paths.to_vec(),
            dims: header.dims_usize(),
            batch_size,
            capacity: shuffle_buffer.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
            epochs: Some(1),
            epoch: 0,
            rows_this_epoch: 0,
            shard_index: 0,
            reader: None,
            buffer: Vec::new(),
            draining: false,
            done: false,
        })
    }

    /// Number of passes over the corpus; `None` repeats forever.
    pub fn with_epochs(mut self, epochs: Option<u64>) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn pull_input(&mut self) -> Result<Option<Vec<f32>>> {
        let width: usize = self.dims.iter().sum();
        loop {
            if self.reader.is_none() {
                if self.shard_index >= self.paths.len() {
                    return Ok(None);
                }
                let r = ShardReader::open(&self.paths[self.shard_index])?;
                self.shard_index += 1;
                self.reader = Some(r);
            }
            let mut row = vec![0.0f32; width];
            if self.reader.as_mut().expect("reader present").read_row_into(&mut row)? {
                self.rows_this_epoch += 1;
                return Ok(Some(row));
            }
            self.reader = None;
        }
    }

    fn next_row(&mut self) -> Result<Option<Vec<f32>>> {
        loop {
            if self.done {
                return Ok(None);
            }
            if !self.draining {
                match self.pull_input()? {
                    Some(row) if self.buffer.len() < self.capacity => self.buffer.push(row),
                    Some(row) => {
                        let i = self.rng.random_range(0..self.capacity);
                        return Ok(Some(std::mem::replace(&mut self.buffer[i], row)));
                    }
                    None => self.draining = true,
                }
                continue;
            }
            if !self.buffer.is_empty() {
                let i = self.rng.random_range(0..self.buffer.len());
                return Ok(Some(self.buffer.swap_remove(i)));
            }
            self.epoch += 1;
            let exhausted = self.epochs.is_some_and(|n| self.epoch >= n);
            if exhausted || self.rows_this_epoch == 0 {
                self.done = true;
                continue;
            }
            self.rows_this_epoch = 0;
            self.shard_index = 0;
            self.draining = false;
        }
    }

    fn next_batch(&mut self) -> Result<Option<Batch>> {
        let mut rows = Vec::with_capacity(self.batch_size);
        while rows.len() < self.batch_size {
            match self.next_row()? {
                Some(r) => rows.push(r),
                None => break,
            }
        }
        if rows.is_empty() {
            return Ok(None);
        }
        Ok(Some(rows_to_batch(&rows, &self.dims)?))
    }
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_batch() {
            Ok(Some(b)) => Some(Ok(b)),
            Ok(None) => None,
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

fn rows_to_batch(rows: &[Vec<f32>], dims: &[usize]) -> Result<Batch> {
    let mut sides = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for &d in dims {
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            data.extend(r[offset..offset + d].iter().map(|&v| f64::from(v)));
        }
        sides.push(Matrix::from_vec(rows.len(), d, data)?);
        offset += d;
    }
    Batch::new(sides)
}

/// One shard row with its token metadata, widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedRow {
    pub sides: Vec<Vec<f64>>,
    pub meta: TokenMeta,
}

/// Sequential, unshuffled pass over shards and their sidecars.
pub struct AnnotatedRows {
    paths: Vec<PathBuf>,
    next_shard: usize,
    current: Option<(ShardReader, MetaReader)>,
    dims: Vec<usize>,
    failed: bool,
}

impl AnnotatedRows {
    pub fn open(paths: &[PathBuf]) -> Result<Self> {
        let header = common_header(paths)?;
        Ok(Self {
            paths: paths.to_vec(),
            next_shard: 0,
            current: None,
            dims: header.dims_usize(),
            failed: false,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn advance(&mut self) -> Result<Option<AnnotatedRow>> {
        loop {
            if self.current.is_none() {
                if self.next_shard >= self.paths.len() {
                    return Ok(None);
                }
                let p = &self.paths[self.next_shard];
                self.current = Some((ShardReader::open(p)?, MetaReader::open(p)?));
                self.next_shard += 1;
            }
            let (reader, meta) = self.current.as_mut().expect("current shard");
            let row = reader.next_row()?;
            let m = meta.next().transpose()?;
            match (row, m) {
                (Some(r), Some(m)) => {
                    return Ok(Some(AnnotatedRow {
                        sides: r.into_iter().map(|s| s.into_iter().map(f64::from).collect()).collect(),
                        meta: m,
                    }))
                }
                (None, None) => self.current = None,
                (Some(_), None) => {
                    return Err(Error::Misaligned(format!(
                        "{} has more rows than metadata records",
                        reader.path().display()
                    )))
                }
                (None, Some(_)) => {
                    return Err(Error::Misaligned(format!(
                        "{} has more metadata records than rows",
                        reader.path().display()
                    )))
                }
            }
        }
    }
}

impl Iterator for AnnotatedRows {
    type Item = Result<AnnotatedRow>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let out = self.advance().transpose();
        if matches!(out, Some(Err(_))) {
            self.failed = true;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideStats {
    pub mean_norm: f64,
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub rows: u64,
    pub sides: Vec<SideStats>,
}

/// Per-side row count, mean L2 norm and mean vector in one streaming pass.
pub fn shard_stats(paths: &[PathBuf]) -> Result<CorpusStats> {
    let header = common_header(paths)?;
    let dims = header.dims_usize();
    let mut norm_sums = vec![0.0f64; dims.len()];
    let mut vec_sums: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; d]).collect();
    let mut rows = 0u64;
    let mut flat = vec![0.0f32; header.row_width()];
    let mut wide = vec![0.0f64; header.row_width()];
    for p in paths {
        let mut reader = ShardReader::open(p)?;
        while reader.read_row_into(&mut flat)? {
            for (w, &v) in wide.iter_mut().zip(&flat) {
                *w = f64::from(v);
            }
            let mut offset = 0;
            for (i, &d) in dims.iter().enumerate() {
                let side = &wide[offset..offset + d];
                norm_sums[i] += dot(side, side).sqrt();
                for (acc, &v) in vec_sums[i].iter_mut().zip(side) {
                    *acc += v;
                }
                offset += d;
            }
            rows += 1;
        }
    }
    let denom = rows.max(1) as f64;
    Ok(CorpusStats {
        rows,
        sides: norm_sums
            .into_iter()
            .zip(vec_sums)
            .map(|(n, v)| SideStats {
                mean_norm: n / denom,
                mean: v.into_iter().map(|x| x / denom).collect(),
            })
            .collect(),
    })
}
