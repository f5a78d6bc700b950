//! The `KVCR` activation-stream file format and batched iteration over it.
//!
//! One file holds the per-token key or value rows of a single layer:
//!
//! ```text
//! offset  0  magic "KVCR"
//!         4  version        u32 = 1
//!         8  layer_index    u32
//!        12  feature_dim    u32
//!        16  kind           u8  (0 = key, 1 = value)
//!        17  dtype          u8  (0 = f32)
//!        18  reserved       u16 = 0
//!        20  token_count    u64
//!        28  reserved       u32 = 0
//!        32  payload        token_count × feature_dim f32, row-major
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result, ResultExt};
use crate::linalg::DenseMatrix;
use crate::scalar::Real;
use crate::Kind;

pub const STREAM_MAGIC: [u8; 4] = *b"KVCR";
pub const STREAM_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 32;
pub const DEFAULT_BATCH_SIZE: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
        }
    }

    fn width(self) -> u64 {
        match self {
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub layer_index: u32,
    pub feature_dim: u32,
    pub kind: Kind,
    pub dtype: Dtype,
    pub token_count: u64,
}

impl StreamHeader {
    pub fn new(layer_index: u32, kind: Kind, feature_dim: u32, token_count: u64) -> Self {
        Self {
            layer_index,
            feature_dim,
            kind,
            dtype: Dtype::F32,
            token_count,
        }
    }

    pub fn payload_len(&self) -> u64 {
        self.token_count * self.feature_dim as u64 * self.dtype.width()
    }

    pub fn file_len(&self) -> u64 {
        HEADER_LEN + self.payload_len()
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[0..4].copy_from_slice(&STREAM_MAGIC);
        b[4..8].copy_from_slice(&STREAM_VERSION.to_le_bytes());
        b[8..12].copy_from_slice(&self.layer_index.to_le_bytes());
        b[12..16].copy_from_slice(&self.feature_dim.to_le_bytes());
        b[16] = self.kind.code();
        b[17] = self.dtype.code();
        b[20..28].copy_from_slice(&self.token_count.to_le_bytes());
        b
    }

    pub fn parse(b: &[u8; HEADER_LEN as usize]) -> Result<Self> {
        if b[0..4] != STREAM_MAGIC {
            return Err(Error::format(
                0,
                format!("bad magic {:?}, expected \"KVCR\"", &b[0..4]),
            ));
        }
        let version = u32_at(b, 4);
        if version != STREAM_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let feature_dim = u32_at(b, 12);
        if feature_dim == 0 {
            return Err(Error::format(12, "feature_dim must be at least 1"));
        }
        let kind = Kind::from_code(b[16])
            .ok_or_else(|| Error::format(16, format!("unknown kind code {}", b[16])))?;
        if b[17] != Dtype::F32.code() {
            return Err(Error::format(
                17,
                format!("unsupported dtype code {}", b[17]),
            ));
        }
        if b[18] != 0 || b[19] != 0 {
            return Err(Error::format(18, "reserved field is not zero"));
        }
        if u32_at(b, 28) != 0 {
            return Err(Error::format(28, "reserved field is not zero"));
        }
        Ok(Self {
            layer_index: u32_at(b, 8),
            feature_dim,
            kind,
            dtype: Dtype::F32,
            token_count: u64::from_le_bytes(b[20..28].try_into().unwrap()),
        })
    }
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// `layer{L}_{key|value}.kvcr`
pub fn stream_file_name(layer: u32, kind: Kind) -> String {
    format!("layer{layer}_{kind}.kvcr")
}

/// Incremental writer. Rows go to a sibling temp file that is renamed into
/// place by [`StreamWriter::finish`]; dropping an unfinished writer deletes it.
pub struct StreamWriter {
    header: StreamHeader,
    path: PathBuf,
    tmp: PathBuf,
    out: Option<BufWriter<File>>,
    written: u64,
}

impl StreamWriter {
    pub fn create(path: impl AsRef<Path>, header: StreamHeader) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if header.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be at least 1"));
        }
        let tmp = tmp_path(&path);
        let mut out = BufWriter::new(File::create(&tmp).in_file(&tmp)?);
        out.write_all(&header.to_bytes()).in_file(&tmp)?;
        Ok(Self {
            header,
            path,
            tmp,
            out: Some(out),
            written: 0,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    pub fn push_row<T: Real>(&mut self, row: &[T]) -> Result<()> {
        let token = self.written;
        if token == self.header.token_count {
            return Err(Error::invalid(format!(
                "stream header declares {} tokens; refusing row {token}",
                self.header.token_count
            )));
        }
        let dim = self.header.feature_dim as usize;
        if row.len() != dim {
            return Err(Error::invalid(format!(
                "token {token}: row has {} entries, feature_dim is {dim}",
                row.len()
            )));
        }
        let mut bytes = Vec::with_capacity(dim * 4);
        for (col, &x) in row.iter().enumerate() {
            let v = x.as_f32();
            if !v.is_finite() {
                return Err(Error::NonFinitePayload {
                    token,
                    offset: HEADER_LEN + (token * dim as u64 + col as u64) * 4,
                });
            }
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let out = self.out.as_mut().expect("writer already finished");
        out.write_all(&bytes).in_file(&self.tmp)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.header.token_count {
            return Err(Error::invalid(format!(
                "stream header declares {} tokens but {} rows were written",
                self.header.token_count, self.written
            )));
        }
        let out = self.out.take().expect("writer already finished");
        let file = out
            .into_inner()
            .map_err(|e| e.into_error())
            .in_file(&self.tmp)?;
        file.sync_all().in_file(&self.tmp)?;
        drop(file);
        fs::rename(&self.tmp, &self.path).in_file(&self.path)?;
        Ok(())
    }
}

impl Drop for StreamWriter {
    fn drop(&mut self) {
        if self.out.take().is_some() {
            let _ = fs::remove_file(&self.tmp);
        }
    }
}

pub(crate) fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes a complete stream atomically. The number of rows must equal
/// `header.token_count` and every row must have `feature_dim` entries.
pub fn write_stream<T, R, I>(path: impl AsRef<Path>, header: StreamHeader, rows: I) -> Result<()>
where
    T: Real,
    R: AsRef<[T]>,
    I: IntoIterator<Item = R>,
{
    let path = path.as_ref();
    let mut w = StreamWriter::create(path, header)?;
    for row in rows {
        w.push_row(row.as_ref()).map_err(|e| e.in_file(path))?;
    }
    w.finish().map_err(|e| e.in_file(path))
}

/// A lazily read stream of per-token rows.
///
/// As an iterator it yields raw `f32` rows one at a time; use
/// [`batch_iter`] for the batched `f64` (or generic) view used by analysis.
pub struct ActivationStream {
    header: StreamHeader,
    path: PathBuf,
    reader: BufReader<File>,
    next_token: u64,
    failed: bool,
}

/// Opens a stream and validates its header and payload length.
pub fn read_stream(path: impl AsRef<Path>) -> Result<ActivationStream> {
    let path = path.as_ref().to_path_buf();
    let file = File::open(&path).in_file(&path)?;
    let actual = file.metadata().in_file(&path)?.len();
    if actual < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            actual,
        }
        .in_file(&path));
    }
    let mut reader = BufReader::new(file);
    let mut raw = [0u8; HEADER_LEN as usize];
    reader.read_exact(&mut raw).in_file(&path)?;
    let header = StreamHeader::parse(&raw).in_file(&path)?;
    let expected = header.file_len();
    if actual < expected {
        return Err(Error::Truncated { expected, actual }.in_file(&path));
    }
    if actual > expected {
        return Err(Error::format(
            expected,
            format!(
                "{} trailing bytes after the declared payload",
                actual - expected
            ),
        )
        .in_file(&path));
    }
    Ok(ActivationStream {
        header,
        path,
        reader,
        next_token: 0,
        failed: false,
    })
}

impl ActivationStream {
    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn remaining(&self) -> u64 {
        self.header.token_count - self.next_token
    }

    /// Reads up to `max_rows` rows into `out` (cleared first) as `T`.
    /// Returns the number of rows read.
    fn read_rows<T: Real>(
        &mut self,
        max_rows: usize,
        buf: &mut Vec<u8>,
        out: &mut Vec<T>,
    ) -> Result<usize> {
        let n = (self.remaining().min(max_rows as u64)) as usize;
        let dim = self.header.feature_dim as usize;
        out.clear();
        if n == 0 {
            return Ok(0);
        }
        buf.resize(n * dim * 4, 0);
        if let Err(e) = self.reader.read_exact(buf) {
            self.failed = true;
            return Err(Error::from(e).in_file(&self.path));
        }
        out.reserve(n * dim);
        for (i, word) in buf.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(word.try_into().unwrap());
            if !v.is_finite() {
                self.failed = true;
                let token = self.next_token + (i / dim) as u64;
                let offset = HEADER_LEN + (self.next_token * dim as u64 + i as u64) * 4;
                return Err(Error::NonFinitePayload { token, offset }.in_file(&self.path));
            }
            out.push(T::of_f32(v));
        }
        self.next_token += n as u64;
        Ok(n)
    }
}

impl Iterator for ActivationStream {
    type Item = Result<Vec<f32>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.remaining() == 0 {
            return None;
        }
        let mut buf = Vec::new();
        let mut row = Vec::new();
        Some(self.read_rows::<f32>(1, &mut buf, &mut row).map(|_| row))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = if self.failed {
            0
        } else {
            self.remaining() as usize
        };
        (n, Some(n))
    }
}

/// A contiguous run of rows from a stream.
#[derive(Debug, Clone)]
pub struct BatchChunk<T> {
    /// `b × feature_dim`.
    pub matrix: DenseMatrix<T>,
    /// Index of the chunk's first token within the stream.
    pub token_offset: u64,
}

/// Iterator over a stream in chunks of at most `batch_size` rows. Holds one
/// chunk's worth of buffers at a time.
pub struct BatchIter<T> {
    stream: ActivationStream,
    batch_size: usize,
    bytes: Vec<u8>,
    _scalar: std::marker::PhantomData<T>,
}

pub fn batch_iter<T: Real>(stream: ActivationStream, batch_size: usize) -> Result<BatchIter<T>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    Ok(BatchIter {
        stream,
        batch_size,
        bytes: Vec::new(),
        _scalar: std::marker::PhantomData,
    })
}

impl<T> BatchIter<T> {
    pub fn header(&self) -> &StreamHeader {
        &self.stream.header
    }
}

impl<T: Real> Iterator for BatchIter<T> {
    type Item = Result<BatchChunk<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.stream.failed || self.stream.remaining() == 0 {
            return None;
        }
        let token_offset = self.stream.next_token;
        let mut data = Vec::new();
        let result = self
            .stream
            .read_rows(self.batch_size, &mut self.bytes, &mut data)
            .and_then(|n| DenseMatrix::from_vec(n, self.stream.header.feature_dim as usize, data));
        Some(result.map(|matrix| BatchChunk {
            matrix,
            token_offset,
        }))
    }
}
