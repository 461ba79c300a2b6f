//! Binary artifacts: embedding streams, projection weights, token matrices and
//! density profiles. Each is a newline-terminated JSON header followed by
//! little-endian floats, except the token matrix whose header is a sidecar.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attention::{DensityProfile, HeadQueryTable, ProjectionSet};
use crate::error::{Error, Result};
use crate::numerics::QuadratureGrid;
use crate::signal::FrameChunk;

const MAX_HEADER: u64 = 1 << 16;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_header<R: BufRead, T: for<'de> Deserialize<'de>>(reader: &mut R) -> Result<T> {
    let mut line = Vec::new();
    reader.take(MAX_HEADER).read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(format_err("missing or oversized header line"));
    }
    serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| format_err(format!("bad header: {e}")))
}

fn write_header<W: Write, T: Serialize>(writer: &mut W, header: &T) -> Result<()> {
    serde_json::to_writer(&mut *writer, header)?;
    writer.write_all(b"\n")?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<()> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => format_err("file body is truncated"),
        _ => Error::Io(e),
    })
}

fn expect_end<R: Read>(reader: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match reader.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(format_err("unexpected bytes after the body")),
    }
}

fn read_f32s<R: Read>(reader: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 4];
    read_exact_or_truncated(reader, &mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

fn write_f32s<W: Write>(writer: &mut W, values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        writer.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(reader: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    read_exact_or_truncated(reader, &mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("eight bytes")))
        .collect())
}

fn check_dtype(found: &str, want: &str) -> Result<()> {
    if found == want {
        Ok(())
    } else {
        Err(format_err(format!(
            "dtype {found:?} is not supported, expected {want:?}"
        )))
    }
}

/// Header of an embedding stream file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamHeader {
    /// Total frames in the file.
    pub frames: usize,
    pub patches: usize,
    pub dim: usize,
    pub dtype: String,
    pub chunk_frames: usize,
}

impl StreamHeader {
    pub fn new(frames: usize, patches: usize, dim: usize, chunk_frames: usize) -> Self {
        Self {
            frames,
            patches,
            dim,
            dtype: "f32".into(),
            chunk_frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dtype(&self.dtype, "f32")?;
        if self.frames == 0 || self.patches == 0 || self.dim == 0 || self.chunk_frames == 0 {
            return Err(format_err("stream header sizes must be positive"));
        }
        self.body_bytes().map(|_| ())
    }

    pub fn chunk_count(&self) -> usize {
        self.frames.div_ceil(self.chunk_frames)
    }

    pub fn body_bytes(&self) -> Result<u64> {
        [self.patches, self.dim, 4]
            .iter()
            .try_fold(self.frames as u64, |acc, &x| acc.checked_mul(x as u64))
            .ok_or_else(|| format_err("stream header sizes overflow"))
    }
}

/// Chunk-at-a-time reader over an embedding stream.
pub struct StreamReader<R> {
    reader: R,
    header: StreamHeader,
    next_frame: usize,
    finished: bool,
}

impl StreamReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: BufRead> StreamReader<R> {
    pub fn new(mut reader: R) -> Result<Self> {
        let header: StreamHeader = read_header(&mut reader)?;
        header.validate()?;
        Ok(Self {
            reader,
            header,
            next_frame: 0,
            finished: false,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    pub fn into_inner(self) -> R {
        self.reader
    }

    fn read_chunk(&mut self) -> Result<FrameChunk> {
        let h = &self.header;
        let frames = h.chunk_frames.min(h.frames - self.next_frame);
        let index = self.next_frame / h.chunk_frames;
        let data = read_f32s(&mut self.reader, frames * h.patches * h.dim)?;
        let chunk = FrameChunk::new(frames, h.patches, h.dim, data, index)
            .map_err(|e| format_err(format!("chunk {index}: {e}")))?;
        self.next_frame += frames;
        if self.next_frame == h.frames {
            expect_end(&mut self.reader)?;
        }
        Ok(chunk)
    }
}

impl<R: BufRead> Iterator for StreamReader<R> {
    type Item = Result<FrameChunk>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished || self.next_frame == self.header.frames {
            return None;
        }
        let out = self.read_chunk();
        if out.is_err() {
            self.finished = true;
        }
        Some(out)
    }
}

/// Writes a stream header and every chunk's values as f32.
pub fn write_stream<W: Write>(
    mut writer: W,
    header: &StreamHeader,
    chunks: impl IntoIterator<Item = FrameChunk>,
) -> Result<()> {
    header.validate()?;
    write_header(&mut writer, header)?;
    let mut frames = 0;
    for chunk in chunks {
        if chunk.patches() != header.patches || chunk.dim() != header.dim {
            return Err(Error::ShapeMismatch(
                "chunk shape differs from the stream header".into(),
            ));
        }
        frames += chunk.frames();
        write_f32s(&mut writer, chunk.data().iter().copied())?;
    }
    if frames != header.frames {
        return Err(Error::ShapeMismatch(format!(
            "wrote {frames} frames, header declares {}",
            header.frames
        )));
    }
    writer.flush()?;
    Ok(())
}

pub fn write_stream_file(
    path: impl AsRef<Path>,
    header: &StreamHeader,
    chunks: impl IntoIterator<Item = FrameChunk>,
) -> Result<()> {
    write_stream(BufWriter::new(File::create(path)?), header, chunks)
}

/// A reader that counts the bytes it hands out.
#[derive(Debug)]
pub struct CountingReader<R> {
    inner: R,
    bytes: u64,
    reads: u64,
}

impl<R> CountingReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            bytes: 0,
            reads: 0,
        }
    }

    pub fn bytes_read(&self) -> u64 {
        self.bytes
    }

    pub fn read_calls(&self) -> u64 {
        self.reads
    }
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.bytes += n as u64;
        self.reads += 1;
        Ok(n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsHeader {
    pub dtype: String,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub out_dim: usize,
}

/// Reads projection weights: per layer the row-major `e × e` query, key,
/// value and output matrices followed by the `e × e_out` token projection.
pub fn read_weights<R: BufRead>(mut reader: R) -> Result<Vec<ProjectionSet>> {
    let h: WeightsHeader = read_header(&mut reader)?;
    check_dtype(&h.dtype, "f32")?;
    if h.layers == 0 || h.heads == 0 || h.dim == 0 || h.out_dim == 0 || h.dim % h.heads != 0 {
        return Err(format_err("weights header sizes are invalid"));
    }
    let (e, o) = (h.dim, h.out_dim);
    let mut layers = Vec::with_capacity(h.layers);
    for l in 0..h.layers {
        let mut square = || -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_row_slice(
                e,
                e,
                &read_f32s(&mut reader, e * e)?,
            ))
        };
        let (q, k, v, z) = (square()?, square()?, square()?, square()?);
        let token = DMatrix::from_row_slice(e, o, &read_f32s(&mut reader, e * o)?);
        if [&q, &k, &v, &z, &token]
            .iter()
            .any(|m| m.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Singular(format!(
                "layer {l} weights contain non-finite values"
            )));
        }
        layers.push(ProjectionSet::from_full(h.heads, &q, &k, &v, z, token)?);
    }
    expect_end(&mut reader)?;
    Ok(layers)
}

pub fn read_weights_file(path: impl AsRef<Path>) -> Result<Vec<ProjectionSet>> {
    read_weights(BufReader::new(File::open(path)?))
}

pub fn write_weights<W: Write>(mut writer: W, layers: &[ProjectionSet]) -> Result<()> {
    let first = layers
        .first()
        .ok_or_else(|| Error::InvalidArgument("no layers to write".into()))?;
    let header = WeightsHeader {
        dtype: "f32".into(),
        layers: layers.len(),
        heads: first.heads(),
        dim: first.dim(),
        out_dim: first.out_dim(),
    };
    write_header(&mut writer, &header)?;
    for p in layers {
        if p.heads() != header.heads || p.dim() != header.dim || p.out_dim() != header.out_dim {
            return Err(Error::ShapeMismatch("layers differ in shape".into()));
        }
        use crate::attention::Projection::*;
        for m in [
            p.full(Query),
            p.full(Key),
            p.full(Value),
            p.output().clone(),
            p.token().clone(),
        ] {
            write_f32s(&mut writer, m.transpose().iter().copied())?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn write_weights_file(path: impl AsRef<Path>, layers: &[ProjectionSet]) -> Result<()> {
    write_weights(BufWriter::new(File::create(path)?), layers)
}

/// Shape of a raw row-major token matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixSidecar {
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub order: String,
}

/// Writes `tokens` as raw f32 to `bin` and its shape to `json`.
pub fn write_tokens(
    bin: impl AsRef<Path>,
    json: impl AsRef<Path>,
    tokens: &DMatrix<f64>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(bin)?);
    write_f32s(&mut w, tokens.transpose().iter().copied())?;
    w.flush()?;
    let sidecar = MatrixSidecar {
        rows: tokens.nrows(),
        cols: tokens.ncols(),
        dtype: "f32".into(),
        order: "row_major".into(),
    };
    std::fs::write(json, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_tokens(bin: impl AsRef<Path>, json: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let sidecar: MatrixSidecar = serde_json::from_str(&std::fs::read_to_string(json)?)
        .map_err(|e| format_err(e.to_string()))?;
    check_dtype(&sidecar.dtype, "f32")?;
    let mut r = BufReader::new(File::open(bin)?);
    let values = read_f32s(&mut r, sidecar.rows * sidecar.cols)?;
    expect_end(&mut r)?;
    Ok(DMatrix::from_row_slice(sidecar.rows, sidecar.cols, &values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DensityHeader {
    dtype: String,
    heads: usize,
    queries: usize,
    points: usize,
    start: f64,
    end: f64,
}

/// Writes a density profile exactly: header plus f64 densities, head-major.
pub fn write_profile<W: Write>(mut writer: W, profile: &DensityProfile) -> Result<()> {
    let grid = profile.grid();
    let header = DensityHeader {
        dtype: "f64".into(),
        heads: profile.heads(),
        queries: profile.queries(),
        points: grid.len(),
        start: grid.start(),
        end: grid.end(),
    };
    write_header(&mut writer, &header)?;
    for v in profile.table().data() {
        writer.write_all(&v.to_le_bytes())?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_profile<R: BufRead>(mut reader: R) -> Result<DensityProfile> {
    let h: DensityHeader = read_header(&mut reader)?;
    check_dtype(&h.dtype, "f64")?;
    let grid =
        QuadratureGrid::uniform(h.start, h.end, h.points).map_err(|e| format_err(e.to_string()))?;
    let data = read_f64s(&mut reader, h.heads * h.queries * h.points)?;
    expect_end(&mut reader)?;
    let table = HeadQueryTable::from_vec(h.heads, h.queries, h.points, data)
        .map_err(|e| format_err(e.to_string()))?;
    DensityProfile::new(grid, table).map_err(|e| format_err(e.to_string()))
}

pub fn write_profile_file(path: impl AsRef<Path>, profile: &DensityProfile) -> Result<()> {
    write_profile(BufWriter::new(File::create(path)?), profile)
}

pub fn read_profile_file(path: impl AsRef<Path>) -> Result<DensityProfile> {
    read_profile(BufReader::new(File::open(path)?))
}

/// CSV of `t`, the head-and-query mean density, and each head's query mean,
/// at 9 significant digits.
pub fn write_density_csv<W: Write>(mut writer: W, profile: &DensityProfile) -> Result<()> {
    let heads: Vec<Vec<f64>> = (0..profile.heads()).map(|h| profile.head_mean(h)).collect();
    let agg = profile.aggregated();
    write!(writer, "t,aggregated")?;
    for h in 0..heads.len() {
        write!(writer, ",head_{h}")?;
    }
    writeln!(writer)?;
    for (k, t) in profile.grid().points().iter().enumerate() {
        write!(writer, "{t:.8e},{:.8e}", agg[k])?;
        for head in &heads {
            write!(writer, ",{:.8e}", head[k])?;
        }
        writeln!(writer)?;
    }
    writer.flush()?;
    Ok(())
}
