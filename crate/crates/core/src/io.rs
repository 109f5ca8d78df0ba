//! On-disk formats.
//!
//! Binary tensor file: magic `PCT1`, u32 little-endian rank, rank u32
//! little-endian dims, then the payload of f64 little-endian values in
//! row-major order. Model checkpoints (`PCM1`) and patch artifacts
//! (`PCP1`) reuse the same payload convention after a text header.
//! Annotations are one `row<TAB>col` line per point with a final
//! `count<TAB>N` line. A dataset directory is an index file of record
//! basenames plus three files per record.
//!
//! Readers track the byte offset so that malformed input is rejected
//! with the file name and the offset of the first bad byte.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use patchbench_tensor::Tensor;

use crate::error::{Error, Result};
use crate::scene::{Dataset, SceneRecord, Splits};
use crate::types::{DensityMap, ImageTensor, PointAnnotations};

pub const TENSOR_MAGIC: &[u8; 4] = b"PCT1";
pub const MODEL_MAGIC: &[u8; 4] = b"PCM1";
pub const PATCH_MAGIC: &[u8; 4] = b"PCP1";

const INDEX_FILE: &str = "index.txt";
const SPLITS_FILE: &str = "splits.txt";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::io(path.display().to_string(), source)
}

/// Byte-counting reader used by all binary decoders.
pub(crate) struct Decoder<R> {
    inner: R,
    file: String,
    offset: u64,
}

impl<R: Read> Decoder<R> {
    pub(crate) fn new(inner: R, file: impl Into<String>) -> Self {
        Decoder {
            inner,
            file: file.into(),
            offset: 0,
        }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.offset
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::format(self.file.clone(), self.offset, reason)
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(self.fail(format!("truncated while reading {what}")))
            }
            Err(e) => Err(Error::io(self.file.clone(), e)),
        }
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let mut m = [0u8; 4];
        self.read_exact(&mut m, "magic")?;
        if &m != expect {
            self.offset -= 4;
            return Err(self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(expect)
            )));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    /// Rank, dims, then the f64 payload: the PCT1 convention sans magic.
    pub(crate) fn tensor_payload(&mut self) -> Result<Tensor> {
        let rank = self.u32("tensor rank")? as usize;
        if rank > 8 {
            self.offset -= 4;
            return Err(self.fail(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            shape.push(self.u32(&format!("dim {i}"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            self.read_exact(&mut buf, "tensor payload")?;
            *v = f64::from_le_bytes(buf);
        }
        Tensor::new(shape, data).map_err(Error::from)
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.fail("trailing bytes after payload")),
            Err(e) => Err(Error::io(self.file.clone(), e)),
        }
    }

    /// Header lines up to and including the first blank line.
    pub(crate) fn header_lines(&mut self) -> Result<Vec<String>> {
        let mut lines = Vec::new();
        let mut line = Vec::new();
        loop {
            let mut byte = [0u8; 1];
            self.read_exact(&mut byte, "text header")?;
            if byte[0] == b'\n' {
                if line.is_empty() {
                    return Ok(lines);
                }
                let text = String::from_utf8(std::mem::take(&mut line))
                    .map_err(|_| self.fail("non-UTF8 header line"))?;
                lines.push(text);
            } else {
                line.push(byte[0]);
            }
        }
    }
}

pub(crate) fn write_tensor_payload<W: Write>(w: &mut W, tensor: &Tensor) -> std::io::Result<()> {
    w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    (|| {
        w.write_all(TENSOR_MAGIC)?;
        write_tensor_payload(&mut w, tensor)?;
        w.flush()
    })()
    .map_err(|e| io_err(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file), path.display().to_string());
    dec.magic(TENSOR_MAGIC)?;
    let tensor = dec.tensor_payload()?;
    dec.expect_eof()?;
    Ok(tensor)
}

pub fn write_annotations(path: &Path, points: &PointAnnotations) -> Result<()> {
    let mut out = String::new();
    for &(r, c) in points.points() {
        // Default float formatting round-trips exactly.
        out.push_str(&format!("{r}\t{c}\n"));
    }
    out.push_str(&format!("count\t{}\n", points.count()));
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_annotations(path: &Path) -> Result<PointAnnotations> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let name = path.display().to_string();
    let mut offset = 0u64;
    let mut points = Vec::new();
    let mut declared: Option<usize> = None;
    for line in text.lines() {
        if declared.is_some() {
            return Err(Error::format(name, offset, "content after count line"));
        }
        let Some((left, right)) = line.split_once('\t') else {
            return Err(Error::format(name, offset, "expected row<TAB>col"));
        };
        if left == "count" {
            let n: usize = right
                .parse()
                .map_err(|_| Error::format(name.clone(), offset, "bad count"))?;
            declared = Some(n);
        } else {
            let r: f64 = left
                .parse()
                .map_err(|_| Error::format(name.clone(), offset, "bad row coordinate"))?;
            let c: f64 = right
                .parse()
                .map_err(|_| Error::format(name.clone(), offset, "bad col coordinate"))?;
            points.push((r, c));
        }
        offset += line.len() as u64 + 1;
    }
    match declared {
        Some(n) if n == points.len() => Ok(PointAnnotations::new(points)),
        Some(n) => Err(Error::format(
            name,
            offset,
            format!("count line says {n}, file has {} points", points.len()),
        )),
        None => Err(Error::format(name, offset, "missing count line")),
    }
}

fn record_paths(dir: &Path, base: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{base}.image.pct")),
        dir.join(format!("{base}.density.pct")),
        dir.join(format!("{base}.points.txt")),
    )
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut index = String::new();
    for record in dataset.records() {
        let (img, den, pts) = record_paths(dir, &record.name);
        write_tensor(&img, record.image.tensor())?;
        write_tensor(&den, record.density.tensor())?;
        write_annotations(&pts, &record.points)?;
        index.push_str(&record.name);
        index.push('\n');
    }
    fs::write(dir.join(INDEX_FILE), index).map_err(|e| io_err(dir, e))?;
    let s = dataset.splits();
    fs::write(
        dir.join(SPLITS_FILE),
        format!("train\t{}\nval\t{}\ntest\t{}\n", s.train, s.val, s.test),
    )
    .map_err(|e| io_err(dir, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join(INDEX_FILE);
    let index = fs::read_to_string(&index_path).map_err(|e| io_err(&index_path, e))?;
    let mut records = Vec::new();
    for base in index.lines().filter(|l| !l.is_empty()) {
        let (img, den, pts) = record_paths(dir, base);
        let image = ImageTensor::new(read_tensor(&img)?)?;
        let density = DensityMap::new(read_tensor(&den)?)?;
        let raw = read_annotations(&pts)?;
        let points = PointAnnotations::within(raw.points().to_vec(), image.height(), image.width())?;
        records.push(SceneRecord {
            name: base.to_string(),
            image,
            density,
            points,
        });
    }
    let splits_path = dir.join(SPLITS_FILE);
    let splits = if splits_path.exists() {
        let text = fs::read_to_string(&splits_path).map_err(|e| io_err(&splits_path, e))?;
        let mut s = Splits::default();
        for line in text.lines() {
            match line.split_once('\t') {
                Some(("train", n)) => s.train = parse_count(&splits_path, n)?,
                Some(("val", n)) => s.val = parse_count(&splits_path, n)?,
                Some(("test", n)) => s.test = parse_count(&splits_path, n)?,
                _ => {
                    return Err(Error::format(
                        splits_path.display().to_string(),
                        0,
                        format!("unrecognized splits line {line:?}"),
                    ))
                }
            }
        }
        s
    } else {
        Splits {
            train: records.len(),
            val: 0,
            test: 0,
        }
    };
    if splits.train + splits.val + splits.test != records.len() {
        return Err(Error::format(
            splits_path.display().to_string(),
            0,
            format!(
                "splits sum to {}, index has {} records",
                splits.train + splits.val + splits.test,
                records.len()
            ),
        ));
    }
    Ok(Dataset::new(records, splits))
}

fn parse_count(path: &Path, text: &str) -> Result<usize> {
    text.parse()
        .map_err(|_| Error::format(path.display().to_string(), 0, format!("bad count {text:?}")))
}

/// Key=value text header terminated by a blank line.
pub(crate) fn write_header<W: Write>(
    w: &mut W,
    entries: &[(&str, String)],
) -> std::io::Result<()> {
    for (key, value) in entries {
        writeln!(w, "{key}={value}")?;
    }
    writeln!(w)
}

pub(crate) fn parse_header(
    lines: &[String],
    file: &str,
    offset: u64,
) -> Result<Vec<(String, String)>> {
    lines
        .iter()
        .map(|line| {
            line.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| {
                    Error::format(file.to_string(), offset, format!("bad header line {line:?}"))
                })
        })
        .collect()
}
