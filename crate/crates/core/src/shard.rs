//! SMP1 sample shards: encoded task samples in a self-describing, byte-stable layout.
//!
//! ```text
//! "SMP1" | format_version u32
//! sample*: pid_len u32 | pid | input value* | output label*
//!   input  tag u8: 0 index sequence   count u32 | u32*
//!                  1 nested sequence  outer u32 | (count u32 | u32*)*
//!                  2 multi-hot        size u32 | ceil(size/8) bitset bytes
//!                  3 raw bytes        len u32 | bytes
//!   label  tag u8: 0 binary u8 | 1 class u32 | 2 multilabel size u32 + bitset | 3 real f64
//! footer : sample_count u64 | "SMPF"
//! ```
//! Integers and reals are little-endian; bitsets are LSB-first within each byte.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::processors::{BitSet, EncodedLabel};

pub const MAGIC: &[u8; 4] = b"SMP1";
pub const FOOTER_MAGIC: &[u8; 4] = b"SMPF";
pub const FORMAT_VERSION: u32 = 1;
const FOOTER_LEN: u64 = 12;

#[derive(Debug, Clone, PartialEq)]
pub enum EncodedValue {
    Indices(Vec<u32>),
    Nested(Vec<Vec<u32>>),
    MultiHot(BitSet),
    Raw(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub patient_id: String,
    pub inputs: Vec<EncodedValue>,
    pub outputs: Vec<EncodedLabel>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, len: usize) -> io::Result<()> {
    let v = u32::try_from(len).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "length exceeds u32"))?;
    put_u32(out, v);
    Ok(())
}

fn put_bits(out: &mut Vec<u8>, bits: &BitSet) {
    put_u32(out, bits.size);
    out.extend_from_slice(&bits.bytes);
}

/// Appends the encoding of one sample to `out`.
pub fn encode_sample(s: &EncodedSample, out: &mut Vec<u8>) -> io::Result<()> {
    put_len(out, s.patient_id.len())?;
    out.extend_from_slice(s.patient_id.as_bytes());
    for v in &s.inputs {
        match v {
            EncodedValue::Indices(ix) => {
                out.push(0);
                put_len(out, ix.len())?;
                ix.iter().for_each(|&i| put_u32(out, i));
            }
            EncodedValue::Nested(outer) => {
                out.push(1);
                put_len(out, outer.len())?;
                for inner in outer {
                    put_len(out, inner.len())?;
                    inner.iter().for_each(|&i| put_u32(out, i));
                }
            }
            EncodedValue::MultiHot(bits) => {
                out.push(2);
                put_bits(out, bits);
            }
            EncodedValue::Raw(bytes) => {
                out.push(3);
                put_len(out, bytes.len())?;
                out.extend_from_slice(bytes);
            }
        }
    }
    for l in &s.outputs {
        match l {
            EncodedLabel::Binary(b) => {
                out.push(0);
                out.push(*b);
            }
            EncodedLabel::Class(c) => {
                out.push(1);
                put_u32(out, *c);
            }
            EncodedLabel::Multi(bits) => {
                out.push(2);
                put_bits(out, bits);
            }
            EncodedLabel::Real(x) => {
                out.push(3);
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(())
}

pub struct ShardWriter {
    path: PathBuf,
    out: BufWriter<File>,
    buf: Vec<u8>,
    count: u64,
}

impl ShardWriter {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::with_capacity(1 << 16, file);
        out.write_all(MAGIC)
            .and_then(|_| out.write_all(&FORMAT_VERSION.to_le_bytes()))
            .map_err(|e| Error::io(&path, e))?;
        Ok(ShardWriter {
            path,
            out,
            buf: Vec::new(),
            count: 0,
        })
    }

    pub fn push(&mut self, s: &EncodedSample) -> Result<()> {
        self.buf.clear();
        encode_sample(s, &mut self.buf).map_err(|e| Error::io(&self.path, e))?;
        self.out.write_all(&self.buf).map_err(|e| Error::io(&self.path, e))?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(mut self) -> Result<u64> {
        let path = self.path.clone();
        let io = |e| Error::io(&path, e);
        self.out.write_all(&self.count.to_le_bytes()).map_err(io)?;
        self.out.write_all(FOOTER_MAGIC).map_err(io)?;
        let file = self.out.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
        file.sync_all().map_err(io)?;
        Ok(self.count)
    }
}

/// Streaming reader; the header and footer are checked at open. Input and label tags share
/// one number range, so reads need the schema's field counts.
pub struct ShardReader {
    path: PathBuf,
    input: io::Take<BufReader<File>>,
    remaining: u64,
    sample_count: u64,
}

fn corrupt(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u8<R: Read>(r: &mut R) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<u8>> {
    let mut v = Vec::new();
    r.take(n as u64).read_to_end(&mut v)?;
    if v.len() != n {
        return Err(io::ErrorKind::UnexpectedEof.into());
    }
    Ok(v)
}

fn read_indices<R: Read>(r: &mut R) -> io::Result<Vec<u32>> {
    let n = read_u32(r)? as usize;
    let raw = read_bytes(r, n * 4)?;
    Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_bits<R: Read>(r: &mut R) -> io::Result<BitSet> {
    let size = read_u32(r)?;
    let bytes = read_bytes(r, (size as usize).div_ceil(8))?;
    Ok(BitSet { size, bytes })
}

impl ShardReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let io = |e| Error::io(&path, e);
        let mut file = File::open(&path).map_err(io)?;
        let len = file.metadata().map_err(io)?.len();
        if len < 8 + FOOTER_LEN {
            return Err(Error::format(&path, "file too short for an SMP1 shard"));
        }
        let mut head = [0u8; 8];
        file.read_exact(&mut head).map_err(io)?;
        if &head[..4] != MAGIC {
            return Err(Error::format(&path, "bad magic, expected SMP1"));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::format(&path, format!("unsupported shard version {version}")));
        }
        let mut tail = [0u8; FOOTER_LEN as usize];
        file.seek(SeekFrom::Start(len - FOOTER_LEN)).map_err(io)?;
        file.read_exact(&mut tail).map_err(io)?;
        if &tail[8..] != FOOTER_MAGIC {
            return Err(Error::format(&path, "bad footer magic, expected SMPF"));
        }
        let sample_count = u64::from_le_bytes(tail[..8].try_into().unwrap());
        file.seek(SeekFrom::Start(8)).map_err(io)?;
        let input = BufReader::with_capacity(1 << 16, file).take(len - 8 - FOOTER_LEN);
        Ok(ShardReader {
            path,
            input,
            remaining: sample_count,
            sample_count,
        })
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    /// Reads the next sample given the number of input and output fields.
    pub fn next_with(&mut self, n_inputs: usize, n_outputs: usize) -> Result<Option<EncodedSample>> {
        if self.remaining == 0 {
            if self.input.limit() != 0 {
                return Err(Error::format(&self.path, "trailing bytes after last sample"));
            }
            return Ok(None);
        }
        let s = self
            .read_fields(n_inputs, n_outputs)
            .map_err(|e| Error::format(&self.path, format!("corrupt sample: {e}")))?;
        self.remaining -= 1;
        Ok(Some(s))
    }

    fn read_fields(&mut self, n_inputs: usize, n_outputs: usize) -> io::Result<EncodedSample> {
        let r = &mut self.input;
        let pid_len = read_u32(r)? as usize;
        let patient_id = String::from_utf8(read_bytes(r, pid_len)?).map_err(|_| corrupt("patient_id is not UTF-8"))?;
        let mut inputs = Vec::with_capacity(n_inputs);
        for _ in 0..n_inputs {
            inputs.push(match read_u8(r)? {
                0 => EncodedValue::Indices(read_indices(r)?),
                1 => {
                    let outer = read_u32(r)? as usize;
                    let mut v = Vec::with_capacity(outer.min(1 << 16));
                    for _ in 0..outer {
                        v.push(read_indices(r)?);
                    }
                    EncodedValue::Nested(v)
                }
                2 => EncodedValue::MultiHot(read_bits(r)?),
                3 => {
                    let n = read_u32(r)? as usize;
                    EncodedValue::Raw(read_bytes(r, n)?)
                }
                t => return Err(corrupt(format!("unknown input tag {t}"))),
            });
        }
        let mut outputs = Vec::with_capacity(n_outputs);
        for _ in 0..n_outputs {
            outputs.push(match read_u8(r)? {
                0 => EncodedLabel::Binary(read_u8(r)?),
                1 => EncodedLabel::Class(read_u32(r)?),
                2 => EncodedLabel::Multi(read_bits(r)?),
                3 => {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b)?;
                    EncodedLabel::Real(f64::from_le_bytes(b))
                }
                t => return Err(corrupt(format!("unknown label tag {t}"))),
            });
        }
        Ok(EncodedSample {
            patient_id,
            inputs,
            outputs,
        })
    }
}

/// Reads every sample of a shard whose schema has `n_inputs` inputs and `n_outputs` outputs.
pub fn read_shard(path: impl AsRef<Path>, n_inputs: usize, n_outputs: usize) -> Result<Vec<EncodedSample>> {
    let mut r = ShardReader::open(path)?;
    let mut out = Vec::with_capacity(r.sample_count().min(1 << 20) as usize);
    while let Some(s) = r.next_with(n_inputs, n_outputs)? {
        out.push(s);
    }
    Ok(out)
}
