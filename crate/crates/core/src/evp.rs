//! EVP partition files: a row-oriented event log with a statistics footer.
//!
//! ```text
//! "EVP1" | format_version u32
//! record* : pid_len u32 | pid | flags u8 (bit0 = has_timestamp) | [ts i64] |
//!           type_len u16 | type | seq u64 | attr_count u16 |
//!           (key_len u16 | key | val_len u32 | val)*
//! footer  : min_pid_len u32 | min_pid | max_pid_len u32 | max_pid |
//!           event_count u64 | patient_count u64 | footer_offset u64 | "EVPF"
//! ```
//! All integers are little-endian. `footer_offset` is the byte offset of the footer start.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::event::{Event, Timestamp};

pub const MAGIC: &[u8; 4] = b"EVP1";
pub const FOOTER_MAGIC: &[u8; 4] = b"EVPF";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 8;
/// footer_offset u64 + footer magic.
const TRAILER_LEN: u64 = 12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Footer {
    pub min_patient_id: String,
    pub max_patient_id: String,
    pub event_count: u64,
    pub patient_count: u64,
    pub footer_offset: u64,
}

/// Appends one encoded record to `out`.
pub fn encode_record(e: &Event, out: &mut Vec<u8>) -> io::Result<()> {
    let too_long = |what: &str| io::Error::new(io::ErrorKind::InvalidInput, format!("{what} too long"));
    let pid_len = u32::try_from(e.patient_id.len()).map_err(|_| too_long("patient_id"))?;
    let type_len = u16::try_from(e.event_type.len()).map_err(|_| too_long("event_type"))?;
    let attr_count = u16::try_from(e.attributes.len()).map_err(|_| too_long("attribute list"))?;
    out.extend_from_slice(&pid_len.to_le_bytes());
    out.extend_from_slice(e.patient_id.as_bytes());
    match e.timestamp {
        Some(ts) => {
            out.push(1);
            out.extend_from_slice(&ts.0.to_le_bytes());
        }
        None => out.push(0),
    }
    out.extend_from_slice(&type_len.to_le_bytes());
    out.extend_from_slice(e.event_type.as_bytes());
    out.extend_from_slice(&e.seq.to_le_bytes());
    out.extend_from_slice(&attr_count.to_le_bytes());
    for (k, v) in &e.attributes {
        let k_len = u16::try_from(k.len()).map_err(|_| too_long("attribute key"))?;
        let v_len = u32::try_from(v.len()).map_err(|_| too_long("attribute value"))?;
        out.extend_from_slice(&k_len.to_le_bytes());
        out.extend_from_slice(k.as_bytes());
        out.extend_from_slice(&v_len.to_le_bytes());
        out.extend_from_slice(v.as_bytes());
    }
    Ok(())
}

fn corrupt(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

/// Cursor over an in-memory byte slice of records.
pub struct SliceCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> SliceCursor<'a> {
    pub fn new(buf: &'a [u8], pos: usize) -> Self {
        SliceCursor { buf, pos }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> io::Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("truncated record"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> io::Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self, n: usize) -> io::Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| corrupt("invalid utf-8"))
    }

    /// Reads only the patient id of the record at the cursor, then skips the rest of it.
    pub fn skip_record(&mut self) -> io::Result<&'a [u8]> {
        let n = self.u32()? as usize;
        let pid = self.take(n)?;
        let flags = self.take(1)?[0];
        if flags & 1 == 1 {
            self.take(8)?;
        }
        let n = self.u16()? as usize;
        self.take(n + 8)?;
        let attrs = self.u16()?;
        for _ in 0..attrs {
            let k = self.u16()? as usize;
            self.take(k)?;
            let v = self.u32()? as usize;
            self.take(v)?;
        }
        Ok(pid)
    }

    /// Returns the patient id of the record at the cursor without advancing.
    pub fn peek_patient_id(&self) -> io::Result<&'a [u8]> {
        let mut c = SliceCursor::new(self.buf, self.pos);
        let n = c.u32()? as usize;
        c.take(n)
    }

    pub fn read_record(&mut self) -> io::Result<Event> {
        let n = self.u32()? as usize;
        let patient_id = self.str(n)?.to_string();
        let flags = self.take(1)?[0];
        let timestamp = if flags & 1 == 1 {
            Some(Timestamp(i64::from_le_bytes(self.take(8)?.try_into().unwrap())))
        } else {
            None
        };
        let n = self.u16()? as usize;
        let event_type = self.str(n)?.to_string();
        let seq = self.u64()?;
        let count = self.u16()?;
        let mut attributes = BTreeMap::new();
        for _ in 0..count {
            let k = self.u16()? as usize;
            let key = self.str(k)?.to_string();
            let v = self.u32()? as usize;
            let val = self.str(v)?.to_string();
            attributes.insert(key, val);
        }
        Ok(Event {
            patient_id,
            event_type,
            timestamp,
            seq,
            attributes,
        })
    }
}

/// Reads one record from a byte stream; `Ok(None)` on clean end of stream.
pub fn read_record_from<R: Read>(r: &mut R, scratch: &mut Vec<u8>) -> io::Result<Option<Event>> {
    let mut len4 = [0u8; 4];
    match r.read_exact(&mut len4) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    scratch.clear();
    scratch.extend_from_slice(&len4);
    let pid_len = u32::from_le_bytes(len4) as usize;
    read_n(r, scratch, pid_len + 1)?;
    if scratch[scratch.len() - 1] & 1 == 1 {
        read_n(r, scratch, 8)?;
    }
    let type_len = read_u16(r, scratch)? as usize;
    read_n(r, scratch, type_len + 8)?;
    let attrs = read_u16(r, scratch)?;
    for _ in 0..attrs {
        let k = read_u16(r, scratch)? as usize;
        read_n(r, scratch, k)?;
        let mut v4 = [0u8; 4];
        r.read_exact(&mut v4)?;
        scratch.extend_from_slice(&v4);
        read_n(r, scratch, u32::from_le_bytes(v4) as usize)?;
    }
    SliceCursor::new(scratch, 0).read_record().map(Some)
}

fn read_n<R: Read>(r: &mut R, buf: &mut Vec<u8>, n: usize) -> io::Result<()> {
    let start = buf.len();
    buf.resize(start + n, 0);
    r.read_exact(&mut buf[start..])
}

fn read_u16<R: Read>(r: &mut R, buf: &mut Vec<u8>) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    buf.extend_from_slice(&b);
    Ok(u16::from_le_bytes(b))
}

/// Streaming writer for one partition. Input must arrive in canonical order.
pub struct EvpWriter {
    path: PathBuf,
    out: BufWriter<File>,
    offset: u64,
    scratch: Vec<u8>,
    min_pid: Option<String>,
    last_pid: Option<String>,
    event_count: u64,
    patient_count: u64,
}

impl EvpWriter {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::with_capacity(1 << 20, file);
        out.write_all(MAGIC)
            .and_then(|_| out.write_all(&FORMAT_VERSION.to_le_bytes()))
            .map_err(|e| Error::io(&path, e))?;
        Ok(EvpWriter {
            path,
            out,
            offset: HEADER_LEN,
            scratch: Vec::with_capacity(256),
            min_pid: None,
            last_pid: None,
            event_count: 0,
            patient_count: 0,
        })
    }

    pub fn push(&mut self, e: &Event) -> Result<()> {
        self.scratch.clear();
        encode_record(e, &mut self.scratch).map_err(|err| Error::io(&self.path, err))?;
        self.out
            .write_all(&self.scratch)
            .map_err(|err| Error::io(&self.path, err))?;
        self.offset += self.scratch.len() as u64;
        self.event_count += 1;
        if self.last_pid.as_deref() != Some(e.patient_id.as_str()) {
            self.patient_count += 1;
            if self.min_pid.is_none() {
                self.min_pid = Some(e.patient_id.clone());
            }
            self.last_pid = Some(e.patient_id.clone());
        }
        Ok(())
    }

    pub fn event_count(&self) -> u64 {
        self.event_count
    }

    pub fn current_patient(&self) -> Option<&str> {
        self.last_pid.as_deref()
    }

    pub fn finish(mut self) -> Result<(PathBuf, Footer)> {
        let footer = Footer {
            min_patient_id: self.min_pid.take().unwrap_or_default(),
            max_patient_id: self.last_pid.take().unwrap_or_default(),
            event_count: self.event_count,
            patient_count: self.patient_count,
            footer_offset: self.offset,
        };
        let mut buf = Vec::new();
        for pid in [&footer.min_patient_id, &footer.max_patient_id] {
            buf.extend_from_slice(&(pid.len() as u32).to_le_bytes());
            buf.extend_from_slice(pid.as_bytes());
        }
        buf.extend_from_slice(&footer.event_count.to_le_bytes());
        buf.extend_from_slice(&footer.patient_count.to_le_bytes());
        buf.extend_from_slice(&footer.footer_offset.to_le_bytes());
        buf.extend_from_slice(FOOTER_MAGIC);
        self.out
            .write_all(&buf)
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        Ok((self.path, footer))
    }
}

/// Parses the header and footer of a complete partition held in memory.
pub fn parse_footer(bytes: &[u8]) -> io::Result<Footer> {
    if bytes.len() < (HEADER_LEN + TRAILER_LEN) as usize {
        return Err(corrupt("file too short for EVP"));
    }
    check_header(&bytes[..8])?;
    let n = bytes.len();
    let footer_offset = check_trailer(&bytes[n - 12..], n as u64)?;
    parse_footer_body(&bytes[footer_offset as usize..n - 12], footer_offset)
}

fn check_header(header: &[u8]) -> io::Result<()> {
    if &header[..4] != MAGIC {
        return Err(corrupt("bad EVP magic"));
    }
    if u32::from_le_bytes(header[4..8].try_into().unwrap()) != FORMAT_VERSION {
        return Err(corrupt("unsupported EVP version"));
    }
    Ok(())
}

fn check_trailer(trailer: &[u8], file_len: u64) -> io::Result<u64> {
    if &trailer[8..] != FOOTER_MAGIC {
        return Err(corrupt("bad EVP footer magic"));
    }
    let footer_offset = u64::from_le_bytes(trailer[..8].try_into().unwrap());
    if footer_offset < HEADER_LEN || footer_offset > file_len - TRAILER_LEN {
        return Err(corrupt("footer offset out of range"));
    }
    Ok(footer_offset)
}

fn parse_footer_body(body: &[u8], footer_offset: u64) -> io::Result<Footer> {
    let mut c = SliceCursor::new(body, 0);
    let l = c.u32()? as usize;
    let min_patient_id = c.str(l)?.to_string();
    let l = c.u32()? as usize;
    let max_patient_id = c.str(l)?.to_string();
    let event_count = c.u64()?;
    let patient_count = c.u64()?;
    if c.pos() != body.len() {
        return Err(corrupt("trailing bytes in EVP footer"));
    }
    Ok(Footer {
        min_patient_id,
        max_patient_id,
        event_count,
        patient_count,
        footer_offset,
    })
}

/// Sequential reader over the records of a partition file.
pub struct EvpReader {
    path: PathBuf,
    input: io::Take<BufReader<File>>,
    scratch: Vec<u8>,
    footer: Footer,
}

impl EvpReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let footer = read_footer_from_file(&mut file).map_err(|e| Error::io(path, e))?;
        file.seek(SeekFrom::Start(HEADER_LEN))
            .map_err(|e| Error::io(path, e))?;
        let input = BufReader::with_capacity(1 << 16, file).take(footer.footer_offset - HEADER_LEN);
        Ok(EvpReader {
            path: path.to_path_buf(),
            input,
            scratch: Vec::new(),
            footer,
        })
    }

    pub fn footer(&self) -> &Footer {
        &self.footer
    }

    pub fn next_event(&mut self) -> Result<Option<Event>> {
        read_record_from(&mut self.input, &mut self.scratch).map_err(|e| Error::io(&self.path, e))
    }
}

impl Iterator for EvpReader {
    type Item = Result<Event>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_event().transpose()
    }
}

fn read_footer_from_file(file: &mut File) -> io::Result<Footer> {
    let len = file.seek(SeekFrom::End(0))?;
    if len < HEADER_LEN + TRAILER_LEN {
        return Err(corrupt("file too short for EVP"));
    }
    let mut header = [0u8; 8];
    file.seek(SeekFrom::Start(0))?;
    file.read_exact(&mut header)?;
    check_header(&header)?;
    let mut trailer = [0u8; 12];
    file.seek(SeekFrom::Start(len - TRAILER_LEN))?;
    file.read_exact(&mut trailer)?;
    let footer_offset = check_trailer(&trailer, len)?;
    let mut body = vec![0u8; (len - TRAILER_LEN - footer_offset) as usize];
    file.seek(SeekFrom::Start(footer_offset))?;
    file.read_exact(&mut body)?;
    parse_footer_body(&body, footer_offset)
}

/// Reads every event of a partition file.
pub fn read_all(path: &Path) -> Result<Vec<Event>> {
    EvpReader::open(path)?.collect()
}
