//! FXDT: little-endian header, u8 pixels `[n][c][h][w]`, then optional u32 labels.
//!
//! ```text
//! 0   magic  "FXDT"
//! 4   u16    version
//! 6   u16    flags (bit 0: labels present)
//! 8   u64    count
//! 16  u32    height
//! 20  u32    width
//! 24  u32    channels
//! 28  payload
//! ```

use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::{DataError, Example};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"FXDT";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 28;
const FLAG_LABELS: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub count: u64,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub labels: bool,
}

impl Header {
    pub fn image_bytes(&self) -> u64 {
        self.height as u64 * self.width as u64 * self.channels as u64
    }

    fn payload_bytes(&self) -> Option<u64> {
        self.count.checked_mul(self.image_bytes())
    }

    /// Total file size implied by the header.
    pub fn file_len(&self) -> Option<u64> {
        let labels = if self.labels { self.count.checked_mul(4)? } else { 0 };
        (HEADER_LEN as u64).checked_add(self.payload_bytes()?)?.checked_add(labels)
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(&MAGIC);
        b[4..6].copy_from_slice(&VERSION.to_le_bytes());
        b[6..8].copy_from_slice(&(if self.labels { FLAG_LABELS } else { 0 }).to_le_bytes());
        b[8..16].copy_from_slice(&self.count.to_le_bytes());
        b[16..20].copy_from_slice(&self.height.to_le_bytes());
        b[20..24].copy_from_slice(&self.width.to_le_bytes());
        b[24..28].copy_from_slice(&self.channels.to_le_bytes());
        b
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<Header, DataError> {
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated { offset: 0, needed: HEADER_LEN as u64, len: bytes.len() as u64 });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(DataError::Magic(magic));
    }
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().expect("2 bytes"));
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u16_at(4);
    if version != VERSION {
        return Err(DataError::Version { found: version, supported: VERSION });
    }
    let flags = u16_at(6);
    if flags & !FLAG_LABELS != 0 {
        return Err(DataError::Header(format!("unknown flag bits {flags:#06x}")));
    }
    let h = Header {
        count: u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")),
        height: u32_at(16),
        width: u32_at(20),
        channels: u32_at(24),
        labels: flags & FLAG_LABELS != 0,
    };
    if h.count > 0 && h.image_bytes() == 0 {
        return Err(DataError::Header(format!("zero-sized images {}x{}x{}", h.channels, h.height, h.width)));
    }
    if h.file_len().is_none() {
        return Err(DataError::Header("declared sizes overflow".into()));
    }
    Ok(h)
}

/// `x / 127.5 - 1`.
pub fn normalize(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Whole dataset in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub labels: Option<Vec<u32>>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        let n = self.height * self.width * self.channels;
        if n == 0 { 0 } else { self.pixels.len() / n }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn header(&self) -> Header {
        Header {
            count: self.len() as u64,
            height: self.height as u32,
            width: self.width as u32,
            channels: self.channels as u32,
            labels: self.labels.is_some(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header().encode().to_vec();
        out.extend_from_slice(&self.pixels);
        if let Some(l) = &self.labels {
            for v in l {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let h = parse_header(bytes)?;
        let need = h.file_len().expect("checked in parse_header");
        if (bytes.len() as u64) < need {
            let payload_end = HEADER_LEN as u64 + h.payload_bytes().expect("checked");
            let offset = if (bytes.len() as u64) < payload_end { HEADER_LEN as u64 } else { payload_end };
            return Err(DataError::Truncated { offset, needed: need - offset, len: bytes.len() as u64 });
        }
        let end = HEADER_LEN + h.payload_bytes().expect("checked") as usize;
        let labels = h.labels.then(|| {
            bytes[end..end + 4 * h.count as usize]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        });
        Ok(Self {
            height: h.height as usize,
            width: h.width as usize,
            channels: h.channels as usize,
            pixels: bytes[HEADER_LEN..end].to_vec(),
            labels,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut f = File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn example(&self, i: usize) -> Example {
        let n = self.height * self.width * self.channels;
        let data = self.pixels[i * n..(i + 1) * n].iter().map(|&v| normalize(v)).collect();
        Example {
            x: Tensor::new(&[self.channels, self.height, self.width], data).expect("sizes agree"),
            label: self.labels.as_ref().map_or(0, |l| l[i] as usize),
        }
    }

    pub fn examples(&self) -> Vec<Example> {
        (0..self.len()).map(|i| self.example(i)).collect()
    }
}

/// Streaming reader: one image buffer in memory at a time.
pub struct DatasetReader {
    header: Header,
    pixels: BufReader<File>,
    labels: Option<BufReader<File>>,
    next: u64,
    buf: Vec<u8>,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self, DataError> {
        let mut f = File::open(path)?;
        let len = f.metadata()?.len();
        let mut head = [0u8; HEADER_LEN];
        let got = read_up_to(&mut f, &mut head)?;
        let header = parse_header(&head[..got])?;
        let payload_end = HEADER_LEN as u64 + header.payload_bytes().expect("checked");
        let need = header.file_len().expect("checked");
        if len < need {
            // name the first image or label record that cannot be read in full
            let offset = if len < payload_end {
                let img = header.image_bytes();
                HEADER_LEN as u64 + (len - HEADER_LEN as u64) / img * img
            } else {
                payload_end + (len - payload_end) / 4 * 4
            };
            return Err(DataError::Truncated { offset, needed: need - offset, len });
        }
        let labels = if header.labels {
            let mut lf = File::open(path)?;
            lf.seek(SeekFrom::Start(payload_end))?;
            Some(BufReader::new(lf))
        } else {
            None
        };
        Ok(Self {
            header,
            pixels: BufReader::new(f),
            labels,
            next: 0,
            buf: vec![0; header.image_bytes() as usize],
        })
    }

    pub fn header(&self) -> Header {
        self.header
    }

    fn read_one(&mut self) -> Result<Example, DataError> {
        let offset = HEADER_LEN as u64 + self.next * self.header.image_bytes();
        self.pixels.read_exact(&mut self.buf).map_err(|e| truncated(e, offset, self.header.image_bytes()))?;
        let label = match &mut self.labels {
            Some(r) => {
                let mut b = [0u8; 4];
                let lo = HEADER_LEN as u64 + self.header.payload_bytes().expect("checked") + 4 * self.next;
                r.read_exact(&mut b).map_err(|e| truncated(e, lo, 4))?;
                u32::from_le_bytes(b) as usize
            }
            None => 0,
        };
        self.next += 1;
        let (c, h, w) = (self.header.channels as usize, self.header.height as usize, self.header.width as usize);
        let x = Tensor::new(&[c, h, w], self.buf.iter().map(|&v| normalize(v)).collect()).expect("sizes agree");
        Ok(Example { x, label })
    }
}

fn truncated(e: std::io::Error, offset: u64, needed: u64) -> DataError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        DataError::Truncated { offset, needed, len: offset }
    } else {
        DataError::Io(e)
    }
}

fn read_up_to(f: &mut File, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match f.read(&mut buf[got..])? {
            0 => break,
            n => got += n,
        }
    }
    Ok(got)
}

impl Iterator for DatasetReader {
    type Item = Result<Example, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        (self.next < self.header.count).then(|| self.read_one())
    }
}
