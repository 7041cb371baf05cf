//! The `.lgds` binary descriptor stream.
//!
//! Layout (little-endian): magic `LGDS`, `u32` version (1), `u32` dimension,
//! `u32` image count, then for each image a `u32` descriptor count followed by
//! `count * dim` `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{Descriptor, DescriptorSet, IngestError};
use crate::ImageId;

const MAGIC: &[u8; 4] = b"LGDS";
const VERSION: u32 = 1;

/// Pull-based reader over an `.lgds` stream.
pub struct StreamReader<R> {
    inner: R,
    offset: u64,
    dim: usize,
    image_count: u32,
    next_image: u32,
    finished: bool,
}

impl StreamReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> StreamReader<R> {
    pub fn new(mut inner: R) -> Result<Self, IngestError> {
        let mut offset = 0u64;
        let mut magic = [0u8; 4];
        read_exact(&mut inner, &mut magic, &mut offset)?;
        if &magic != MAGIC {
            return Err(IngestError::BadMagic { offset: 0 });
        }
        let version = read_u32(&mut inner, &mut offset)?;
        if version != VERSION {
            return Err(IngestError::UnsupportedVersion { offset: 4, version });
        }
        let dim = read_u32(&mut inner, &mut offset)? as usize;
        if dim == 0 {
            return Err(IngestError::MalformedHeader {
                offset: 8,
                reason: "descriptor dimension is zero".into(),
            });
        }
        let image_count = read_u32(&mut inner, &mut offset)?;
        Ok(Self {
            inner,
            offset,
            dim,
            image_count,
            next_image: 0,
            finished: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn image_count(&self) -> u32 {
        self.image_count
    }

    fn read_image(&mut self) -> Result<DescriptorSet, IngestError> {
        let count = read_u32(&mut self.inner, &mut self.offset)? as usize;
        let mut descriptors = Vec::with_capacity(count);
        let mut buf = vec![0u8; self.dim * 4];
        for _ in 0..count {
            let start = self.offset;
            read_exact(&mut self.inner, &mut buf, &mut self.offset)?;
            let values: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(IngestError::NonFinite {
                    offset: start + 4 * i as u64,
                });
            }
            descriptors.push(Descriptor(values));
        }
        let image_id = ImageId::from(self.next_image);
        self.next_image += 1;
        Ok(DescriptorSet::new(image_id, descriptors, image_id as f64))
    }

    fn check_trailing(&mut self) -> Result<(), IngestError> {
        let mut probe = [0u8; 1];
        loop {
            match self.inner.read(&mut probe) {
                Ok(0) => return Ok(()),
                Ok(_) => return Err(IngestError::TrailingBytes { offset: self.offset }),
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl<R: Read> Iterator for StreamReader<R> {
    type Item = Result<DescriptorSet, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        if self.next_image == self.image_count {
            self.finished = true;
            return match self.check_trailing() {
                Ok(()) => None,
                Err(e) => Some(Err(e)),
            };
        }
        let item = self.read_image();
        if item.is_err() {
            self.finished = true;
        }
        Some(item)
    }
}

/// Reads a whole stream into memory. Image ids are assigned `0..N`.
pub fn load_stream(path: impl AsRef<Path>) -> Result<Vec<DescriptorSet>, IngestError> {
    StreamReader::open(path)?.collect()
}

pub fn read_stream<R: Read>(reader: R) -> Result<Vec<DescriptorSet>, IngestError> {
    StreamReader::new(reader)?.collect()
}

/// Writes `sets` with descriptor dimension `dim`. Every descriptor must have
/// exactly `dim` components.
pub fn write_stream_to<W: Write>(
    mut writer: W,
    dim: usize,
    sets: &[DescriptorSet],
) -> Result<(), IngestError> {
    for set in sets {
        if let Some(bad) = set.descriptors.iter().find(|d| d.dim() != dim) {
            return Err(IngestError::DimensionMismatch {
                image: set.image_id,
                expected: dim,
                found: bad.dim(),
            });
        }
    }
    let count = u32::try_from(sets.len()).map_err(|_| IngestError::MalformedHeader {
        offset: 12,
        reason: "too many images".into(),
    })?;
    writer.write_all(MAGIC)?;
    writer.write_all(&VERSION.to_le_bytes())?;
    writer.write_all(&(dim as u32).to_le_bytes())?;
    writer.write_all(&count.to_le_bytes())?;
    for set in sets {
        writer.write_all(&(set.descriptors.len() as u32).to_le_bytes())?;
        for d in &set.descriptors {
            for v in d.values() {
                writer.write_all(&v.to_le_bytes())?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn write_stream(
    path: impl AsRef<Path>,
    dim: usize,
    sets: &[DescriptorSet],
) -> Result<(), IngestError> {
    write_stream_to(BufWriter::new(File::create(path)?), dim, sets)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64) -> Result<(), IngestError> {
    match r.read_exact(buf) {
        Ok(()) => {
            *offset += buf.len() as u64;
            Ok(())
        }
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => {
            Err(IngestError::Truncated { offset: *offset })
        }
        Err(e) => Err(e.into()),
    }
}

fn read_u32<R: Read>(r: &mut R, offset: &mut u64) -> Result<u32, IngestError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, offset)?;
    Ok(u32::from_le_bytes(b))
}
