//! Carrying the metadata record inside MP4 files.
//!
//! The record goes into one top-level `uuid` box appended after the existing
//! boxes. Nothing before it moves, so `stco`/`co64` chunk offsets stay valid
//! and players that do not know the box skip it.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::plane::{parent_dir, write_atomic};

pub const VIGNETTE_USERTYPE: [u8; 16] = *b"vgnt-saliency-v1";
pub const SIDECAR_EXTENSION: &str = "vgnt";
pub const MAX_PAYLOAD: u64 = (1u64 << 32) - 25;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoxSpan {
    pub offset: u64,
    /// Total size including the header.
    pub size: u64,
    pub fourcc: [u8; 4],
    pub usertype: Option<[u8; 16]>,
    /// Header size field was 0 ("extends to end of file").
    pub open_ended: bool,
    pub header_len: u64,
}

impl BoxSpan {
    pub fn is_vignette(&self) -> bool {
        &self.fourcc == b"uuid" && self.usertype == Some(VIGNETTE_USERTYPE)
    }

    pub fn fourcc_str(&self) -> String {
        String::from_utf8_lossy(&self.fourcc).into_owned()
    }
}

fn malformed(offset: u64, what: &str) -> Error {
    Error::Container(format!("at byte {offset}: {what}"))
}

/// Lists the top-level boxes of an ISO-BMFF stream.
pub fn scan_boxes<R: Read + Seek>(r: &mut R) -> Result<Vec<BoxSpan>> {
    let io_err = |e: io::Error| Error::Container(e.to_string());
    let len = r.seek(SeekFrom::End(0)).map_err(io_err)?;
    let mut boxes = Vec::new();
    let mut offset = 0u64;
    while offset < len {
        if len - offset < 8 {
            return Err(malformed(offset, "trailing bytes shorter than a box header"));
        }
        r.seek(SeekFrom::Start(offset)).map_err(io_err)?;
        let mut hdr = [0u8; 8];
        r.read_exact(&mut hdr).map_err(io_err)?;
        let size32 = u32::from_be_bytes(hdr[..4].try_into().unwrap());
        let fourcc: [u8; 4] = hdr[4..].try_into().unwrap();
        let mut header_len = 8u64;
        let mut open_ended = false;
        let size = match size32 {
            0 => {
                open_ended = true;
                len - offset
            }
            1 => {
                let mut large = [0u8; 8];
                r.read_exact(&mut large)
                    .map_err(|_| malformed(offset, "truncated 64-bit box size"))?;
                header_len = 16;
                u64::from_be_bytes(large)
            }
            n => n as u64,
        };
        let mut usertype = None;
        if &fourcc == b"uuid" {
            let mut ut = [0u8; 16];
            r.read_exact(&mut ut)
                .map_err(|_| malformed(offset, "truncated uuid usertype"))?;
            usertype = Some(ut);
            header_len += 16;
        }
        if size < header_len {
            return Err(malformed(offset, &format!("box size {size} smaller than its header")));
        }
        if size > len - offset {
            return Err(malformed(
                offset,
                &format!("box `{}` of {size} bytes runs past end of file", String::from_utf8_lossy(&fourcc)),
            ));
        }
        boxes.push(BoxSpan {
            offset,
            size,
            fourcc,
            usertype,
            open_ended,
            header_len,
        });
        offset += size;
    }
    Ok(boxes)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub fn list_boxes(path: impl AsRef<Path>) -> Result<Vec<BoxSpan>> {
    let path = path.as_ref();
    scan_boxes(&mut open(path)?)
}

/// Serialized Vignette `uuid` box carrying `payload`.
pub fn vignette_box(payload: &[u8]) -> Result<Vec<u8>> {
    if payload.len() as u64 > MAX_PAYLOAD {
        return Err(Error::Container(format!(
            "payload of {} bytes exceeds the {MAX_PAYLOAD}-byte limit",
            payload.len()
        )));
    }
    let size = 24 + payload.len() as u32;
    let mut out = Vec::with_capacity(size as usize);
    out.extend_from_slice(&size.to_be_bytes());
    out.extend_from_slice(b"uuid");
    out.extend_from_slice(&VIGNETTE_USERTYPE);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Writes `output` as `input` with any previous Vignette box removed and a
/// new one carrying `payload` appended. `output` may equal `input`.
///
/// A final box whose size field is 0 ("to end of file") gets its real size
/// written into the 32-bit size field, since the appended box would
/// otherwise fall inside it. Such boxes larger than 4 GiB are rejected.
pub fn embed_in_container(input: impl AsRef<Path>, output: impl AsRef<Path>, payload: &[u8]) -> Result<()> {
    let (input, output) = (input.as_ref(), output.as_ref());
    let new_box = vignette_box(payload)?;
    let mut reader = open(input)?;
    let boxes = scan_boxes(&mut reader)?;

    let dir = parent_dir(output);
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let io_err = |e| Error::io(output, e);
        let mut w = BufWriter::new(tmp.as_file());
        for b in boxes.iter().filter(|b| !b.is_vignette()) {
            reader.seek(SeekFrom::Start(b.offset)).map_err(io_err)?;
            let mut body = (&mut reader).take(b.size);
            if b.open_ended {
                if b.size > u32::MAX as u64 {
                    return Err(Error::Container(format!(
                        "open-ended `{}` box of {} bytes cannot be closed without moving data",
                        b.fourcc_str(),
                        b.size
                    )));
                }
                let mut size = [0u8; 4];
                body.read_exact(&mut size).map_err(io_err)?;
                w.write_all(&(b.size as u32).to_be_bytes()).map_err(io_err)?;
            }
            let copied = io::copy(&mut body, &mut w).map_err(io_err)?;
            let expected = if b.open_ended { b.size - 4 } else { b.size };
            if copied != expected {
                return Err(Error::Container(format!(
                    "input changed while copying box at byte {}",
                    b.offset
                )));
            }
        }
        w.write_all(&new_box).map_err(io_err)?;
        w.flush().map_err(io_err)?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(output, e))?;
    tmp.persist(output).map_err(|e| Error::io(output, e.error))?;
    Ok(())
}

/// Payload of the Vignette box, or `None` when the file has none.
pub fn extract_from_container(path: impl AsRef<Path>) -> Result<Option<Vec<u8>>> {
    let path = path.as_ref();
    let mut reader = open(path)?;
    let boxes = scan_boxes(&mut reader)?;
    let Some(b) = boxes.iter().rev().find(|b| b.is_vignette()) else {
        return Ok(None);
    };
    reader
        .seek(SeekFrom::Start(b.offset + b.header_len))
        .map_err(|e| Error::io(path, e))?;
    let mut payload = vec![0u8; (b.size - b.header_len) as usize];
    reader
        .read_exact(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    Ok(Some(payload))
}

pub fn sidecar_path(path: impl AsRef<Path>) -> PathBuf {
    path.as_ref().with_extension(SIDECAR_EXTENSION)
}

pub fn write_sidecar(path: impl AsRef<Path>, payload: &[u8]) -> Result<()> {
    write_atomic(path.as_ref(), payload)
}

pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
