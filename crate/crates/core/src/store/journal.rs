//! Single-file append log backing the durable store.
//!
//! Each frame is `[u32 LE payload length][u32 LE crc32(payload)][payload]`,
//! the payload a JSON record. Appends are acknowledged only after
//! `sync_data`. A torn frame at the tail (crash mid-append) is discarded on
//! open; a bad frame anywhere else is reported as corruption.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::auth::Pseudonym;
use crate::ids::{SessionId, SessionToken};
use crate::time::Timestamp;

const HEADER_LEN: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case")]
pub(crate) enum Record {
    Session(SessionRecord),
    Event(EventRecord),
    /// Tombstone left where an event frame was superseded.
    Void,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct SessionRecord {
    pub id: SessionId,
    pub token: SessionToken,
    pub activity: String,
    pub pseudonym: Pseudonym,
    pub started_at: Timestamp,
    pub opt_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct EventRecord {
    pub sid: SessionId,
    pub seq: u64,
    pub sts: Timestamp,
    pub red: Vec<String>,
    pub xml: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct FrameLoc {
    pub offset: u64,
    pub payload_len: u32,
}

#[derive(Debug)]
pub(crate) struct Journal {
    file: File,
    path: PathBuf,
    end: u64,
}

impl Journal {
    pub fn open(path: &Path) -> Result<(Journal, Vec<(FrameLoc, Record)>), StoreError> {
        let fresh = !path.exists();
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        if fresh {
            file.sync_all()?;
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                // Persist the directory entry; not all platforms allow opening directories.
                if let Ok(d) = File::open(dir) {
                    let _ = d.sync_all();
                }
            }
        }
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;

        let mut records = Vec::new();
        let mut pos = 0usize;
        let total = bytes.len();
        while pos < total {
            let frame = parse_frame(&bytes[pos..]);
            match frame {
                Some((payload_len, payload)) => {
                    let record: Record = serde_json::from_slice(payload).map_err(|e| StoreError::Corrupt {
                        offset: pos as u64,
                        message: format!("undecodable record: {e}"),
                    })?;
                    records.push((
                        FrameLoc {
                            offset: pos as u64,
                            payload_len,
                        },
                        record,
                    ));
                    pos += HEADER_LEN as usize + payload_len as usize;
                }
                None if is_tail(&bytes[pos..]) => {
                    tracing::warn!(offset = pos, dropped = total - pos, "discarding torn journal tail");
                    file.set_len(pos as u64)?;
                    file.sync_all()?;
                    break;
                }
                None => {
                    return Err(StoreError::Corrupt {
                        offset: pos as u64,
                        message: "frame checksum mismatch".into(),
                    })
                }
            }
        }
        let end = pos.min(total) as u64;
        file.seek(SeekFrom::Start(end))?;
        Ok((
            Journal {
                file,
                path: path.to_path_buf(),
                end,
            },
            records,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes all records, then flushes once. Returns one location per record.
    pub fn append(&mut self, records: &[Record]) -> Result<Vec<FrameLoc>, StoreError> {
        let mut buf = Vec::new();
        let mut locs = Vec::with_capacity(records.len());
        for record in records {
            let payload = serde_json::to_vec(record).expect("records always serialize");
            locs.push(FrameLoc {
                offset: self.end + buf.len() as u64,
                payload_len: payload.len() as u32,
            });
            push_frame(&mut buf, &payload);
        }
        let start = self.end;
        let result = self
            .file
            .seek(SeekFrom::Start(start))
            .and_then(|_| self.file.write_all(&buf))
            .and_then(|_| self.file.sync_data());
        if let Err(e) = result {
            // Drop whatever partially landed so the next append starts clean.
            let _ = self.file.set_len(start);
            return Err(e.into());
        }
        self.end += buf.len() as u64;
        Ok(locs)
    }

    /// Overwrites the frame at `loc` with `record`, padded to the same length.
    /// Returns false (writing nothing) when the record does not fit.
    pub fn rewrite(&mut self, loc: FrameLoc, record: &Record) -> Result<bool, StoreError> {
        let mut payload = serde_json::to_vec(record).expect("records always serialize");
        if payload.len() > loc.payload_len as usize {
            return Ok(false);
        }
        payload.resize(loc.payload_len as usize, b' ');
        let mut buf = Vec::with_capacity(payload.len() + HEADER_LEN as usize);
        push_frame(&mut buf, &payload);
        self.file.seek(SeekFrom::Start(loc.offset))?;
        self.file.write_all(&buf)?;
        self.file.sync_data()?;
        Ok(true)
    }
}

fn push_frame(buf: &mut Vec<u8>, payload: &[u8]) {
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    buf.extend_from_slice(payload);
}

fn parse_frame(bytes: &[u8]) -> Option<(u32, &[u8])> {
    if bytes.len() < HEADER_LEN as usize {
        return None;
    }
    let len = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let crc = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let payload = bytes.get(HEADER_LEN as usize..HEADER_LEN as usize + len as usize)?;
    (crc32fast::hash(payload) == crc).then_some((len, payload))
}

/// True when the unparseable bytes can only be an interrupted final append:
/// either too short to hold the frame its header announces, or exactly one
/// frame long with a bad checksum.
fn is_tail(bytes: &[u8]) -> bool {
    if bytes.len() < HEADER_LEN as usize {
        return true;
    }
    let len = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    bytes.len() <= HEADER_LEN as usize + len
}
