use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{Record, StoreError};

const HEADER: usize = 8;

fn segment_name(base: u64) -> String {
    format!("{base:020}.seg")
}

pub fn encode_frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Parse frames from `buf`. Returns the payloads and the byte length of the
/// valid prefix; anything after it is a torn or corrupt tail.
pub fn decode_frames(buf: &[u8]) -> (Vec<&[u8]>, usize) {
    let mut out = Vec::new();
    let mut pos = 0;
    while buf.len() - pos >= HEADER {
        let len = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(buf[pos + 4..pos + 8].try_into().unwrap());
        let Some(payload) = buf.get(pos + HEADER..pos + HEADER + len) else {
            break;
        };
        if crc32fast::hash(payload) != crc {
            break;
        }
        out.push(payload);
        pos += HEADER + len;
    }
    (out, pos)
}

/// Appender for one topic directory.
#[derive(Debug)]
pub struct SegmentWriter {
    dir: PathBuf,
    file: File,
    size: u64,
    roll_at: u64,
    sync: bool,
}

impl SegmentWriter {
    /// Load every record under `dir`, truncating a torn tail in the last
    /// segment, and return a writer positioned at the end.
    pub fn open(dir: &Path, roll_at: u64, sync: bool) -> Result<(Self, Vec<Record>), StoreError> {
        fs::create_dir_all(dir)?;
        let mut segs: Vec<(u64, PathBuf)> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                let base = p.file_stem()?.to_str()?.parse().ok()?;
                (p.extension()? == "seg").then_some((base, p))
            })
            .collect();
        segs.sort();
        let mut records = Vec::new();
        let last = segs.len().saturating_sub(1);
        for (i, (base, path)) in segs.iter().enumerate() {
            let corrupt = |reason: String| StoreError::Corrupt {
                path: path.clone(),
                reason,
            };
            if *base != records.len() as u64 {
                return Err(corrupt(format!("segment base {base} but {} records precede it", records.len())));
            }
            let mut buf = Vec::new();
            File::open(path)?.read_to_end(&mut buf)?;
            let (frames, valid) = decode_frames(&buf);
            if valid < buf.len() {
                if i != last {
                    return Err(corrupt(format!("bad frame at byte {valid} in a sealed segment")));
                }
                tracing::warn!(path = %path.display(), valid, len = buf.len(), "truncating torn segment tail");
                OpenOptions::new().write(true).open(path)?.set_len(valid as u64)?;
            }
            for payload in frames {
                let rec: Record = serde_json::from_slice(payload)?;
                if rec.offset != records.len() as u64 {
                    return Err(corrupt(format!("offset {} out of sequence", rec.offset)));
                }
                records.push(rec);
            }
        }
        let (path, size) = match segs.last() {
            Some((_, p)) => (p.clone(), fs::metadata(p)?.len()),
            None => (dir.join(segment_name(0)), 0),
        };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok((
            SegmentWriter {
                dir: dir.to_path_buf(),
                file,
                size,
                roll_at,
                sync,
            },
            records,
        ))
    }

    /// Append one record; `offset` is the record's own offset, used to name
    /// a new segment when rolling.
    pub fn append(&mut self, offset: u64, payload: &[u8]) -> Result<(), StoreError> {
        if self.size >= self.roll_at && self.size > 0 {
            let path = self.dir.join(segment_name(offset));
            self.file = OpenOptions::new().create(true).append(true).open(path)?;
            self.size = 0;
        }
        let frame = encode_frame(payload);
        self.file.write_all(&frame)?;
        if self.sync {
            self.file.sync_data()?;
        }
        self.size += frame.len() as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn frames_round_trip_and_torn_tail_is_cut(
            payloads in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..64), 0..20),
            cut in any::<proptest::sample::Index>(),
        ) {
            let mut buf = Vec::new();
            let mut ends = vec![0];
            for p in &payloads {
                buf.extend(encode_frame(p));
                ends.push(buf.len());
            }
            let (frames, valid) = decode_frames(&buf);
            prop_assert_eq!(valid, buf.len());
            prop_assert_eq!(frames.len(), payloads.len());

            let at = cut.index(buf.len() + 1);
            let (frames, valid) = decode_frames(&buf[..at]);
            let whole = ends.iter().filter(|e| **e <= at).count() - 1;
            prop_assert_eq!(frames.len(), whole);
            prop_assert_eq!(valid, ends[whole]);
        }
    }

    #[test]
    fn flipped_byte_stops_decoding() {
        let mut buf = encode_frame(b"one");
        buf.extend(encode_frame(b"two"));
        let n = buf.len();
        buf[n - 1] ^= 1;
        let (frames, valid) = decode_frames(&buf);
        assert_eq!(frames, vec![b"one".as_slice()]);
        assert_eq!(valid, HEADER + 3);
    }
}
