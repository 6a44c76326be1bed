// EMGS container, little-endian:
// magic | version u32 | sample_rate u32 | channel_count u16 | sample_count u64
// | event_count u32 | prompt_len u32 | user_seed u64 | session_seed u64
// | events (timestamp u64, key u8) | prompt | samples i16, frame-major.

use std::io::{Read, Write};
use std::path::Path;

use super::{KeyEvent, Session, CHANNELS};
use crate::error::{Error, Result};

pub const SESSION_MAGIC: &[u8; 4] = b"EMGS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 2 + 8 + 4 + 4 + 8 + 8;

pub fn encode_session(s: &Session) -> Result<Vec<u8>> {
    s.validate()?;
    let mut buf = Vec::with_capacity(HEADER_LEN + s.events.len() * 9 + s.prompt.len() + s.samples.len() * 2);
    buf.extend_from_slice(SESSION_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&s.sample_rate.to_le_bytes());
    buf.extend_from_slice(&(CHANNELS as u16).to_le_bytes());
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(s.events.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(s.prompt.len() as u32).to_le_bytes());
    buf.extend_from_slice(&s.user_seed.to_le_bytes());
    buf.extend_from_slice(&s.session_seed.to_le_bytes());
    for e in &s.events {
        buf.extend_from_slice(&e.timestamp.to_le_bytes());
        buf.push(e.key as u8);
    }
    buf.extend_from_slice(s.prompt.as_bytes());
    for v in &s.samples {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_session(bytes: &[u8]) -> Result<Session> {
    let need = |at: usize, n: usize, what: &str| -> Result<()> {
        if bytes.len() < at + n {
            Err(Error::format(
                at as u64,
                format!("truncated {what}: expected {} bytes, found {}", at + n, bytes.len()),
            ))
        } else {
            Ok(())
        }
    };
    need(0, 4, "magic")?;
    if &bytes[..4] != SESSION_MAGIC {
        return Err(Error::format(0, "bad magic, expected EMGS"));
    }
    need(0, HEADER_LEN, "header")?;
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let sample_rate = u32_at(8);
    let channels = u16_at(12) as usize;
    if channels != CHANNELS {
        return Err(Error::format(12, format!("expected {CHANNELS} channels, found {channels}")));
    }
    let sample_count = u64_at(14) as usize;
    let event_count = u32_at(22) as usize;
    let prompt_len = u32_at(26) as usize;
    let user_seed = u64_at(30);
    let session_seed = u64_at(38);

    let mut pos = HEADER_LEN;
    need(pos, event_count * 9, "events")?;
    let mut events = Vec::with_capacity(event_count);
    for _ in 0..event_count {
        let timestamp = u64_at(pos);
        let key = bytes[pos + 8] as char;
        if !crate::alphabet::is_key(key) {
            return Err(Error::format((pos + 8) as u64, format!("key byte {:#04x} outside the alphabet", key as u8)));
        }
        events.push(KeyEvent { timestamp, key });
        pos += 9;
    }
    need(pos, prompt_len, "prompt")?;
    let prompt = std::str::from_utf8(&bytes[pos..pos + prompt_len])
        .map_err(|_| Error::format(pos as u64, "prompt is not UTF-8"))?
        .to_string();
    pos += prompt_len;
    let n = sample_count * CHANNELS;
    need(pos, n * 2, "samples")?;
    let samples: Vec<i16> = bytes[pos..pos + n * 2]
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    pos += n * 2;
    if pos != bytes.len() {
        return Err(Error::format(pos as u64, format!("{} trailing bytes", bytes.len() - pos)));
    }
    let s = Session {
        sample_rate,
        samples,
        events,
        prompt,
        user_seed,
        session_seed,
    };
    s.validate().map_err(|e| Error::format(HEADER_LEN as u64, e.to_string()))?;
    Ok(s)
}

pub fn write_session(s: &Session, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_session(s)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_session(path: impl AsRef<Path>) -> Result<Session> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_session(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_session, GenConfig};

    fn session() -> Session {
        let cfg = GenConfig {
            duration_s: 3.0,
            ..GenConfig::default()
        };
        generate_session(&cfg, 11, 12).unwrap()
    }

    #[test]
    fn round_trip() {
        let s = session();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.emgs");
        write_session(&s, &p).unwrap();
        assert_eq!(read_session(&p).unwrap(), s);
    }

    #[test]
    fn corrupt_magic() {
        let mut b = encode_session(&session()).unwrap();
        b[0] ^= 0xff;
        assert!(matches!(decode_session(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncated_samples_report_lengths() {
        let b = encode_session(&session()).unwrap();
        let cut = &b[..b.len() - 101];
        match decode_session(cut) {
            Err(Error::Format { message, .. }) => {
                assert!(message.contains(&format!("expected {}", b.len())), "{message}");
                assert!(message.contains(&format!("found {}", cut.len())), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_version() {
        let mut b = encode_session(&session()).unwrap();
        b[4] = 9;
        assert!(matches!(decode_session(&b), Err(Error::Format { offset: 4, .. })));
    }
}
