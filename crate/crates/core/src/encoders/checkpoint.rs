// EMGM container, little-endian:
// magic | version u32 | config_len u32 | canonical config text
// | param_count u32 | params | stats_count u32 | stats
// where each entry is name_len u16 | name | rank u8 | extents u32×rank | f64 data.
// The config text carries one extra `rotation_offsets=` line; the stats
// section holds the input normalization's running mean, variance and
// (momentum, eps, updates).

use std::path::Path;

use super::{ArchConfig, Model};
use crate::dataio::CHANNELS;
use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMGM";
const VERSION: u32 = 1;

fn put_entry(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(t.shape().len() as u8);
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(m: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let offsets: Vec<String> = m.rotation_offsets.iter().map(i32::to_string).collect();
    let text = format!("{}rotation_offsets={}\n", m.arch.to_canonical(), offsets.join(","));
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(m.params.len() as u32).to_le_bytes());
    for (name, t) in m.names.iter().zip(&m.params) {
        put_entry(&mut buf, name, t);
    }
    let s = &m.norm;
    let stats = [
        ("norm.running_mean", Tensor::new(vec![CHANNELS], s.running_mean.clone()).expect("shape")),
        ("norm.running_var", Tensor::new(vec![CHANNELS], s.running_var.clone()).expect("shape")),
        ("norm.meta", Tensor::new(vec![3], vec![s.momentum, s.eps, s.updates as f64]).expect("shape")),
    ];
    buf.extend_from_slice(&(stats.len() as u32).to_le_bytes());
    for (name, t) in &stats {
        put_entry(&mut buf, name, t);
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: expected {} bytes, found {}", self.pos + n, self.bytes.len()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn entry(&mut self) -> Result<(String, Tensor)> {
        let at = self.pos;
        let len = self.u16("parameter name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "parameter name")?)
            .map_err(|_| Error::format(at as u64, "parameter name is not UTF-8"))?
            .to_string();
        let rank = self.u8("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("parameter extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let data = self
            .take(n * 8, "parameter data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected EMGM"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let text_at = r.pos as u64;
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| Error::format(text_at, "config is not UTF-8"))?;
    let (arch_text, offsets) = match text.trim_end().rsplit_once('\n') {
        Some((a, last)) if last.starts_with("rotation_offsets=") => (a, &last["rotation_offsets=".len()..]),
        _ => return Err(Error::format(text_at, "config lacks rotation_offsets")),
    };
    let arch = ArchConfig::from_canonical(arch_text).map_err(|e| Error::format(text_at, e.to_string()))?;
    let offsets = offsets
        .split(',')
        .map(|o| o.parse::<i32>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::format(text_at, format!("bad rotation offsets {offsets:?}")))?;

    let mut model = Model::new(arch, 0)?.with_offsets(offsets)?;
    let count_at = r.pos as u64;
    let count = r.u32("parameter count")? as usize;
    if count != model.params.len() {
        return Err(Error::format(
            count_at,
            format!("expected {} parameters, found {count}", model.params.len()),
        ));
    }
    for i in 0..count {
        let at = r.pos as u64;
        let (name, t) = r.entry()?;
        if name != model.names[i] || t.shape() != model.params[i].shape() {
            return Err(Error::format(
                at,
                format!(
                    "parameter {name:?} {:?} does not match {:?} {:?}",
                    t.shape(),
                    model.names[i],
                    model.params[i].shape()
                ),
            ));
        }
        model.params[i] = t;
    }
    let stats_at = r.pos as u64;
    if r.u32("stats count")? != 3 {
        return Err(Error::format(stats_at, "expected 3 normalization entries"));
    }
    let mut norm = BatchNormStats::new(CHANNELS);
    for expected in ["norm.running_mean", "norm.running_var", "norm.meta"] {
        let at = r.pos as u64;
        let (name, t) = r.entry()?;
        let want = if expected == "norm.meta" { 3 } else { CHANNELS };
        if name != expected || t.numel() != want {
            return Err(Error::format(at, format!("expected {expected} with {want} values, found {name:?}")));
        }
        match expected {
            "norm.running_mean" => norm.running_mean = t.into_data(),
            "norm.running_var" => norm.running_var = t.into_data(),
            _ => {
                let d = t.data();
                norm.momentum = d[0];
                norm.eps = d[1];
                norm.updates = d[2] as u64;
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    model.norm = norm;
    if !model.is_finite() {
        return Err(Error::format(count_at, "non-finite parameter"));
    }
    Ok(model)
}

pub fn save_checkpoint(m: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(m))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode_checkpoint(&std::fs::read(path)?)
}
