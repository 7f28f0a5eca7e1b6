//! Checkpoint container: named parameter tensors with optimizer moments, the
//! run configuration snapshot, and the epoch counter.
//!
//! Layout (little-endian): magic "LDPC", u16 version = 1, u16 height,
//! u16 width, u8 method tag, u32 epoch, u64 adam step count, u32 config
//! length + utf-8 config text, u32 parameter count, then per parameter:
//! u16 name length + name, u8 rank, u32 extents, f64 value payload, f64
//! first-moment payload, f64 second-moment payload; trailing CRC-32.

use crate::config::RunConfig;
use crate::dataset::crc32;
use crate::em::Method;
use crate::error::LdpError;
use crate::nets::Networks;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use std::io::Read;
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LDPC";
pub const CHECKPOINT_VERSION: u16 = 1;

pub struct Checkpoint {
    pub method: Method,
    pub height: usize,
    pub width: usize,
    pub config: RunConfig,
    pub epoch: u32,
    pub store: ParamStore,
    pub nets: Networks,
}

fn method_tag(method: Method) -> u8 {
    match method {
        Method::Ldp => 0,
        Method::LdpSoftmax => 1,
        Method::Nem => 2,
    }
}

fn method_from_tag(tag: u8) -> Result<Method, LdpError> {
    match tag {
        0 => Ok(Method::Ldp),
        1 => Ok(Method::LdpSoftmax),
        2 => Ok(Method::Nem),
        other => Err(LdpError::Format {
            offset: 9,
            message: format!("unknown method tag {}", other),
        }),
    }
}

pub fn save_checkpoint(
    path: &Path,
    method: Method,
    height: usize,
    width: usize,
    config: &RunConfig,
    epoch: u32,
    store: &ParamStore,
) -> Result<(), LdpError> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(height as u16).to_le_bytes());
    out.extend_from_slice(&(width as u16).to_le_bytes());
    out.push(method_tag(method));
    out.extend_from_slice(&epoch.to_le_bytes());
    out.extend_from_slice(&store.adam_step_count.to_le_bytes());
    let config_text = config.to_text();
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &p.adam_m {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &p.adam_v {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, out).map_err(|e| LdpError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LdpError> {
        if self.at + n > self.bytes.len() {
            return Err(LdpError::Format {
                offset: self.bytes.len(),
                message: "checkpoint truncated".into(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, LdpError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, LdpError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, LdpError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, LdpError> {
        Ok(self.take(1)?[0])
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, LdpError> {
        let b = self.take(8 * n)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Load a checkpoint, rebuilding the parameter store and network layout from
/// the embedded configuration. A parameter-name or shape mismatch between the
/// file and the rebuilt architecture is an error, never a silent reshape.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, LdpError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| LdpError::io(path, e))?;
    if bytes.len() < 4 + 2 + 4 {
        return Err(LdpError::Format { offset: bytes.len(), message: "checkpoint truncated".into() });
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(LdpError::Format { offset: 0, message: "bad checkpoint magic".into() });
    }
    let declared =
        u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual = crc32(&bytes[..bytes.len() - 4]);
    if declared != actual {
        return Err(LdpError::Format {
            offset: bytes.len() - 4,
            message: "checkpoint checksum mismatch".into(),
        });
    }
    let mut r = Reader { bytes: &bytes[..bytes.len() - 4], at: 4 };
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(LdpError::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {}", version),
        });
    }
    let height = r.u16()? as usize;
    let width = r.u16()? as usize;
    let method = method_from_tag(r.u8()?)?;
    let epoch = r.u32()?;
    let adam_steps = r.u64()?;
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| LdpError::Format { offset: r.at, message: "config snapshot is not utf-8".into() })?
        .to_string();
    let mut config = RunConfig::default();
    for line in config_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            config.apply(k.trim(), v.trim())?;
        }
    }

    let arch = config.arch(height, width);
    let (eta_s, eta_theta) = config.eta_inits(arch.pixels());
    let (mut store, nets) = Networks::init(
        config.seed,
        arch,
        method.with_appearance(),
        method.has_background(),
        eta_s,
        eta_theta,
    )?;

    let count = r.u32()? as usize;
    if count != store.len() {
        return Err(LdpError::Config(format!(
            "checkpoint holds {} parameters but the architecture defines {}",
            count,
            store.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| LdpError::Format { offset: r.at, message: "parameter name is not utf-8".into() })?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let value = Tensor::new(shape.clone(), r.f64s(numel)?);
        let adam_m = r.f64s(numel)?;
        let adam_v = r.f64s(numel)?;
        let id = store.find(&name).ok_or_else(|| {
            LdpError::Config(format!("checkpoint parameter {:?} not in this architecture", name))
        })?;
        if store.value(id).shape() != value.shape() {
            return Err(LdpError::Config(format!(
                "parameter {:?} has shape {:?} in the checkpoint but {:?} here",
                name,
                value.shape(),
                store.value(id).shape()
            )));
        }
        store.set_value(id, value);
        store.set_moments(id, adam_m, adam_v);
    }
    store.adam_step_count = adam_steps;
    Ok(Checkpoint { method, height, width, config, epoch, store, nets })
}

impl ParamStore {
    pub fn set_moments(&mut self, id: ParamId, m: Vec<f64>, v: Vec<f64>) {
        let p = self.param_mut(id);
        assert_eq!(m.len(), p.value.numel(), "moment length mismatch for {}", p.name);
        assert_eq!(v.len(), p.value.numel(), "moment length mismatch for {}", p.name);
        p.adam_m = m;
        p.adam_v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn trained_ish_store() -> (RunConfig, ParamStore) {
        let mut config = RunConfig::default();
        config.apply("latent-dim", "4").unwrap();
        config.apply("feature-dim", "5").unwrap();
        config.apply("hidden", "6").unwrap();
        let arch = config.arch(4, 4);
        let (eta_s, eta_theta) = config.eta_inits(16);
        let (mut store, _) = Networks::init(3, arch, true, true, eta_s, eta_theta).unwrap();
        // scribble on the moments so the round trip is meaningful
        let mut rng = Rng::seeded(9, 0);
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let n = store.value(id).numel();
            let m: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            store.set_moments(id, m, v);
        }
        store.adam_step_count = 77;
        (config, store)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("ldp_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ldpc");
        let (config, store) = trained_ish_store();
        save_checkpoint(&path, Method::Ldp, 4, 4, &config, 12, &store).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.epoch, 12);
        assert_eq!(ck.method, Method::Ldp);
        assert_eq!(ck.store.adam_step_count, 77);
        for ((_, a), (_, b)) in store.iter().zip(ck.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data(), "{} value drifted", a.name);
            assert_eq!(a.adam_m, b.adam_m, "{} first moment drifted", a.name);
            assert_eq!(a.adam_v, b.adam_v, "{} second moment drifted", a.name);
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let dir = std::env::temp_dir().join("ldp_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corrupt.ldpc");
        let (config, store) = trained_ish_store();
        save_checkpoint(&path, Method::Ldp, 4, 4, &config, 1, &store).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[40] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(LdpError::Format { .. })));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn architecture_mismatch_fails_loudly() {
        // saved with one layout, loaded after the embedded config is edited
        // to a different hidden width: parameter count no longer matches
        let dir = std::env::temp_dir().join("ldp_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mismatch.ldpc");
        let (config, store) = trained_ish_store();
        save_checkpoint(&path, Method::Ldp, 4, 4, &config, 1, &store).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // rewrite "hidden=6" to "hidden=7" inside the config snapshot and
        // refresh the trailing CRC so only the semantic check can fire
        let pos = bytes.windows(8).position(|w| w == b"hidden=6").expect("config text present");
        bytes[pos + 7] = b'7';
        let n = bytes.len();
        let crc = crc32(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(LdpError::Config(_))));
        std::fs::remove_file(&path).unwrap();
    }
}
