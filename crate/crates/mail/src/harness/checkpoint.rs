//! Binary checkpoint container: magic "MAILCK1", a version byte, a
//! length-prefixed UTF-8 config blob (train config plus epoch and rng
//! state), a named parameter table (name length + UTF-8 name + rank +
//! extents + f64 payload, all little-endian) and a trailing CRC32 of the
//! payload region (everything between the magic and the checksum).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::PolicyNet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::train::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MAILCK1";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_net(
        config: TrainConfig,
        net: &PolicyNet,
        epoch: u64,
        rng_seed: [u8; 32],
        rng_word_pos: u128,
    ) -> Self {
        let params = net
            .store()
            .iter()
            .map(|(name, t)| (name.to_string(), t.clone()))
            .collect();
        Checkpoint { config, epoch, rng_seed, rng_word_pos, params }
    }

    /// Rebuild the network: construct from the stored config and overwrite
    /// every parameter by name.
    pub fn restore_net(&self) -> Result<PolicyNet> {
        let mut net = PolicyNet::new(self.config.net_config()?, self.config.seed)?;
        if net.store().len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, config implies {}",
                self.params.len(),
                net.store().len()
            )));
        }
        for (name, tensor) in &self.params {
            let id = net
                .store()
                .find(name)
                .ok_or_else(|| Error::Format(format!("checkpoint parameter '{name}' unknown")))?;
            net.store_mut().set(id, tensor.clone())?;
        }
        Ok(net)
    }

    /// Reconstruct the training rng stream exactly where it stopped.
    pub fn restore_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    fn config_blob(&self) -> String {
        let mut blob = self.config.to_text();
        blob.push_str(&format!("epoch = {}\n", self.epoch));
        blob.push_str(&format!("rng_seed_hex = {}\n", hex_encode(&self.rng_seed)));
        blob.push_str(&format!("rng_word_pos = {}\n", self.rng_word_pos));
        blob
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        payload.push(CHECKPOINT_VERSION);
        let blob = self.config_blob();
        payload.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        payload.extend_from_slice(blob.as_bytes());
        payload.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in &self.params {
            payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
            payload.extend_from_slice(name.as_bytes());
            payload.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
            for &e in tensor.shape() {
                payload.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in tensor.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(7 + payload.len() + 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        if buf.len() < 7 + 1 + 4 {
            return Err(Error::Format("checkpoint file truncated".into()));
        }
        if &buf[..7] != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic; expected MAILCK1".into()));
        }
        let payload = &buf[7..buf.len() - 4];
        let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Format(format!(
                "checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})"
            )));
        }
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > payload.len() {
                return Err(Error::Format("checkpoint payload truncated".into()));
            }
            let s = &payload[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let version = take(&mut pos, 1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let blob_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let blob = String::from_utf8(take(&mut pos, blob_len)?.to_vec())
            .map_err(|_| Error::Format("config blob is not UTF-8".into()))?;
        let (config, epoch, rng_seed, rng_word_pos) = parse_blob(&blob)?;
        let n_params = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, 8 * numel)?;
            let data: Vec<f64> =
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if pos != payload.len() {
            return Err(Error::Format("trailing bytes in checkpoint payload".into()));
        }
        Ok(Checkpoint { config, epoch, rng_seed, rng_word_pos, params })
    }
}

fn parse_blob(blob: &str) -> Result<(TrainConfig, u64, [u8; 32], u128)> {
    let mut config_lines = String::new();
    let mut epoch = 0u64;
    let mut rng_seed = [0u8; 32];
    let mut rng_word_pos = 0u128;
    for line in blob.lines() {
        if let Some(v) = line.strip_prefix("epoch = ") {
            epoch = v.trim().parse().map_err(|e| Error::Format(format!("epoch: {e}")))?;
        } else if let Some(v) = line.strip_prefix("rng_seed_hex = ") {
            rng_seed = hex_decode(v.trim())?;
        } else if let Some(v) = line.strip_prefix("rng_word_pos = ") {
            rng_word_pos =
                v.trim().parse().map_err(|e| Error::Format(format!("rng_word_pos: {e}")))?;
        } else {
            config_lines.push_str(line);
            config_lines.push('\n');
        }
    }
    Ok((TrainConfig::parse(&config_lines)?, epoch, rng_seed, rng_word_pos))
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(Error::Format("rng seed hex must be 64 chars".into()));
    }
    let mut out = [0u8; 32];
    for (i, chunk) in s.as_bytes().chunks_exact(2).enumerate() {
        let hi = (chunk[0] as char).to_digit(16);
        let lo = (chunk[1] as char).to_digit(16);
        match (hi, lo) {
            (Some(h), Some(l)) => out[i] = (h * 16 + l) as u8,
            _ => return Err(Error::Format("invalid hex in rng seed".into())),
        }
    }
    Ok(out)
}

/// Atomic write (temp file then rename).
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
