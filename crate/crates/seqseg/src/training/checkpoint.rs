//! Versioned checkpoint container.
//!
//! Layout: `"SEQSEGCK"` magic, u32 LE format version, u64 LE header length,
//! JSON header, all parameters and optimizer moments as f64 LE in traversal
//! order, and a trailing SHA-256 over everything before it. The header
//! carries the full training config plus its fingerprint, so a loaded
//! checkpoint knows exactly what produced it.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DiscriminatorParams, SeqUnetParams};
use crate::nn::Parameterized;
use crate::scalar::Scalar;
use crate::training::{AdamState, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEQSEGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained (or initialized) model with enough state to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S: Scalar> {
    pub config: TrainConfig,
    /// Epoch the captured parameters come from (0 = initialization).
    pub epoch: usize,
    pub params: SeqUnetParams<S>,
    /// Present only for adversarially adapted models.
    pub discriminator: Option<DiscriminatorParams<S>>,
    pub opt_seg: AdamState,
    pub opt_disc: Option<AdamState>,
}

impl<S: Scalar> Checkpoint<S> {
    /// Fresh checkpoint around a parameter set that has seen no training.
    pub fn initial(config: TrainConfig, params: SeqUnetParams<S>) -> Self {
        let n = params.param_count();
        Checkpoint {
            config,
            epoch: 0,
            params,
            discriminator: None,
            opt_seg: AdamState::zeros(n),
            opt_disc: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    fingerprint: String,
    config: TrainConfig,
    epoch: usize,
    seg_params: usize,
    disc_params: usize,
    opt_seg_step: u64,
    opt_disc_step: u64,
}

fn push_f64s(buf: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>, path: &Path) -> Result<()> {
    let header = Header {
        dtype: S::DTYPE.to_string(),
        fingerprint: ckpt.config.fingerprint(),
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        seg_params: ckpt.params.param_count(),
        disc_params: ckpt.discriminator.as_ref().map_or(0, |d| d.param_count()),
        opt_seg_step: ckpt.opt_seg.step,
        opt_disc_step: ckpt.opt_disc.as_ref().map_or(0, |s| s.step),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::checkpoint(path, format!("header serialization failed: {e}")))?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    push_f64s(&mut bytes, ckpt.params.to_f64_vec());
    if let Some(disc) = &ckpt.discriminator {
        push_f64s(&mut bytes, disc.to_f64_vec());
    }
    push_f64s(&mut bytes, ckpt.opt_seg.m.iter().copied());
    push_f64s(&mut bytes, ckpt.opt_seg.v.iter().copied());
    if let Some(opt) = &ckpt.opt_disc {
        push_f64s(&mut bytes, opt.m.iter().copied());
        push_f64s(&mut bytes, opt.v.iter().copied());
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))
}

struct BlobReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BlobReader<'a> {
    fn take_f64s(&mut self, n: usize, path: &Path) -> Result<Vec<f64>> {
        let end = self.pos + n * 8;
        if end > self.data.len() {
            return Err(Error::checkpoint(path, "parameter blob is shorter than the header promises"));
        }
        let out = self.data[self.pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos = end;
        Ok(out)
    }
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let min_len = CHECKPOINT_MAGIC.len() + 4 + 8 + 32;
    if bytes.len() < min_len {
        return Err(Error::checkpoint(path, "file is truncated"));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != stored_digest {
        return Err(Error::checkpoint(path, "checksum mismatch (corrupt or truncated file)"));
    }
    if &body[..8] != CHECKPOINT_MAGIC {
        return Err(Error::checkpoint(path, "not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::checkpoint(
            path,
            format!("unsupported format version {version} (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    if 20 + header_len > body.len() {
        return Err(Error::checkpoint(path, "header length exceeds file size"));
    }
    let header: Header = serde_json::from_slice(&body[20..20 + header_len])
        .map_err(|e| Error::checkpoint(path, format!("unreadable header: {e}")))?;
    if header.dtype != S::DTYPE {
        return Err(Error::checkpoint(
            path,
            format!("stored dtype {} does not match requested {}", header.dtype, S::DTYPE),
        ));
    }
    if header.fingerprint != header.config.fingerprint() {
        return Err(Error::checkpoint(
            path,
            "config fingerprint mismatch (header config does not match its fingerprint)",
        ));
    }
    header.config.validate()?;

    // The seed only shapes the throwaway initialization; every value is
    // overwritten from the blob below.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = SeqUnetParams::<S>::init(header.config.model.clone(), &mut rng)?;
    if params.param_count() != header.seg_params {
        return Err(Error::checkpoint(
            path,
            format!(
                "model built from the stored config has {} parameters, header says {}",
                params.param_count(),
                header.seg_params
            ),
        ));
    }
    let mut reader = BlobReader { data: body, pos: 20 + header_len };
    params.load_f64_slice(&reader.take_f64s(header.seg_params, path)?);

    let discriminator = if header.disc_params > 0 {
        let mut disc = DiscriminatorParams::<S>::init(&mut rng, &header.config.model);
        if disc.param_count() != header.disc_params {
            return Err(Error::checkpoint(path, "discriminator parameter count mismatch"));
        }
        disc.load_f64_slice(&reader.take_f64s(header.disc_params, path)?);
        Some(disc)
    } else {
        None
    };

    let opt_seg = AdamState {
        step: header.opt_seg_step,
        m: reader.take_f64s(header.seg_params, path)?,
        v: reader.take_f64s(header.seg_params, path)?,
    };
    let opt_disc = if header.disc_params > 0 {
        Some(AdamState {
            step: header.opt_disc_step,
            m: reader.take_f64s(header.disc_params, path)?,
            v: reader.take_f64s(header.disc_params, path)?,
        })
    } else {
        None
    };
    if reader.pos != body.len() {
        return Err(Error::checkpoint(path, "trailing bytes after the parameter blob"));
    }

    Ok(Checkpoint {
        config: header.config,
        epoch: header.epoch,
        params,
        discriminator,
        opt_seg,
        opt_disc,
    })
}
