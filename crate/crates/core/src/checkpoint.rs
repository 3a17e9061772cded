//! On-disk model checkpoints.
//!
//! A checkpoint is a directory with three files:
//!
//! - `manifest.toml`: format version, architecture, GP raw hyperparameters,
//!   target scaler, completed epochs, seed, config hash, blob lengths and
//!   SHA-256 digests, and the full config text.
//! - `params.bin`: little-endian f64 parameters in the order encoder trunk,
//!   mean head, σ head, decoder. Each network stores, per layer, its weight
//!   matrix (input × output, row-major) followed by its bias.
//! - `optimizer.bin`: the phase-1 then phase-2 Adam states, each as a
//!   little-endian u64 step count, a u64 length, then first and second
//!   moments as f64.
//!
//! Loading validates everything before constructing the model, so a corrupt
//! checkpoint never yields a partially loaded one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gp::GpRawParams;
use crate::nn::{AdamState, MlpModel};
use crate::trainer::{DklVaeModel, TargetScaler};
use crate::vae::{VaeArchitecture, VaeModel};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("unsupported checkpoint format_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{file}: expected {expected} bytes, found {found}")]
    Length {
        file: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{file}: checksum mismatch")]
    Checksum { file: &'static str },
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSection {
    pub lengthscale_raw: f64,
    pub output_scale_raw: f64,
    pub noise_raw: f64,
    pub lengthscale_bound: f64,
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub architecture: VaeArchitecture,
    pub gp: GpSection,
    pub target_scaler: TargetScaler,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub params_len: usize,
    pub params_sha256: String,
    pub optimizer_sha256: String,
    /// The experiment config the model was trained with, as TOML text.
    pub config: String,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

fn networks(vae: &VaeModel) -> [&MlpModel; 4] {
    [&vae.encoder_trunk, &vae.mean_head, &vae.logvar_head, &vae.decoder]
}

pub fn params_blob(vae: &VaeModel) -> Vec<u8> {
    let mut out = Vec::new();
    for net in networks(vae) {
        push_f64s(&mut out, net.params());
    }
    out
}

pub fn optimizer_blob(model: &DklVaeModel) -> Vec<u8> {
    let mut out = Vec::new();
    for opt in [&model.vae_opt, &model.dkl_opt] {
        out.extend_from_slice(&opt.step_count().to_le_bytes());
        out.extend_from_slice(&(opt.len() as u64).to_le_bytes());
        push_f64s(&mut out, opt.first_moment());
        push_f64s(&mut out, opt.second_moment());
    }
    out
}

/// Writes a checkpoint into `dir`, creating it if needed.
pub fn save_checkpoint(
    dir: &Path,
    model: &DklVaeModel,
    arch: &VaeArchitecture,
    seed: u64,
    config_hash: &str,
    config_text: &str,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let params = params_blob(&model.vae);
    let optim = optimizer_blob(model);
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        architecture: arch.clone(),
        gp: GpSection {
            lengthscale_raw: model.gp_raw.lengthscale,
            output_scale_raw: model.gp_raw.output_scale,
            noise_raw: model.gp_raw.noise,
            lengthscale_bound: model.lengthscale_bound,
            jitter: model.jitter,
        },
        target_scaler: model.scaler,
        epoch: model.epoch,
        seed,
        config_hash: config_hash.to_string(),
        params_len: params.len() / 8,
        params_sha256: hex_digest(&params),
        optimizer_sha256: hex_digest(&optim),
        config: config_text.to_string(),
    };
    let text = toml::to_string(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(io_err(&p))
    };
    write(PARAMS_FILE, &params)?;
    write(OPTIMIZER_FILE, &optim)?;
    // Manifest last: a directory without one is not a checkpoint.
    write(MANIFEST_FILE, text.as_bytes())?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, CheckpointError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CheckpointError::Manifest(e.to_string()))?;
    let found = table
        .get("format_version")
        .and_then(|v| v.as_integer())
        .ok_or_else(|| CheckpointError::Manifest("missing format_version".into()))?;
    if found != CHECKPOINT_FORMAT_VERSION as i64 {
        return Err(CheckpointError::Version {
            found: found.clamp(0, u32::MAX as i64) as u32,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CheckpointError::Manifest(e.to_string()))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn parse_optimizers(bytes: &[u8], lens: [usize; 2]) -> Result<[AdamState; 2], CheckpointError> {
    let expected = lens.iter().map(|l| 16 + 16 * l).sum::<usize>();
    if bytes.len() != expected {
        return Err(CheckpointError::Length {
            file: OPTIMIZER_FILE,
            expected,
            found: bytes.len(),
        });
    }
    let mut cur = Cursor { bytes, pos: 0 };
    let mut read_one = |len: usize| -> Result<AdamState, CheckpointError> {
        let short = || CheckpointError::Mismatch("optimizer blob truncated".into());
        let step = cur.u64().ok_or_else(short)?;
        let stored = cur.u64().ok_or_else(short)? as usize;
        if stored != len {
            return Err(CheckpointError::Mismatch(format!(
                "optimizer covers {stored} values, model needs {len}"
            )));
        }
        let m = read_f64s(cur.take(8 * len).ok_or_else(short)?);
        let v = read_f64s(cur.take(8 * len).ok_or_else(short)?);
        AdamState::from_parts(step, m, v).map_err(|e| CheckpointError::Mismatch(e.to_string()))
    };
    let a = read_one(lens[0])?;
    let b = read_one(lens[1])?;
    Ok([a, b])
}

/// Loads a checkpoint, checking version, lengths and digests.
pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, DklVaeModel), CheckpointError> {
    let manifest = read_manifest(dir)?;
    let arch = &manifest.architecture;
    let specs = [
        arch.encoder_trunk(),
        arch.mean_head(),
        arch.logvar_head(),
        arch.decoder(),
    ];
    let counts: Vec<usize> = specs
        .iter()
        .map(|s| s.iter().map(|l| l.param_count()).sum())
        .collect();
    let total: usize = counts.iter().sum();
    if manifest.params_len != total {
        return Err(CheckpointError::Mismatch(format!(
            "manifest lists {} parameters, architecture has {total}",
            manifest.params_len
        )));
    }

    let path = dir.join(PARAMS_FILE);
    let params = fs::read(&path).map_err(io_err(&path))?;
    if params.len() != 8 * total {
        return Err(CheckpointError::Length {
            file: PARAMS_FILE,
            expected: 8 * total,
            found: params.len(),
        });
    }
    if hex_digest(&params) != manifest.params_sha256 {
        return Err(CheckpointError::Checksum { file: PARAMS_FILE });
    }
    let path = dir.join(OPTIMIZER_FILE);
    let optim = fs::read(&path).map_err(io_err(&path))?;
    if hex_digest(&optim) != manifest.optimizer_sha256 {
        return Err(CheckpointError::Checksum {
            file: OPTIMIZER_FILE,
        });
    }

    let values = read_f64s(&params);
    let mut nets = Vec::with_capacity(4);
    let mut offset = 0;
    for (spec, &n) in specs.iter().zip(&counts) {
        let net = MlpModel::from_params(spec, values[offset..offset + n].to_vec())
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        nets.push(net);
        offset += n;
    }
    let decoder = nets.pop().expect("four networks");
    let logvar = nets.pop().expect("four networks");
    let mean = nets.pop().expect("four networks");
    let trunk = nets.pop().expect("four networks");
    let vae = VaeModel::from_parts(trunk, mean, logvar, decoder)
        .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;

    let enc = vae.encoder_param_count();
    let [vae_opt, dkl_opt] = parse_optimizers(&optim, [enc + vae.decoder.param_count(), enc + 3])?;
    let gp = &manifest.gp;
    let model = DklVaeModel {
        vae,
        gp_raw: GpRawParams {
            lengthscale: gp.lengthscale_raw,
            output_scale: gp.output_scale_raw,
            noise: gp.noise_raw,
        },
        lengthscale_bound: gp.lengthscale_bound,
        jitter: gp.jitter,
        vae_opt,
        dkl_opt,
        scaler: manifest.target_scaler,
        epoch: manifest.epoch,
    };
    Ok((manifest, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainConfig;

    fn model() -> (VaeArchitecture, DklVaeModel) {
        let arch = VaeArchitecture {
            data_dim: 6,
            hidden: vec![5, 4],
            latent_dim: 2,
        };
        let cfg = TrainConfig {
            epochs: 1,
            vae_batch_size: 2,
            vae_lr: 1e-3,
            dkl_lr: 1e-3,
            dkl_scale: 1.0,
            lengthscale_bound: 3.0,
            dkl_subset_size: None,
            eval_every: 1,
            seed: 11,
            normalize_targets: true,
            init_lengthscale: 1.0,
            init_output_scale: 1.0,
            init_noise_variance: 0.1,
            jitter: 1e-6,
        };
        let mut m = DklVaeModel::new(&arch, &cfg, &[1.0, 2.0, 4.0]).unwrap();
        let mut g: Vec<f64> = (0..m.vae_opt.len()).map(|i| (i as f64).sin()).collect();
        let vae = &mut m.vae;
        let mut all: Vec<f64> = params_blob(vae).chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        m.vae_opt.step(&mut all, &g, 0.1).unwrap();
        g.truncate(m.dkl_opt.len());
        let mut raw = vec![0.0; m.dkl_opt.len()];
        m.dkl_opt.step(&mut raw, &g, 0.1).unwrap();
        m.epoch = 7;
        (arch, m)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (arch, m) = model();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &m, &arch, 11, "abc", "x = 1\n").unwrap();
        let (man, back) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(man.epoch, 7);
        assert_eq!(man.config_hash, "abc");
        assert_eq!(man.config, "x = 1\n");
        let dir2 = tempfile::tempdir().unwrap();
        save_checkpoint(dir2.path(), &back, &arch, 11, "abc", "x = 1\n").unwrap();
        for f in [MANIFEST_FILE, PARAMS_FILE, OPTIMIZER_FILE] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(dir2.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn corruption_is_detected() {
        let (arch, m) = model();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &m, &arch, 11, "abc", "").unwrap();
        let p = dir.path().join(PARAMS_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(CheckpointError::Length { .. })));
        bytes.extend_from_slice(&1.5f64.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(CheckpointError::Checksum { .. })));

        save_checkpoint(dir.path(), &m, &arch, 11, "abc", "").unwrap();
        let mp = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mp).unwrap().replace("format_version = 1", "format_version = 9");
        fs::write(&mp, text).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(CheckpointError::Version { found: 9, .. })));
        fs::remove_file(&mp).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(CheckpointError::Io { .. })));
    }
}
