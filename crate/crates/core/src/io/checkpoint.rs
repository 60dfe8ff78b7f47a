use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{ParameterStore, Tensor};
use crate::pool::build_pool;
use crate::rl::{Progress, Trainer, TrainerRngState};

/// Bumped on any change to the manifest or payload layout.
pub const CHECKPOINT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const PAYLOAD: &str = "params.bin";
const LATEST: &str = "LATEST";
const REAL_BYTES: usize = 8;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    /// Little-endian IEEE-754 binary64.
    real_format: String,
    config: String,
    progress: Progress,
    rng: TrainerRngState,
    payload_bytes: u64,
    payload_sha256: String,
    params: Vec<ParamRecord>,
}

/// Location of one parameter in the payload: value, then Adam first and
/// second moments, each `product(shape)` reals.
#[derive(Serialize, Deserialize)]
struct ParamRecord {
    store: String,
    name: String,
    shape: Vec<usize>,
    adam_step: u64,
    offset: u64,
    bytes: u64,
    sha256: String,
}

/// One parameter with its optimizer state, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    /// `"ed"` or `"rl"`.
    pub store: String,
    pub name: String,
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub adam_step: u64,
}

/// Everything a checkpoint directory holds.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub progress: Progress,
    pub rng: TrainerRngState,
    pub params: Vec<SavedParam>,
}

fn stores(trainer: &Trainer) -> [(&'static str, &ParameterStore); 2] {
    [("ed", &trainer.agent.ed_store), ("rl", &trainer.agent.rl_store)]
}

fn hex_sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn push_reals(buf: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes `<dir>/step-<steps>/` and points `<dir>/LATEST` at it. Both are
/// written to temporary names first and renamed into place.
pub fn save_checkpoint(dir: &Path, trainer: &Trainer, config: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = format!("step-{:012}", trainer.progress.steps);
    let target = dir.join(&name);
    let tmp = dir.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let mut payload = Vec::new();
    let mut params = Vec::new();
    for (store_name, store) in stores(trainer) {
        for e in store.entries() {
            let start = payload.len();
            push_reals(&mut payload, &e.value);
            push_reals(&mut payload, &e.m);
            push_reals(&mut payload, &e.v);
            params.push(ParamRecord {
                store: store_name.into(),
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                adam_step: e.step,
                offset: start as u64,
                bytes: (payload.len() - start) as u64,
                sha256: hex_sha(&payload[start..]),
            });
        }
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        real_format: "f64-le".into(),
        config: config.to_toml()?,
        progress: trainer.progress.clone(),
        rng: trainer.rng_state(),
        payload_bytes: payload.len() as u64,
        payload_sha256: hex_sha(&payload),
        params,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Usage(format!("manifest: {e}")))?;
    write_synced(&tmp.join(PAYLOAD), &payload)?;
    write_synced(&tmp.join(MANIFEST), text.as_bytes())?;
    if target.exists() {
        fs::remove_dir_all(&target).map_err(|e| Error::io(&target, e))?;
    }
    fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;

    let latest_tmp = dir.join(format!(".{LATEST}.tmp"));
    write_synced(&latest_tmp, name.as_bytes())?;
    fs::rename(&latest_tmp, dir.join(LATEST)).map_err(|e| Error::io(dir.join(LATEST), e))?;
    Ok(target)
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(path, e))
}

/// The checkpoint `<dir>/LATEST` names, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let p = dir.join(LATEST);
    if !p.exists() {
        return Ok(None);
    }
    let name = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(Some(dir.join(name.trim())))
}

/// Reads a checkpoint directory, verifying every checksum.
///
/// `path` may also be a run's checkpoint directory holding `LATEST`.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let path = match latest_checkpoint(path)? {
        Some(p) if !path.join(MANIFEST).exists() => p,
        _ => path.to_path_buf(),
    };
    let mp = path.join(MANIFEST);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Corrupt(format!("{}: {e}", mp.display())))?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Corrupt(format!("{}: no format_version", mp.display())))?;
    if found > CHECKPOINT_VERSION as u64 {
        return Err(Error::Version { found: found.min(u32::MAX as u64) as u32, supported: CHECKPOINT_VERSION });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Corrupt(format!("{}: {e}", mp.display())))?;
    if manifest.real_format != "f64-le" {
        return Err(Error::Corrupt(format!("unknown real format `{}`", manifest.real_format)));
    }

    let pp = path.join(PAYLOAD);
    let payload = fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(Error::Corrupt(format!("{}: {} bytes, manifest says {}", pp.display(), payload.len(), manifest.payload_bytes)));
    }
    if hex_sha(&payload) != manifest.payload_sha256 {
        return Err(Error::Corrupt(format!("{}: checksum mismatch", pp.display())));
    }
    let mut params = Vec::with_capacity(manifest.params.len());
    for r in &manifest.params {
        let n: usize = r.shape.iter().product();
        let (start, len) = (r.offset as usize, r.bytes as usize);
        if len != 3 * n * REAL_BYTES || start.checked_add(len).is_none_or(|end| end > payload.len()) {
            return Err(Error::Corrupt(format!("parameter `{}` lies outside the payload", r.name)));
        }
        let block = &payload[start..start + len];
        if hex_sha(block) != r.sha256 {
            return Err(Error::Corrupt(format!("parameter `{}`: checksum mismatch", r.name)));
        }
        let reals: Vec<f64> = block.chunks_exact(REAL_BYTES).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = |k: usize| Tensor::new(r.shape.clone(), reals[k * n..(k + 1) * n].to_vec());
        params.push(SavedParam {
            store: r.store.clone(),
            name: r.name.clone(),
            value: tensor(0)?,
            m: tensor(1)?,
            v: tensor(2)?,
            adam_step: r.adam_step,
        });
    }
    let config = RunConfig::from_toml_str(&manifest.config)?;
    Ok(Checkpoint { version: manifest.format_version, config, progress: manifest.progress, rng: manifest.rng, params })
}

impl Checkpoint {
    /// Copies the saved parameters and optimizer moments into `trainer`,
    /// matching by store, name and shape. Every parameter on either side
    /// must have a counterpart.
    pub fn apply_params(&self, trainer: &mut Trainer) -> Result<()> {
        let agent = &mut trainer.agent;
        let expected = agent.ed_store.len() + agent.rl_store.len();
        if expected != self.params.len() {
            return Err(Error::Corrupt(format!("checkpoint has {} parameters, the model has {expected}", self.params.len())));
        }
        for p in &self.params {
            let store = match p.store.as_str() {
                "ed" => &mut agent.ed_store,
                "rl" => &mut agent.rl_store,
                other => return Err(Error::Corrupt(format!("unknown parameter store `{other}`"))),
            };
            let id = store
                .id(&p.name)
                .ok_or_else(|| Error::Corrupt(format!("the model has no parameter `{}` in store `{}`", p.name, p.store)))?;
            let e = store.entry_mut(id);
            if e.value.shape() != p.value.shape() {
                return Err(Error::Corrupt(format!(
                    "parameter `{}` has shape {:?}, the model expects {:?}",
                    p.name,
                    p.value.shape(),
                    e.value.shape()
                )));
            }
            e.value = p.value.clone();
            e.m = p.m.clone();
            e.v = p.v.clone();
            e.step = p.adam_step;
        }
        Ok(())
    }

    /// A trainer in the saved state: parameters, optimizer, counters and
    /// random streams.
    pub fn into_trainer(self) -> Result<Trainer> {
        let c = &self.config;
        let pool = build_pool(&c.env, c.pool_mode, c.pool_size, c.seed)?;
        let mut trainer = Trainer::new(c.env.clone(), pool, c.model, c.training.clone(), c.seed)?;
        self.apply_params(&mut trainer)?;
        trainer.restore(self.rng, self.progress)?;
        trainer.set_parallel(!c.deterministic);
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;

    fn small(kind: EnvKind) -> RunConfig {
        let mut c = RunConfig::new(kind);
        c.training.hidden = 8;
        c.training.vae_latent = 4;
        c.training.n_envs = 2;
        c.training.total_steps = 100;
        c.training.eval_episodes = 2;
        c.pool_size = 3;
        c.deterministic = true;
        c
    }

    fn trainer(c: &RunConfig) -> Trainer {
        let pool = build_pool(&c.env, c.pool_mode, c.pool_size, c.seed).unwrap();
        Trainer::new(c.env.clone(), pool, c.model, c.training.clone(), c.seed).unwrap()
    }

    fn forward(t: &Trainer) -> Vec<u8> {
        let spec = t.env.spec().unwrap();
        let obs = Tensor::full(&[1, spec.obs_len(0)], 0.37);
        let z = Tensor::full(&[1, t.agent.model.embedding_dim()], -0.11);
        let (p, v) = t.agent.evaluate_policy(&obs, &z).unwrap();
        let mut bytes: Vec<u8> = p.data().iter().flat_map(|x| x.to_le_bytes()).collect();
        bytes.extend(v.iter().flat_map(|x| x.to_le_bytes()));
        bytes
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = small(EnvKind::Lbf);
        let mut t = trainer(&c);
        for _ in 0..3 {
            t.update().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = save_checkpoint(dir.path(), &t, &c).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.config, c);
        assert_eq!(ck.progress, t.progress);
        let r = ck.into_trainer().unwrap();
        assert_eq!(r.agent.ed_store.value_bytes(), t.agent.ed_store.value_bytes());
        assert_eq!(r.agent.rl_store.value_bytes(), t.agent.rl_store.value_bytes());
        for (a, b) in r.agent.rl_store.entries().zip(t.agent.rl_store.entries()) {
            assert_eq!(a.m, b.m);
            assert_eq!(a.v, b.v);
            assert_eq!(a.step, b.step);
        }
        assert_eq!(forward(&r), forward(&t));
        assert_eq!(latest_checkpoint(dir.path()).unwrap(), Some(path.clone()));
        assert_eq!(load_checkpoint(dir.path()).unwrap().progress, t.progress);
    }

    #[test]
    fn resumed_evaluation_matches() {
        let c = small(EnvKind::Dsl);
        let mut t = trainer(&c);
        t.update().unwrap();
        let before = t.evaluate(4, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = save_checkpoint(dir.path(), &t, &c).unwrap();
        let r = load_checkpoint(&path).unwrap().into_trainer().unwrap();
        assert_eq!(r.evaluate(4, 3).unwrap(), before);
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let c = small(EnvKind::Pp);
        let t = trainer(&c);
        let dir = tempfile::tempdir().unwrap();
        let path = save_checkpoint(dir.path(), &t, &c).unwrap();
        let bin = path.join(PAYLOAD);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt(_))));

        let mut flipped = bytes.clone();
        flipped[10] ^= 1;
        fs::write(&bin, &flipped).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt(_))));

        fs::write(path.join(MANIFEST), "{\"format_version\": 1, \"conf").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn newer_version_is_rejected() {
        let c = small(EnvKind::Lbf);
        let t = trainer(&c);
        let dir = tempfile::tempdir().unwrap();
        let path = save_checkpoint(dir.path(), &t, &c).unwrap();
        let mp = path.join(MANIFEST);
        let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&mp).unwrap()).unwrap();
        m["format_version"] = serde_json::json!(CHECKPOINT_VERSION + 1);
        fs::write(&mp, m.to_string()).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Version { found, supported }) => {
                assert_eq!(found, CHECKPOINT_VERSION + 1);
                assert_eq!(supported, CHECKPOINT_VERSION);
            }
            other => panic!("expected a version error, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let c = small(EnvKind::Lbf);
        let t = trainer(&c);
        let dir = tempfile::tempdir().unwrap();
        let path = save_checkpoint(dir.path(), &t, &c).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let mut wider = c.clone();
        wider.training.hidden = 9;
        let mut other = trainer(&wider);
        assert!(matches!(ck.apply_params(&mut other), Err(Error::Corrupt(_))));
    }
}
