//! `checkpoint_<step>/` directories.
//!
//! A checkpoint holds `manifest.json` (configuration, counters and a SHA-256
//! of every other file), the network and optimizer binaries, and
//! `trainer_state.json` with the random streams and the episode in
//! progress. `replay.bin` is only kept in the most recent checkpoint of a
//! run; older checkpoints can be loaded for evaluation but not resumed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::trainer::{AnyAgent, Trainer, TrainerCounters};
use super::{AgentKind, SessionConfig};
use crate::agent::dqn::DqnRngs;
use crate::agent::ensemble::EnsembleRngs;
use crate::env::EgoAction;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{decode_adam, decode_network, encode_adam, encode_network};
use crate::nn::{AdamState, NetworkParams};
use crate::replay::SharedReplayMemory;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATE_FILE: &str = "trainer_state.json";
pub const REPLAY_FILE: &str = "replay.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub agent: AgentKind,
    pub step: u64,
    pub episode: u64,
    pub config: SessionConfig,
    pub files: Vec<FileEntry>,
}

impl CheckpointManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: CheckpointManifest =
            serde_json::from_str(text).map_err(|e| Error::format("checkpoint manifest", e.to_string()))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::format(
                "checkpoint manifest",
                format!("version {} (expected {MANIFEST_VERSION})", m.format_version),
            ));
        }
        if m.agent != m.config.agent || m.agent == AgentKind::Heuristic {
            return Err(Error::format("checkpoint manifest", format!("agent {} does not match its config", m.agent)));
        }
        m.config.validate()?;
        for f in &m.files {
            let plain = !f.name.is_empty()
                && f.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
                && !f.name.starts_with('.');
            if !plain {
                return Err(Error::format("checkpoint manifest", format!("file name {:?}", f.name)));
            }
            if f.sha256.len() != 64 || !f.sha256.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(Error::format("checkpoint manifest", format!("digest of {}", f.name)));
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    fn entry(&self, name: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum AgentStreams {
    Ensemble { rngs: EnsembleRngs, active: usize },
    Dqn { rngs: DqnRngs },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    counters: TrainerCounters,
    agent: AgentStreams,
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join(format!("checkpoint_{step}"))
}

/// Checkpoint directories under `out`, sorted by step.
pub fn list_checkpoints(out: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut found = Vec::new();
    let entries = fs::read_dir(out).map_err(|e| Error::io(format!("listing {}", out.display()), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", out.display()), e))?;
        let name = entry.file_name();
        let Some(step) = name.to_str().and_then(|n| n.strip_prefix("checkpoint_")).and_then(|s| s.parse().ok())
        else {
            continue;
        };
        found.push((step, entry.path()));
    }
    found.sort();
    Ok(found)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn network_files(agent: &AnyAgent) -> Vec<(String, Vec<u8>)> {
    match agent {
        AnyAgent::Ensemble(a) => a
            .members
            .iter()
            .enumerate()
            .flat_map(|(k, m)| {
                [
                    (format!("member_{k}_trainable.bin"), encode_network(&m.trainable)),
                    (format!("member_{k}_target.bin"), encode_network(&m.target)),
                    (format!("member_{k}_prior.bin"), encode_network(&m.prior)),
                    (format!("member_{k}_adam.bin"), encode_adam(&m.optimizer)),
                ]
            })
            .collect(),
        AnyAgent::Dqn(a) => vec![
            ("online.bin".into(), encode_network(&a.online)),
            ("target.bin".into(), encode_network(&a.target)),
            ("adam.bin".into(), encode_adam(&a.optimizer)),
        ],
    }
}

/// Writes `checkpoint_<step>` under `out`, replacing an existing one.
/// The directory is assembled under a temporary name and renamed at the end.
pub fn write_checkpoint(
    out: &Path,
    trainer: &Trainer<AnyAgent>,
    config: &SessionConfig,
    with_replay: bool,
) -> Result<PathBuf> {
    let step = trainer.counters.step;
    let dir = checkpoint_dir(out, step);
    let tmp = out.join(format!(".checkpoint_{step}.partial"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(format!("removing {}", tmp.display()), e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;

    let mut files = network_files(&trainer.agent);
    let state = TrainerState {
        counters: trainer.counters.clone(),
        agent: match &trainer.agent {
            AnyAgent::Ensemble(a) => AgentStreams::Ensemble {
                rngs: a.rngs.clone(),
                active: a.active,
            },
            AnyAgent::Dqn(a) => AgentStreams::Dqn { rngs: a.rngs.clone() },
        },
    };
    let state_json = serde_json::to_vec_pretty(&state).map_err(|e| Error::format("trainer state", e.to_string()))?;
    files.push((STATE_FILE.into(), state_json));
    if with_replay {
        let replay = match &trainer.agent {
            AnyAgent::Ensemble(a) => &a.replay,
            AnyAgent::Dqn(a) => &a.replay,
        };
        files.push((REPLAY_FILE.into(), replay.encode()));
    }

    let mut entries = Vec::with_capacity(files.len());
    for (name, bytes) in &files {
        let path = tmp.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        entries.push(FileEntry {
            name: name.clone(),
            sha256: sha256_hex(bytes),
        });
    }
    let manifest = CheckpointManifest {
        format_version: MANIFEST_VERSION,
        agent: trainer.agent.kind(),
        step,
        episode: trainer.counters.episode,
        config: config.clone(),
        files: entries,
    };
    let path = tmp.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;

    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(format!("removing {}", dir.display()), e))?;
    }
    fs::rename(&tmp, &dir).map_err(|e| Error::io(format!("renaming {}", tmp.display()), e))?;
    Ok(dir)
}

/// Deletes `replay.bin` from every checkpoint under `out` except `keep`.
pub fn prune_replays(out: &Path, keep: &Path) -> Result<()> {
    for (_, dir) in list_checkpoints(out)? {
        if dir == keep {
            continue;
        }
        let replay = dir.join(REPLAY_FILE);
        if replay.exists() {
            fs::remove_file(&replay).map_err(|e| Error::io(format!("removing {}", replay.display()), e))?;
        }
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    CheckpointManifest::parse(&text)
}

/// Reads a file listed in the manifest and checks its digest.
fn read_verified(dir: &Path, manifest: &CheckpointManifest, name: &str) -> Result<Vec<u8>> {
    let entry = manifest
        .entry(name)
        .ok_or_else(|| Error::format("checkpoint", format!("{name} is not listed in the manifest")))?;
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if !sha256_hex(&bytes).eq_ignore_ascii_case(&entry.sha256) {
        return Err(Error::format("checkpoint", format!("{name} does not match its digest")));
    }
    Ok(bytes)
}

fn network(dir: &Path, manifest: &CheckpointManifest, name: &str) -> Result<NetworkParams> {
    let net: NetworkParams = decode_network(&read_verified(dir, manifest, name)?)?;
    let expected = &manifest.config.learning().architecture;
    if net.architecture().actions != EgoAction::COUNT {
        return Err(Error::ShapeMismatch {
            expected: EgoAction::COUNT,
            got: net.architecture().actions,
        });
    }
    if net.architecture() != expected {
        return Err(Error::format(
            "checkpoint",
            format!("{name} has architecture {:?}, the config says {expected:?}", net.architecture()),
        ));
    }
    Ok(net)
}

fn adam(dir: &Path, manifest: &CheckpointManifest, name: &str, params: &NetworkParams) -> Result<AdamState> {
    let state: AdamState = decode_adam(&read_verified(dir, manifest, name)?)?;
    if state.len() != params.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len(),
            got: state.len(),
        });
    }
    Ok(state)
}

/// Restores the networks and optimizers of a checkpoint. The replay memory
/// is empty and the random streams are fresh.
pub fn load_agent(dir: &Path) -> Result<(CheckpointManifest, AnyAgent)> {
    let manifest = read_manifest(dir)?;
    let mut agent = AnyAgent::new(&manifest.config)?;
    match &mut agent {
        AnyAgent::Ensemble(a) => {
            for (k, m) in a.members.iter_mut().enumerate() {
                m.trainable = network(dir, &manifest, &format!("member_{k}_trainable.bin"))?;
                m.target = network(dir, &manifest, &format!("member_{k}_target.bin"))?;
                m.prior = network(dir, &manifest, &format!("member_{k}_prior.bin"))?;
                m.optimizer = adam(dir, &manifest, &format!("member_{k}_adam.bin"), &m.trainable)?;
            }
        }
        AnyAgent::Dqn(a) => {
            a.online = network(dir, &manifest, "online.bin")?;
            a.target = network(dir, &manifest, "target.bin")?;
            a.optimizer = adam(dir, &manifest, "adam.bin", &a.online)?;
        }
    }
    Ok((manifest, agent))
}

/// Restores everything needed to continue training from `dir`.
pub fn load_trainer(dir: &Path) -> Result<(CheckpointManifest, Trainer<AnyAgent>)> {
    let (manifest, mut agent) = load_agent(dir)?;
    if manifest.entry(REPLAY_FILE).is_none() || !dir.join(REPLAY_FILE).exists() {
        return Err(Error::Usage(format!(
            "{} has no replay memory; only the latest checkpoint of a run can be resumed",
            dir.display()
        )));
    }
    let replay = SharedReplayMemory::decode(&read_verified(dir, &manifest, REPLAY_FILE)?)?;
    let state: TrainerState = serde_json::from_slice(&read_verified(dir, &manifest, STATE_FILE)?)
        .map_err(|e| Error::format("trainer state", e.to_string()))?;
    if state.counters.step != manifest.step {
        return Err(Error::format("trainer state", "step differs from the manifest"));
    }
    match (&mut agent, state.agent) {
        (AnyAgent::Ensemble(a), AgentStreams::Ensemble { rngs, active }) => {
            if replay.members() != a.members.len() || rngs.minibatch.len() != a.members.len() || active >= a.members.len()
            {
                return Err(Error::format("checkpoint", "member count differs between files"));
            }
            a.replay = checked_capacity(replay, a.config.learning.replay_capacity)?;
            a.rngs = rngs;
            a.active = active;
        }
        (AnyAgent::Dqn(a), AgentStreams::Dqn { rngs }) => {
            if replay.members() != 1 {
                return Err(Error::format("checkpoint", "replay memory has more than one member"));
            }
            a.replay = checked_capacity(replay, a.config.learning.replay_capacity)?;
            a.rngs = rngs;
        }
        _ => return Err(Error::format("trainer state", "agent kind differs from the manifest")),
    }
    let vehicle_count = manifest.config.vehicle_count;
    Ok((manifest, Trainer::with_counters(agent, vehicle_count, state.counters)))
}

fn checked_capacity(replay: SharedReplayMemory, capacity: usize) -> Result<SharedReplayMemory> {
    if replay.capacity() != capacity {
        return Err(Error::format(
            "replay memory",
            format!("capacity {} differs from the configured {capacity}", replay.capacity()),
        ));
    }
    Ok(replay)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Profile;

    fn tiny(agent: AgentKind) -> SessionConfig {
        let mut c = SessionConfig::profile(Profile::Desk);
        c.agent = agent;
        c.ensemble.members = 2;
        for l in [&mut c.ensemble.learning, &mut c.dqn.learning] {
            l.learning_starts = 30;
            l.batch_size = 4;
            l.target_update = 25;
            l.replay_capacity = 500;
        }
        c
    }

    #[test]
    fn resumed_trainer_continues_identically() {
        for kind in [AgentKind::Rpf, AgentKind::Dqn] {
            let config = tiny(kind);
            let dir = tempfile::tempdir().unwrap();
            let mut a = Trainer::new(AnyAgent::new(&config).unwrap(), config.vehicle_count, config.seed);
            a.run_until(120).unwrap();
            let ck = write_checkpoint(dir.path(), &a, &config, true).unwrap();
            let (manifest, mut b) = load_trainer(&ck).unwrap();
            assert_eq!(manifest.step, 120);
            assert_eq!(
                serde_json::to_string(&a.counters).unwrap(),
                serde_json::to_string(&b.counters).unwrap()
            );
            let (pa, pb) = (a.counters.current.as_ref().unwrap(), b.counters.current.as_ref().unwrap());
            assert_eq!(pa.state, pb.state);
            a.drain_log();
            a.run_until(260).unwrap();
            b.run_until(260).unwrap();
            assert_eq!(a.drain_log(), b.drain_log());
            match (&a.agent, &b.agent) {
                (AnyAgent::Ensemble(x), AnyAgent::Ensemble(y)) => {
                    assert_eq!(x.members, y.members);
                    assert_eq!(x.replay, y.replay);
                }
                (AnyAgent::Dqn(x), AnyAgent::Dqn(y)) => {
                    assert_eq!((&x.online, &x.target, &x.optimizer), (&y.online, &y.target, &y.optimizer));
                }
                _ => panic!("agent kind changed"),
            }
        }
    }

    #[test]
    fn tampering_and_pruning_are_detected() {
        let config = tiny(AgentKind::Rpf);
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(AnyAgent::new(&config).unwrap(), 5, 1);
        t.run_until(40).unwrap();
        let first = write_checkpoint(dir.path(), &t, &config, true).unwrap();
        t.run_until(80).unwrap();
        let second = write_checkpoint(dir.path(), &t, &config, true).unwrap();
        prune_replays(dir.path(), &second).unwrap();
        assert!(!first.join(REPLAY_FILE).exists());
        assert!(matches!(load_trainer(&first), Err(Error::Usage(_))));
        assert!(load_agent(&first).is_ok());
        let steps: Vec<u64> = list_checkpoints(dir.path()).unwrap().into_iter().map(|c| c.0).collect();
        assert_eq!(steps, vec![40, 80]);

        let prior = second.join("member_1_prior.bin");
        let mut bytes = fs::read(&prior).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&prior, bytes).unwrap();
        assert!(matches!(load_agent(&second), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_rejects_bad_fields() {
        let config = tiny(AgentKind::Dqn);
        let good = CheckpointManifest {
            format_version: MANIFEST_VERSION,
            agent: AgentKind::Dqn,
            step: 10,
            episode: 0,
            config: config.clone(),
            files: vec![FileEntry {
                name: "online.bin".into(),
                sha256: sha256_hex(b"x"),
            }],
        };
        assert_eq!(CheckpointManifest::parse(&good.to_json()).unwrap(), good);
        let mut m = good.clone();
        m.files[0].name = "../online.bin".into();
        assert!(CheckpointManifest::parse(&m.to_json()).is_err());
        let mut m = good.clone();
        m.agent = AgentKind::Rpf;
        assert!(CheckpointManifest::parse(&m.to_json()).is_err());
        let mut m = good.clone();
        m.format_version = 2;
        assert!(CheckpointManifest::parse(&m.to_json()).is_err());
        assert!(CheckpointManifest::parse("{").is_err());
    }

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
