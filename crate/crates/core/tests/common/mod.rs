//! Shared fixtures for the integration tests: the desk-scale experiment
//! config and a checkpoint cache under the cargo target directory.

#![allow(dead_code)]

use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use chanest::config::ExperimentConfig;
use chanest::generator::{read_checkpoint, train, write_checkpoint, Checkpoint, StepLog, TrainHooks};

/// Desk-scale end-to-end config: toy DiT, 2000 urban training scenes (20k
/// channels), 200 held-out urban scenes (2k channels) and 200 rural scenes.
pub const DESK_CONFIG: &str = r#"
preset = "toy"

[data]
train_scenes = 2000
test_scenes = 200
ood_scenes = 200
seed = 7

[train]
seed = 1
steps = 11500
batch = 16
lr = 1e-3
log_every = 500
"#;

/// Bump when a model or training change invalidates cached checkpoints.
const CACHE_VERSION: u32 = 4;

pub fn desk_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(DESK_CONFIG).expect("desk config parses")
}

/// Unbuffered line on the real stderr, visible even when the test harness
/// captures output.
pub fn say(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

pub fn cache_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("chanest-cache");
    std::fs::create_dir_all(&dir).expect("cache dir");
    dir
}

fn cache_key(cfg: &ExperimentConfig) -> String {
    let mut h = DefaultHasher::new();
    CACHE_VERSION.hash(&mut h);
    cfg.to_toml().expect("config serializes").hash(&mut h);
    format!("{:016x}", h.finish())
}

/// Trained checkpoint for `cfg`, reused from the cache when present.
pub fn trained_checkpoint(cfg: &ExperimentConfig) -> Checkpoint {
    let path = cache_dir().join(format!("desk-{}.mcfw", cache_key(cfg)));
    if path.exists() {
        say(&format!("using cached checkpoint {}", path.display()));
        return read_checkpoint(&path).expect("cached checkpoint reads");
    }
    let start = Instant::now();
    let data = cfg.data.generate("train").expect("training split");
    let total = cfg.train.steps;
    let mut progress = |l: &StepLog| {
        say(&format!("  train step {:>5}/{total} loss {:.4} ({:.0}s)", l.step, l.loss, start.elapsed().as_secs_f64()));
    };
    let hooks = TrainHooks { out: None, progress: Some(&mut progress) };
    let outcome = train(&cfg.model, &cfg.train, &data, hooks).expect("training succeeds");
    say(&format!("trained {} steps on {} samples in {:.0}s", total, data.len(), start.elapsed().as_secs_f64()));
    let tmp = path.with_extension("partial");
    write_checkpoint(&tmp, &outcome.checkpoint).expect("checkpoint writes");
    std::fs::rename(&tmp, &path).expect("checkpoint lands");
    outcome.checkpoint
}
