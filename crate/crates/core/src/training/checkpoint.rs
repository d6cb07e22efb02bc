use std::path::Path;

use crate::archive::{decode_f64, decode_u128, decode_u64, encode_f64, encode_u128, encode_u64, Archive};
use crate::error::{Error, Result};
use crate::networks::{read_params, write_params, ArchConfig, ParamSet};
use crate::numerics::{AdamState, RngStream, Tensor};
use crate::training::{TrainConfig, TrainingState};

fn vector(values: Vec<f32>) -> Tensor<f32> {
    let n = values.len();
    Tensor::new(&[n], values).expect("encoded values are finite")
}

/// UTF-8 bytes as exact `f32` values.
pub(crate) fn encode_text(s: &str) -> Tensor<f32> {
    vector(s.bytes().map(|b| b as f32).collect())
}

pub(crate) fn decode_text(t: &Tensor<f32>) -> Result<String> {
    let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
    String::from_utf8(bytes).map_err(|_| Error::Checkpoint("text entry is not utf-8".into()))
}

fn write_adam(a: &mut Archive, prefix: &str, state: &AdamState<f32>, params: &ParamSet<f32>) {
    a.push(format!("adam/{prefix}/step"), vector(encode_u64(state.step)));
    for (i, n) in params.names.iter().enumerate() {
        a.push(format!("adam/{prefix}/m/{n}"), state.first_moment[i].clone());
        a.push(format!("adam/{prefix}/v/{n}"), state.second_moment[i].clone());
    }
}

fn read_adam(a: &Archive, prefix: &str, state: &mut AdamState<f32>, params: &ParamSet<f32>) -> Result<()> {
    state.step = decode_u64(a.get(&format!("adam/{prefix}/step"))?.data())?;
    for (i, n) in params.names.iter().enumerate() {
        for (kind, dst) in [("m", &mut state.first_moment[i]), ("v", &mut state.second_moment[i])] {
            let src = a.get(&format!("adam/{prefix}/{kind}/{n}"))?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!("optimizer moment {kind}/{n} has the wrong shape")));
            }
            *dst = src.clone();
        }
    }
    Ok(())
}

pub fn to_archive(state: &TrainingState) -> Result<Archive> {
    let mut a = Archive::new();
    a.push("meta/arch", encode_text(&serde_json::to_string(&state.generator.arch)?));
    a.push("meta/config", encode_text(&serde_json::to_string(&state.config)?));
    a.push("meta/num_identities", vector(encode_u64(state.discriminator.num_identities as u64)));
    a.push("meta/step", vector(encode_u64(state.step)));
    a.push("meta/pose_range", vector(encode_f64(&[state.pose_range.0, state.pose_range.1])));
    a.push("equilibrium/k", vector(encode_f64(&[state.equilibrium.k])));
    a.push("rng/seed", vector(encode_u64(state.rng.seed())));
    a.push("rng/position", vector(encode_u128(state.rng.position())));
    write_params(&mut a, &state.generator.params, &state.generator.bn);
    write_params(&mut a, &state.discriminator.params, &state.discriminator.bn);
    write_adam(&mut a, "g", &state.g_adam, &state.generator.params);
    write_adam(&mut a, "d", &state.d_adam, &state.discriminator.params);
    Ok(a)
}

pub fn from_archive(a: &Archive) -> Result<TrainingState> {
    let parse = |e: serde_json::Error| Error::Checkpoint(format!("bad metadata: {e}"));
    let arch: ArchConfig = serde_json::from_str(&decode_text(a.get("meta/arch")?)?).map_err(parse)?;
    let config: TrainConfig = serde_json::from_str(&decode_text(a.get("meta/config")?)?).map_err(parse)?;
    let num_identities = decode_u64(a.get("meta/num_identities")?.data())? as usize;
    let range = decode_f64(a.get("meta/pose_range")?.data())?;
    if range.len() != 2 {
        return Err(Error::Checkpoint("pose range must hold two values".into()));
    }
    let mut state = TrainingState::new(&arch, &config, num_identities, (range[0], range[1]))?;
    state.step = decode_u64(a.get("meta/step")?.data())?;
    let k = decode_f64(a.get("equilibrium/k")?.data())?;
    state.equilibrium.k = *k.first().ok_or_else(|| Error::Checkpoint("missing k".into()))?;
    state.rng = RngStream::restore(
        decode_u64(a.get("rng/seed")?.data())?,
        decode_u128(a.get("rng/position")?.data())?,
    );
    read_params(a, &mut state.generator.params, &mut state.generator.bn)?;
    read_params(a, &mut state.discriminator.params, &mut state.discriminator.bn)?;
    read_adam(a, "g", &mut state.g_adam, &state.generator.params)?;
    read_adam(a, "d", &mut state.d_adam, &state.discriminator.params)?;
    Ok(state)
}

pub fn save_checkpoint(state: &TrainingState, path: &Path) -> Result<()> {
    to_archive(state)?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainingState> {
    from_archive(&Archive::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::tests::tiny_setup;
    use crate::training::{train, train_from, TrainOutputs};

    #[test]
    fn save_load_save_is_byte_identical() {
        let (arch, mut cfg, ds) = tiny_setup();
        cfg.steps = 2;
        let (state, _) = train(&arch, &cfg, &ds, &TrainOutputs::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&state, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded, state);
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let mut bytes = std::fs::read(&p1).unwrap();
        bytes[3] ^= 0xFF;
        std::fs::write(&p2, bytes).unwrap();
        let err = load_checkpoint(&p2).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let (arch, mut cfg, ds) = tiny_setup();
        cfg.steps = 6;
        let (full_state, full) = train(&arch, &cfg, &ds, &TrainOutputs::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        cfg.checkpoint_interval = 3;
        let outputs = TrainOutputs { log: None, checkpoint_dir: Some(dir.path().to_path_buf()) };
        let (_, _) = train(&arch, &TrainConfig { steps: 3, ..cfg.clone() }, &ds, &outputs).unwrap();
        let mut resumed = load_checkpoint(&crate::training::checkpoint_path(dir.path(), 3)).unwrap();
        resumed.config.steps = 6;
        resumed.config.checkpoint_interval = 0;
        let tail = train_from(&mut resumed, &ds, &TrainOutputs::default()).unwrap();
        assert_eq!(tail, full[3..]);
        assert_eq!(resumed.generator, full_state.generator);
        assert_eq!(resumed.equilibrium.k, full_state.equilibrium.k);
    }
}
