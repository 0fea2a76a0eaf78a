//! Glue between configuration, datasets on disk and checkpoints.

use std::path::{Path, PathBuf};

use crate::config::{DataConfig, RunConfig, Split};
use crate::data::{generate, load_manifest, split, write_manifest, write_samples, Sample};
use crate::error::{Error, Result};
use crate::model::{Duat, DuatConfig};
use crate::nn::Checkpoint;

/// Manifest listing every generated sample.
pub const MANIFEST: &str = "manifest.tsv";

/// Manifest file of one partition inside a dataset directory.
pub fn split_manifest(dir: &Path, s: Split) -> PathBuf {
    dir.join(format!("{}.tsv", s.as_str()))
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Splits {
    pub fn get(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Generates and partitions the dataset described by `data`.
pub fn generate_splits(data: &DataConfig) -> Result<Splits> {
    let samples = generate(&data.spec, data.count)?;
    let (train, val, test) = split(&samples, data.split, data.split_seed)?;
    Ok(Splits { train, val, test })
}

/// Generates the dataset and writes images, masks and the four manifests
/// into `dir`.
pub fn synthesize(data: &DataConfig, dir: &Path) -> Result<Splits> {
    let splits = generate_splits(data)?;
    let mut all: Vec<Sample> = splits
        .train
        .iter()
        .chain(&splits.val)
        .chain(&splits.test)
        .cloned()
        .collect();
    all.sort_by(|a, b| a.id.cmp(&b.id));
    let entries = write_samples(dir, &all)?;
    write_manifest(&dir.join(MANIFEST), &entries)?;
    for s in [Split::Train, Split::Val, Split::Test] {
        let ids: Vec<&str> = splits.get(s).iter().map(|x| x.id.as_str()).collect();
        let part: Vec<_> = ids
            .iter()
            .map(|id| {
                entries
                    .iter()
                    .find(|e| e.id == *id)
                    .cloned()
                    .expect("every split sample was written")
            })
            .collect();
        write_manifest(&split_manifest(dir, s), &part)?;
    }
    Ok(splits)
}

/// Reads the partitions from `data.dir`, or generates them in memory when no
/// directory is configured.
pub fn load_splits(data: &DataConfig) -> Result<Splits> {
    let Some(dir) = &data.dir else {
        return generate_splits(data);
    };
    let load = |s: Split| {
        let path = split_manifest(dir, s);
        if path.exists() {
            load_manifest(&path)
        } else {
            Err(Error::Data(format!("missing manifest {}", path.display())))
        }
    };
    Ok(Splits {
        train: load(Split::Train)?,
        val: load(Split::Val)?,
        test: load(Split::Test)?,
    })
}

/// Checks that every sample matches the model's input size.
pub fn check_sizes(model: &DuatConfig, samples: &[Sample]) -> Result<()> {
    for s in samples {
        if s.size() != model.input_size {
            let (h, w) = s.size();
            let (mh, mw) = model.input_size;
            return Err(Error::Data(format!(
                "sample {} is {h}x{w} but the model expects {mh}x{mw}",
                s.id
            )));
        }
    }
    Ok(())
}

/// Saves the parameters of `model` with its configuration as metadata.
pub fn save_model(model: &Duat, path: &Path) -> Result<()> {
    let cfg = RunConfig {
        model: model.config().clone(),
        ..RunConfig::default()
    };
    Checkpoint::from_store(model.store(), &cfg.model_text()).save(path)
}

/// Rebuilds the model described by a checkpoint's metadata and loads its
/// parameters.
pub fn load_model(path: &Path) -> Result<Duat> {
    let ckpt = Checkpoint::load(path)?;
    let config = RunConfig::model_from_text(&ckpt.metadata)?;
    let mut model = Duat::new(config)?;
    ckpt.apply(model.store_mut())?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GenSpec;

    fn small() -> DataConfig {
        DataConfig {
            count: 10,
            spec: GenSpec {
                size: (32, 32),
                ..GenSpec::default()
            },
            ..DataConfig::default()
        }
    }

    #[test]
    fn synthesized_directory_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let made = synthesize(&small(), dir.path()).unwrap();
        let cfg = DataConfig {
            dir: Some(dir.path().to_path_buf()),
            ..small()
        };
        let loaded = load_splits(&cfg).unwrap();
        for s in [Split::Train, Split::Val, Split::Test] {
            let (a, b) = (made.get(s), loaded.get(s));
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.id, y.id);
                assert_eq!(x.image, y.image);
                assert_eq!(x.mask, y.mask);
                assert_eq!(x.area_fraction, y.area_fraction);
            }
        }
        assert_eq!(
            std::fs::read_to_string(dir.path().join(MANIFEST))
                .unwrap()
                .lines()
                .count(),
            10
        );
    }

    #[test]
    fn missing_directory_is_a_data_error() {
        let cfg = DataConfig {
            dir: Some(PathBuf::from("/nonexistent/duat")),
            ..small()
        };
        assert!(matches!(load_splits(&cfg), Err(Error::Data(_))));
    }

    #[test]
    fn model_round_trips_through_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let config = DuatConfig {
            input_size: (32, 32),
            use_sba: false,
            seed: 5,
            ..DuatConfig::default()
        };
        let model = Duat::new(config.clone()).unwrap();
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.config(), &config);
        for (a, b) in model.store().params().iter().zip(back.store().params()) {
            assert_eq!(a.value(), b.value());
        }
    }

    #[test]
    fn size_mismatch_detected() {
        let samples = generate_splits(&small()).unwrap().train;
        assert!(check_sizes(&DuatConfig::default(), &samples).is_err());
        let cfg = DuatConfig {
            input_size: (32, 32),
            ..DuatConfig::default()
        };
        assert!(check_sizes(&cfg, &samples).is_ok());
    }
}
