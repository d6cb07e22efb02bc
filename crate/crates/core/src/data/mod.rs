//! Face datasets: synthetic generation, directory ingestion, batching.

mod image;
pub mod synthetic;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub use image::{augment_crop, preprocess, to_image, RgbImage};
pub use synthetic::SyntheticFaceConfig;

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::shapemodel::{LandmarkShape, ShapeModel, SHAPE_DIM};

pub const TRAIN: &str = "train";
pub const EVAL: &str = "eval";
pub const GALLERY: &str = "gallery";
pub const PROBE: &str = "probe";

/// One labelled face. `real` is the adversarial label; dataset samples are real.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceSample {
    /// `[3,H,W]` in `[-1,1]`, at source (pre-crop) size.
    pub image: Tensor<f32>,
    pub identity: usize,
    pub landmarks: LandmarkShape,
    pub pose_code: f64,
    pub real: bool,
    /// Ground-truth yaw, known only for synthetic samples.
    pub yaw_degrees: Option<f64>,
}

impl FaceSample {
    pub fn new(
        image: Tensor<f32>,
        identity: usize,
        num_identities: usize,
        landmarks: LandmarkShape,
        pose_code: f64,
        yaw_degrees: Option<f64>,
    ) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::dim(format!("face image must be [3,H,W], got {s:?}")));
        }
        if image.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Range("face image values must lie in [-1,1]".into()));
        }
        if identity >= num_identities {
            return Err(Error::Range(format!("identity {identity} outside 0..{num_identities}")));
        }
        if !pose_code.is_finite() {
            return Err(Error::numeric("pose code is not finite"));
        }
        Ok(FaceSample { image, identity, landmarks, pose_code, real: true, yaw_degrees })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<FaceSample>,
    pub identity_names: Vec<String>,
    pub shape_model: ShapeModel,
    /// Network input size; samples are cropped to it when batched.
    pub image_size: usize,
    splits: BTreeMap<String, Vec<usize>>,
}

/// Stacked network inputs for a set of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub identities: Vec<usize>,
    pub pose_codes: Vec<f64>,
}

pub enum Crop<'a> {
    Centre,
    Random(&'a mut RngStream),
}

impl Dataset {
    pub fn new(
        samples: Vec<FaceSample>,
        identity_names: Vec<String>,
        shape_model: ShapeModel,
        image_size: usize,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset("dataset has no samples".into()));
        }
        let shape = samples[0].image.shape().to_vec();
        if shape[1] < image_size || shape[2] < image_size {
            return Err(Error::dim(format!("images {shape:?} are smaller than input size {image_size}")));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.image.shape() != shape.as_slice() {
                return Err(Error::dim(format!("sample {i} has shape {:?}, expected {shape:?}", s.image.shape())));
            }
            if s.identity >= identity_names.len() {
                return Err(Error::Range(format!("sample {i} identity out of range")));
            }
        }
        let mut splits = BTreeMap::new();
        splits.insert(TRAIN.to_string(), (0..samples.len()).collect());
        Ok(Dataset { samples, identity_names, shape_model, image_size, splits })
    }

    pub fn num_identities(&self) -> usize {
        self.identity_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Config(format!("dataset has no split named '{name}'")))
    }

    pub fn split_names(&self) -> impl Iterator<Item = &str> {
        self.splits.keys().map(|s| s.as_str())
    }

    /// Sets a named split. Indices must be valid and distinct.
    pub fn set_split(&mut self, name: &str, indices: Vec<usize>) -> Result<()> {
        let mut seen = vec![false; self.samples.len()];
        for &i in &indices {
            if i >= self.samples.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("split '{name}' has an invalid or repeated index {i}")));
            }
        }
        self.splits.insert(name.to_string(), indices);
        Ok(())
    }

    /// Gallery/probe partition of `indices`: per identity the sample with the
    /// smallest `|pose code|` (lowest index on ties) is the gallery entry.
    pub fn identification_split(&self, indices: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut best: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in indices {
            let id = self.samples[i].identity;
            let better = match best.get(&id) {
                None => true,
                Some(&j) => self.samples[i].pose_code.abs() < self.samples[j].pose_code.abs(),
            };
            if better {
                best.insert(id, i);
            }
        }
        let gallery: Vec<usize> = best.values().copied().collect();
        let probes = indices.iter().copied().filter(|i| !gallery.contains(i)).collect();
        (gallery, probes)
    }

    /// Empirical `[min, max]` pose code over a split.
    pub fn pose_range(&self, split: &str) -> Result<(f64, f64)> {
        let idx = self.split(split)?;
        if idx.is_empty() {
            return Err(Error::EmptyDataset(format!("split '{split}' is empty")));
        }
        let codes = idx.iter().map(|&i| self.samples[i].pose_code);
        let lo = codes.clone().fold(f64::INFINITY, f64::min);
        let hi = codes.fold(f64::NEG_INFINITY, f64::max);
        Ok((lo, hi))
    }

    pub fn batch(&self, indices: &[usize], crop: Crop<'_>) -> Result<Batch> {
        let mut images = Vec::with_capacity(indices.len());
        let mut rng = match crop {
            Crop::Random(r) => Some(r),
            Crop::Centre => None,
        };
        for &i in indices {
            let s = self.samples.get(i).ok_or_else(|| Error::Range(format!("sample index {i}")))?;
            let (c, _) = augment_crop(&s.image, self.image_size, rng.as_deref_mut())?;
            images.push(c.reshape(&[1, 3, self.image_size, self.image_size])?);
        }
        Ok(Batch {
            images: Tensor::stack(&images)?,
            identities: indices.iter().map(|&i| self.samples[i].identity).collect(),
            pose_codes: indices.iter().map(|&i| self.samples[i].pose_code).collect(),
        })
    }

    /// Writes `images/<identity>/<n>.ppm`, one manifest per split
    /// (`<split>.txt`), `yaw.csv` for synthetic samples and the shape model.
    pub fn write_directory(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(self.samples.len());
        for (n, s) in self.samples.iter().enumerate() {
            let rel = PathBuf::from("images").join(&self.identity_names[s.identity]).join(format!("{n:05}.ppm"));
            std::fs::create_dir_all(dir.join(rel.parent().unwrap()))?;
            let (full, _) = augment_crop(&s.image, s.image.shape()[1], None)?;
            to_image(&full)?.write(&dir.join(&rel))?;
            paths.push(rel);
        }
        for (name, idx) in &self.splits {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{name}.txt")))?);
            for &i in idx {
                let flat = self.samples[i].landmarks.to_flat();
                let coords: Vec<String> = flat.iter().map(|v| format!("{v:?}")).collect();
                writeln!(f, "{},{}", paths[i].display(), coords.join(","))?;
            }
            f.flush()?;
        }
        if self.samples.iter().any(|s| s.yaw_degrees.is_some()) {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("yaw.csv"))?);
            writeln!(f, "path,yaw_degrees")?;
            for (p, s) in paths.iter().zip(&self.samples) {
                if let Some(y) = s.yaw_degrees {
                    writeln!(f, "{},{y:?}", p.display())?;
                }
            }
            f.flush()?;
        }
        self.shape_model.to_archive().save(&dir.join("shapemodel.ckpt"))?;
        Ok(())
    }
}

/// One parsed manifest record.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub landmarks: LandmarkShape,
}

/// Parses `path,x1,y1,...,x5,y5` lines; blank lines and `#` comments are
/// skipped. Relative image paths resolve against the manifest's directory.
pub fn read_manifest(manifest: &Path) -> Result<Vec<(usize, ManifestEntry)>> {
    let text = std::fs::read_to_string(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 1 + SHAPE_DIM {
            return Err(Error::Ingestion {
                line: line_no,
                message: format!("expected a path and {SHAPE_DIM} coordinates, found {} fields", fields.len()),
            });
        }
        let coords = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Ingestion { line: line_no, message: format!("bad coordinate: {e}") })?;
        let landmarks = LandmarkShape::from_flat(&coords)
            .map_err(|e| Error::Ingestion { line: line_no, message: e.to_string() })?;
        let p = Path::new(fields[0]);
        let path = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        out.push((line_no, ManifestEntry { path, landmarks }));
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!("manifest {} lists no images", manifest.display())));
    }
    Ok(out)
}

/// Loads a manifest; identity = name of each image's parent directory.
///
/// Without a `shape_model`, one is fitted on the manifest's landmarks and
/// calibrated so the largest `|code|` is `code_extent`.
pub fn load_directory(
    manifest: &Path,
    shape_model: Option<ShapeModel>,
    image_size: usize,
    code_extent: f64,
) -> Result<Dataset> {
    let entries: Vec<(usize, ManifestEntry)> = read_manifest(manifest)?;
    let shape_model = match shape_model {
        Some(m) => m,
        None => fit_on(&entries, code_extent)?,
    };
    let yaws = read_yaws(manifest);
    ingest(&entries, shape_model, &yaws, image_size)
}

fn fit_on(entries: &[(usize, ManifestEntry)], code_extent: f64) -> Result<ShapeModel> {
    let shapes: Vec<LandmarkShape> = entries.iter().map(|(_, e)| e.landmarks).collect();
    let mut m = ShapeModel::fit(&shapes)?;
    m.calibrate_extent(&shapes, code_extent)?;
    Ok(m)
}

fn identity_of(p: &Path) -> String {
    p.parent().and_then(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn ingest(
    entries: &[(usize, ManifestEntry)],
    shape_model: ShapeModel,
    yaws: &BTreeMap<PathBuf, f64>,
    image_size: usize,
) -> Result<Dataset> {
    let mut names: Vec<String> = entries.iter().map(|(_, e)| identity_of(&e.path)).collect();
    names.sort();
    names.dedup();
    let mut samples = Vec::with_capacity(entries.len());
    for (line, e) in entries {
        let fail = |message: String| Error::Ingestion { line: *line, message };
        let img = RgbImage::read(&e.path).map_err(|err| fail(err.to_string()))?;
        if img.width() != img.height() {
            return Err(fail(format!("image {} is not square", e.path.display())));
        }
        let code = shape_model.pose_code(&e.landmarks).map_err(|err| fail(err.to_string()))?;
        let id = names.binary_search(&identity_of(&e.path)).unwrap();
        let yaw = yaws.get(&e.path).copied();
        samples.push(
            FaceSample::new(preprocess(&img), id, names.len(), e.landmarks, code.0, yaw)
                .map_err(|err| fail(err.to_string()))?,
        );
    }
    Dataset::new(samples, names, shape_model, image_size)
}

/// Loads a directory written by [`Dataset::write_directory`]: every
/// `<split>.txt` manifest becomes a split over the union of their images,
/// and `shapemodel.ckpt` is used when present (otherwise a model is fitted
/// on `train.txt`, or on every image without one).
pub fn load_split_directory(dir: &Path, image_size: usize, code_extent: f64) -> Result<Dataset> {
    let mut manifests: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    manifests.sort();
    if manifests.is_empty() {
        return Err(Error::EmptyDataset(format!("no split manifests in {}", dir.display())));
    }
    let mut entries: Vec<(usize, ManifestEntry)> = Vec::new();
    let mut position: BTreeMap<PathBuf, usize> = BTreeMap::new();
    let mut splits: Vec<(String, Vec<usize>)> = Vec::new();
    let mut train_entries = Vec::new();
    for m in &manifests {
        let name = m.file_stem().unwrap().to_string_lossy().into_owned();
        let list = read_manifest(m).map_err(|e| match e {
            Error::Ingestion { line, message } => {
                Error::Ingestion { line, message: format!("{}: {message}", m.display()) }
            }
            other => other,
        })?;
        let mut idx = Vec::with_capacity(list.len());
        for (line, e) in list {
            if name == TRAIN {
                train_entries.push((line, e.clone()));
            }
            let i = *position.entry(e.path.clone()).or_insert_with(|| {
                entries.push((line, e));
                entries.len() - 1
            });
            idx.push(i);
        }
        splits.push((name, idx));
    }
    let model_path = dir.join("shapemodel.ckpt");
    let shape_model = if model_path.exists() {
        ShapeModel::from_archive(&crate::archive::Archive::load(&model_path)?)?
    } else if !train_entries.is_empty() {
        fit_on(&train_entries, code_extent)?
    } else {
        fit_on(&entries, code_extent)?
    };
    let yaws = read_yaws(&dir.join("manifest"));
    let mut ds = ingest(&entries, shape_model, &yaws, image_size)?;
    for (name, idx) in splits {
        ds.set_split(&name, idx)?;
    }
    Ok(ds)
}

/// Optional `yaw.csv` next to the manifest.
fn read_yaws(manifest: &Path) -> BTreeMap<PathBuf, f64> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let Ok(text) = std::fs::read_to_string(base.join("yaw.csv")) else {
        return BTreeMap::new();
    };
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let (p, y) = l.rsplit_once(',')?;
            Some((base.join(p.trim()), y.trim().parse().ok()?))
        })
        .collect()
}

/// Renders a synthetic dataset with `train`, `eval`, `gallery` and `probe`
/// splits. Training yaws are uniform over the configured range; evaluation
/// renders sit at evenly spaced yaws with fresh noise. The shape model is
/// fitted on the training landmarks.
pub fn generate_synthetic(config: &SyntheticFaceConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let geometry = RngStream::new(config.geometry_seed);
    let identities: Vec<synthetic::Identity> =
        (0..config.identities).map(|i| synthetic::Identity::sample(&mut geometry.derive(i as u64))).collect();
    let root = RngStream::new(seed);
    let mut yaw_rng = root.derive(0);
    let noise_root = root.derive(1);

    let mut plan: Vec<(usize, f64)> = Vec::new();
    for id in 0..config.identities {
        for _ in 0..config.train_per_identity {
            plan.push((id, yaw_rng.uniform(-config.max_yaw_degrees, config.max_yaw_degrees)));
        }
    }
    let n_train = plan.len();
    for id in 0..config.identities {
        for &yaw in &config.eval_yaws() {
            for _ in 0..config.eval_repeats {
                plan.push((id, yaw));
            }
        }
    }

    let size = config.source_size;
    let shapes: Vec<LandmarkShape> =
        plan.iter().map(|&(id, yaw)| synthetic::landmarks(&identities[id], yaw, size)).collect();
    let mut model = ShapeModel::fit(&shapes[..n_train])?;
    model.calibrate_extent(&shapes[..n_train], config.code_extent)?;

    let mut samples = Vec::with_capacity(plan.len());
    for (n, (&(id, yaw), shape)) in plan.iter().zip(&shapes).enumerate() {
        let img = synthetic::render(&identities[id], yaw, size, config.noise, &mut noise_root.derive(n as u64));
        let code = model.pose_code(shape)?.0;
        samples.push(FaceSample::new(preprocess(&img), id, config.identities, *shape, code, Some(yaw))?);
    }
    let names = (0..config.identities).map(|i| format!("id_{i:03}")).collect();
    let mut ds = Dataset::new(samples, names, model, config.image_size)?;
    ds.set_split(TRAIN, (0..n_train).collect())?;
    let eval: Vec<usize> = (n_train..plan.len()).collect();
    let (gallery, probes) = ds.identification_split(&eval);
    ds.set_split(EVAL, eval)?;
    ds.set_split(GALLERY, gallery)?;
    ds.set_split(PROBE, probes)?;
    Ok(ds)
}

/// Deterministic mini-batch order: each epoch is a fresh seeded permutation
/// of the split and the short tail batch is dropped. Batch `t` is a pure
/// function of `(seed, t)`, so a resumed run sees the same batches.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    indices: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl BatchSchedule {
    pub fn new(indices: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
        }
        if batch_size > indices.len() {
            return Err(Error::Config(format!(
                "batch size {batch_size} exceeds the {} available samples",
                indices.len()
            )));
        }
        Ok(BatchSchedule { indices, batch_size, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.indices.len() / self.batch_size
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut order = self.indices.clone();
        RngStream::new(self.seed).derive(epoch).shuffle(&mut order);
        order.chunks_exact(self.batch_size).map(|c| c.to_vec()).collect()
    }

    pub fn batch(&self, step: u64) -> Vec<usize> {
        let per = self.batches_per_epoch() as u64;
        let mut e = self.epoch(step / per);
        e.swap_remove((step % per) as usize)
    }

    /// Endless iterator over batches starting at `step`.
    pub fn iter_from(&self, step: u64) -> impl Iterator<Item = Vec<usize>> + '_ {
        (step..).map(move |t| self.batch(t))
    }
}

/// Deterministic batch iterator over a dataset split.
pub fn batch_iter(dataset: &Dataset, split: &str, batch_size: usize, seed: u64) -> Result<BatchSchedule> {
    BatchSchedule::new(dataset.split(split)?.to_vec(), batch_size, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SyntheticFaceConfig {
        SyntheticFaceConfig { identities: 4, train_per_identity: 6, eval_repeats: 1, ..Default::default() }
    }

    #[test]
    fn splits_and_gallery() {
        let ds = generate_synthetic(&small_config(), 3).unwrap();
        assert_eq!(ds.split(TRAIN).unwrap().len(), 24);
        assert_eq!(ds.split(EVAL).unwrap().len(), 36);
        let gallery = ds.split(GALLERY).unwrap();
        assert_eq!(gallery.len(), 4);
        let mut ids: Vec<usize> = gallery.iter().map(|&i| ds.samples[i].identity).collect();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        for &g in gallery {
            assert!(ds.samples[g].yaw_degrees.unwrap().abs() <= 15.0);
            assert!(!ds.split(PROBE).unwrap().contains(&g));
        }
        let (lo, hi) = ds.pose_range(TRAIN).unwrap();
        assert!((lo.abs().max(hi.abs()) - 17.0).abs() < 1e-9);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_config(), 11).unwrap();
        let b = generate_synthetic(&small_config(), 11).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn empty_and_bad_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.txt");
        std::fs::write(&m, "# nothing\n\n").unwrap();
        assert!(matches!(load_directory(&m, None, 32, 17.0), Err(Error::EmptyDataset(_))));
        let good = "a/1.ppm,1,2,3,4,5,6,7,8,9,10";
        std::fs::write(&m, format!("{good}\n{good}\na/2.ppm,1,2,3\n")).unwrap();
        match read_manifest(&m) {
            Err(Error::Ingestion { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn directory_round_trip() {
        let ds = generate_synthetic(&small_config(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_directory(dir.path()).unwrap();
        let model = ShapeModel::from_archive(&crate::archive::Archive::load(&dir.path().join("shapemodel.ckpt")).unwrap())
            .unwrap();
        let back = load_directory(&dir.path().join("train.txt"), Some(model), 32, 17.0).unwrap();
        let train = ds.split(TRAIN).unwrap();
        assert_eq!(back.len(), train.len());
        for (b, &i) in back.samples.iter().zip(train) {
            let a = &ds.samples[i];
            assert_eq!(b.image, a.image);
            assert_eq!(b.identity, a.identity);
            assert_eq!(b.landmarks, a.landmarks);
            assert_eq!(b.pose_code, a.pose_code);
            assert_eq!(b.yaw_degrees, a.yaw_degrees);
        }
    }

    #[test]
    fn split_directory_round_trip() {
        let ds = generate_synthetic(&small_config(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_directory(dir.path()).unwrap();
        let back = load_split_directory(dir.path(), 32, 17.0).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.identity_names, ds.identity_names);
        assert_eq!(back.shape_model, ds.shape_model);
        for name in [TRAIN, EVAL, GALLERY, PROBE] {
            let a: Vec<&FaceSample> = ds.split(name).unwrap().iter().map(|&i| &ds.samples[i]).collect();
            let b: Vec<&FaceSample> = back.split(name).unwrap().iter().map(|&i| &back.samples[i]).collect();
            assert_eq!(a, b, "{name}");
        }
        std::fs::write(dir.path().join("gallery.txt"), "").unwrap();
        assert!(matches!(load_split_directory(dir.path(), 32, 17.0), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn batch_schedule_contract() {
        assert!(BatchSchedule::new((0..10).collect(), 1, 0).is_err());
        assert!(BatchSchedule::new((0..3).collect(), 4, 0).is_err());
        let s = BatchSchedule::new((0..23).collect(), 5, 42).unwrap();
        let epoch = s.epoch(0);
        assert_eq!(epoch.len(), 4);
        let mut seen: Vec<usize> = epoch.concat();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 20);
        assert_eq!(s.batch(1), epoch[1]);
        assert_eq!(s.batch(4), s.epoch(1)[0]);
        let again = BatchSchedule::new((0..23).collect(), 5, 42).unwrap();
        assert_eq!(again.iter_from(0).take(9).collect::<Vec<_>>(), s.iter_from(0).take(9).collect::<Vec<_>>());
        let firsts: Vec<Vec<usize>> =
            (0..10).map(|seed| BatchSchedule::new((0..23).collect(), 5, seed).unwrap().batch(0)).collect();
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(firsts[i], firsts[j]);
            }
        }
    }

    #[test]
    fn batch_assembly() {
        let ds = generate_synthetic(&small_config(), 5).unwrap();
        let b = ds.batch(&[0, 7, 9], Crop::Centre).unwrap();
        assert_eq!(b.images.shape(), &[3, 3, 32, 32]);
        assert_eq!(b.identities, vec![0, 1, 1]);
    }
}
