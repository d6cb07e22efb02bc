use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{decode_f64, encode_f64, Archive};
use crate::data::{augment_crop, Dataset, EVAL, TRAIN};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Graph, RngStream, Tensor, Var};

/// Conv widths of the regressor; every layer halves the spatial size.
const WIDTHS: [usize; 3] = [16, 32, 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Required held-out MAE as a fraction of the yaw range.
    pub max_error_fraction: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { steps: 1500, batch_size: 32, learning_rate: 1e-3, seed: 99, max_error_fraction: 0.1 }
    }
}

/// Small conv regressor from a face image to its yaw in degrees, trained
/// on ground-truth yaws and never on the discriminator's pose head.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseOracle {
    pub image_size: usize,
    /// Half the training yaw range; the network predicts `yaw / scale`.
    pub scale: f64,
    pub weights: Vec<Tensor<f32>>,
    pub train_mae: f64,
    pub held_out_mae: f64,
    pub yaw_range: f64,
}

fn flip_horizontal(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let w = s[s.len() - 1];
    let mut out = t.clone();
    for (row_in, row_out) in t.data().chunks(w).zip(out.data_mut().chunks_mut(w)) {
        for x in 0..w {
            row_out[x] = row_in[w - 1 - x];
        }
    }
    out
}

fn labelled(ds: &Dataset, split: &str) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for &i in ds.split(split)? {
        let yaw = ds.samples[i]
            .yaw_degrees
            .ok_or_else(|| Error::Argument(format!("sample {i} has no ground-truth yaw")))?;
        out.push((i, yaw));
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!("split '{split}' is empty")));
    }
    Ok(out)
}

impl PoseOracle {
    fn init(image_size: usize, rng: &mut RngStream) -> Result<Self> {
        if image_size % 8 != 0 || image_size == 0 {
            return Err(Error::Config(format!("oracle needs an image size divisible by 8, got {image_size}")));
        }
        let mut weights = Vec::new();
        let mut cin = 3;
        for &w in &WIDTHS {
            let fan_in = (cin * 16) as f64;
            weights.push(Tensor::randn(&[w, cin, 4, 4], (2.0 / fan_in).sqrt(), rng));
            weights.push(Tensor::zeros(&[w]));
            cin = w;
        }
        let flat = cin * (image_size / 8) * (image_size / 8);
        weights.push(Tensor::randn(&[1, flat], (1.0 / flat as f64).sqrt(), rng));
        weights.push(Tensor::zeros(&[1]));
        Ok(PoseOracle { image_size, scale: 1.0, weights, train_mae: f64::NAN, held_out_mae: f64::NAN, yaw_range: 0.0 })
    }

    fn forward(&self, g: &mut Graph<f32>, vars: &[Var], x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let mut h = x;
        for l in 0..WIDTHS.len() {
            h = g.conv2d(h, vars[2 * l], 2, 1)?;
            h = g.channel_bias(h, vars[2 * l + 1])?;
            h = g.elu(h, 1.0)?;
        }
        let flat = g.value(h).len() / n;
        h = g.reshape(h, &[n, flat])?;
        let k = 2 * WIDTHS.len();
        let y = g.linear(h, vars[k], Some(vars[k + 1]))?;
        g.reshape(y, &[n])
    }

    /// Yaw estimates in degrees for `[N,3,S,S]` images.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<f64>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.image_size || s[3] != self.image_size {
            return Err(Error::dim(format!("oracle expects [N,3,{0},{0}] images, got {s:?}", self.image_size)));
        }
        let mut out = Vec::with_capacity(s[0]);
        for start in (0..s[0]).step_by(64) {
            let items: Vec<Tensor<f32>> =
                (start..(start + 64).min(s[0])).map(|i| images.batch_item(i)).collect::<Result<_>>()?;
            let mut g = Graph::new();
            let vars: Vec<Var> = self.weights.iter().map(|w| g.constant(w.clone())).collect();
            let x = g.constant(Tensor::stack(&items)?);
            let y = self.forward(&mut g, &vars, x)?;
            out.extend(g.value(y).data().iter().map(|&v| v as f64 * self.scale));
        }
        Ok(out)
    }

    pub fn mean_absolute_error(&self, images: &Tensor<f32>, yaws: &[f64]) -> Result<f64> {
        let p = self.predict(images)?;
        Ok(p.iter().zip(yaws).map(|(a, b)| (a - b).abs()).sum::<f64>() / yaws.len() as f64)
    }

    /// Trains on the `train` split (random crops, random mirroring with the
    /// yaw negated) and qualifies on the centre-cropped `eval` split.
    pub fn train(ds: &Dataset, config: &OracleConfig) -> Result<Self> {
        if config.batch_size == 0 || config.steps == 0 {
            return Err(Error::Config("oracle needs a positive batch size and step count".into()));
        }
        let train = labelled(ds, TRAIN)?;
        let held = labelled(ds, EVAL)?;
        let lo = train.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
        let hi = train.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if !(range > 0.0) {
            return Err(Error::Argument("oracle training yaws span no range".into()));
        }
        let root = RngStream::new(config.seed);
        let mut oracle = PoseOracle::init(ds.image_size, &mut root.derive(0))?;
        oracle.scale = 0.5 * range;
        oracle.yaw_range = range;
        let mut rng = root.derive(1);
        let adam = AdamConfig { learning_rate: config.learning_rate, beta1: 0.9, ..AdamConfig::default() };
        adam.validate()?;
        let mut opt = AdamState::new(adam, &oracle.weights.iter().collect::<Vec<_>>());

        for _ in 0..config.steps {
            let mut imgs = Vec::with_capacity(config.batch_size);
            let mut target = Vec::with_capacity(config.batch_size);
            for _ in 0..config.batch_size {
                let (i, yaw) = train[rng.below(train.len())];
                let (c, _) = augment_crop(&ds.samples[i].image, ds.image_size, Some(&mut rng))?;
                let flip = rng.below(2) == 1;
                let c = if flip { flip_horizontal(&c) } else { c };
                imgs.push(c.reshape(&[1, 3, ds.image_size, ds.image_size])?);
                target.push(if flip { -yaw } else { yaw } / oracle.scale);
            }
            let mut g = Graph::new();
            let vars: Vec<Var> = oracle.weights.iter().map(|w| g.param(w.clone())).collect();
            let x = g.constant(Tensor::stack(&imgs)?);
            let t = g.constant(Tensor::from_f64(&[target.len()], &target)?);
            let y = oracle.forward(&mut g, &vars, x)?;
            let d = g.sub(y, t)?;
            let sq = g.square(d)?;
            let loss = g.mean(sq)?;
            let grads = g.backward(loss)?;
            let gr: Vec<Tensor<f32>> = vars
                .iter()
                .zip(&oracle.weights)
                .map(|(&v, w)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(w.shape())))
                .collect();
            let mut params: Vec<&mut Tensor<f32>> = oracle.weights.iter_mut().collect();
            opt.step(&mut params, &gr.iter().collect::<Vec<_>>())?;
        }

        let eval = |set: &[(usize, f64)]| -> Result<f64> {
            let idx: Vec<usize> = set.iter().map(|s| s.0).collect();
            let yaws: Vec<f64> = set.iter().map(|s| s.1).collect();
            oracle.mean_absolute_error(&ds.batch(&idx, crate::data::Crop::Centre)?.images, &yaws)
        };
        let train_mae = eval(&train)?;
        let held_out_mae = eval(&held)?;
        oracle.train_mae = train_mae;
        oracle.held_out_mae = held_out_mae;
        let bound = config.max_error_fraction * range;
        if !(held_out_mae < bound) {
            return Err(Error::OracleUnfit(format!(
                "held-out MAE {held_out_mae:.2} degrees exceeds {bound:.2} ({}% of the {range:.0} degree range)",
                config.max_error_fraction * 100.0
            )));
        }
        Ok(oracle)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        let meta = [self.image_size as f64, self.scale, self.train_mae, self.held_out_mae, self.yaw_range];
        let enc = encode_f64(&meta);
        a.push("oracle/meta", Tensor::new(&[enc.len()], enc).expect("finite limbs"));
        for (i, w) in self.weights.iter().enumerate() {
            a.push(format!("oracle/w{i}"), w.clone());
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let meta = decode_f64(a.get("oracle/meta")?.data())?;
        if meta.len() != 5 {
            return Err(Error::Checkpoint("oracle metadata has the wrong length".into()));
        }
        let mut o = PoseOracle::init(meta[0] as usize, &mut RngStream::new(0))?;
        for (i, w) in o.weights.iter_mut().enumerate() {
            let src = a.get(&format!("oracle/w{i}"))?;
            if src.shape() != w.shape() {
                return Err(Error::Checkpoint(format!("oracle weight {i} has the wrong shape")));
            }
            *w = src.clone();
        }
        o.scale = meta[1];
        o.train_mae = meta[2];
        o.held_out_mae = meta[3];
        o.yaw_range = meta[4];
        Ok(o)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}
