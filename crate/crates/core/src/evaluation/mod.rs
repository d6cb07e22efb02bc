//! Identity embeddings, rank-1 identification, k-fold verification, FID,
//! pose sweeps judged by an independent pose oracle, and the ablation
//! harness.

mod fid;
mod metrics;
mod oracle;
mod report;

pub use fid::{fid, frechet_distance, FidReport, FidStats, PixelPca, DEFAULT_FEATURE_DIM, PCA_FEATURES};
pub use metrics::{
    best_threshold, cosine_similarity, nearest, pearson, rank1_identification, spearman, verification_accuracy,
    BinAccuracy, Pair, PoseBins, Rank1Report, VerificationProtocol, VerificationReport,
};
pub use oracle::{OracleConfig, PoseOracle};
pub use report::{image_grid, write_ablation_csv, write_json, write_rank1_csv, write_verification_csv};

use serde::{Deserialize, Serialize};

use crate::data::{Crop, Dataset, GALLERY, PROBE};
use crate::error::{Error, Result};
use crate::losses::{LossReport, TermWeights};
use crate::networks::{ArchConfig, Generator, Mode};
use crate::numerics::{Graph, Tensor};
use crate::training::{train, TrainConfig, TrainOutputs, TrainingState};

/// Number of equal-width pose-code classes used for binning results and for
/// the pose-classification ablation.
pub const POSE_CLASSES: usize = 9;

const CHUNK: usize = 64;

/// `G_enc` embeddings (eval-mode batch norm) of `[N,3,S,S]` images.
pub fn embed_images(gen: &Generator<f32>, images: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
    let n = images.shape().first().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let items: Vec<Tensor<f32>> =
            (start..(start + CHUNK).min(n)).map(|i| images.batch_item(i)).collect::<Result<_>>()?;
        let mut g = Graph::new();
        let vars = gen.params.bind(&mut g, false);
        let x = g.constant(Tensor::stack(&items)?);
        let (e, _) = gen.encode(&mut g, &vars, x, Mode::Eval)?;
        let d = gen.arch.feature_dim;
        out.extend(g.value(e).data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()));
    }
    Ok(out)
}

/// One `N^f` embedding per sample, centre-cropped.
pub fn extract_features(gen: &Generator<f32>, dataset: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    if dataset.image_size != gen.arch.image_size {
        return Err(Error::dim(format!(
            "dataset crops are {} pixels but the generator expects {}",
            dataset.image_size, gen.arch.image_size
        )));
    }
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(CHUNK) {
        out.extend(embed_images(gen, &dataset.batch(chunk, Crop::Centre)?.images)?);
    }
    Ok(out)
}

/// `G_dec(G_enc(x), c, z)` in eval mode for `[N,3,S,S]` inputs, `N` codes
/// and `[N,N^z]` noise.
pub fn synthesize(gen: &Generator<f32>, images: &Tensor<f32>, codes: &[f64], z: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = codes.len();
    if images.shape().first() != Some(&n) || z.shape() != [n, gen.arch.noise_dim] {
        return Err(Error::dim(format!(
            "synthesize: {n} codes with images {:?} and noise {:?}",
            images.shape(),
            z.shape()
        )));
    }
    let mut g = Graph::new();
    let vars = gen.params.bind(&mut g, false);
    let x = g.constant(images.clone());
    let c = g.constant(Tensor::from_f64(&[n, 1], codes)?);
    let zv = g.constant(z.clone());
    let out = gen.forward(&mut g, &vars, x, c, zv, Mode::Eval)?;
    Ok(g.value(out.images).clone())
}

/// `steps` evenly spaced codes from `lo` to `hi` inclusive.
pub fn code_grid(lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 || !(lo.is_finite() && hi.is_finite()) || (steps > 1 && lo >= hi) {
        return Err(Error::Argument(format!("bad code grid {lo}..{hi} with {steps} steps")));
    }
    if steps == 1 {
        return Ok(vec![0.5 * (lo + hi)]);
    }
    Ok((0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSweep {
    pub codes: Vec<f64>,
    /// `[K,3,S,S]`, one synthesis per code.
    pub images: Tensor<f32>,
    pub oracle_yaw: Option<Vec<f64>>,
    /// Spearman correlation of requested codes and oracle estimates.
    pub spearman: Option<f64>,
}

/// Synthesises one input across a monotone code grid with fixed noise.
pub fn pose_sweep(
    gen: &Generator<f32>,
    image: &Tensor<f32>,
    codes: &[f64],
    z: &[f32],
    oracle: Option<&PoseOracle>,
) -> Result<PoseSweep> {
    if codes.is_empty() || codes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument("pose sweep needs a non-empty, strictly increasing code grid".into()));
    }
    let s = gen.arch.image_size;
    let x = image.clone().reshape(&[1, 3, s, s])?;
    let k = codes.len();
    let xs = Tensor::stack(&vec![x; k])?;
    let zs = Tensor::stack(&vec![Tensor::new(&[1, z.len()], z.to_vec())?; k])?;
    let images = synthesize(gen, &xs, codes, &zs)?;
    let oracle_yaw = oracle.map(|o| o.predict(&images)).transpose()?;
    let spearman = match &oracle_yaw {
        Some(y) if k > 1 => Some(spearman(codes, y).unwrap_or(0.0)),
        _ => None,
    };
    Ok(PoseSweep { codes: codes.to_vec(), images, oracle_yaw, spearman })
}

/// Rank-1 over the dataset's gallery and probe splits, binned by pose code.
pub fn evaluate_rank1(gen: &Generator<f32>, dataset: &Dataset, bins: PoseBins) -> Result<Rank1Report> {
    let gallery_idx = dataset.split(GALLERY)?;
    let probe_idx = dataset.split(PROBE)?;
    let ge = extract_features(gen, dataset, gallery_idx)?;
    let pe = extract_features(gen, dataset, probe_idx)?;
    let gallery: Vec<(usize, Vec<f64>)> =
        gallery_idx.iter().zip(ge).map(|(&i, e)| (dataset.samples[i].identity, e)).collect();
    let probes: Vec<(usize, Vec<f64>, f64)> = probe_idx
        .iter()
        .zip(pe)
        .map(|(&i, e)| (dataset.samples[i].identity, e, dataset.samples[i].pose_code))
        .collect();
    rank1_identification(&gallery, &probes, bins)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    Full,
    #[serde(rename = "minus-dc")]
    MinusPose,
    #[serde(rename = "minus-dr")]
    MinusReconstruction,
    #[serde(rename = "minus-da")]
    MinusAdversarial,
    PoseClassification,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::MinusPose,
        AblationVariant::MinusReconstruction,
        AblationVariant::MinusAdversarial,
        AblationVariant::PoseClassification,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::MinusPose => "minus-dc",
            AblationVariant::MinusReconstruction => "minus-dr",
            AblationVariant::MinusAdversarial => "minus-da",
            AblationVariant::PoseClassification => "pose-classification",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown ablation variant '{s}'")))
    }

    /// The training configuration of this variant; "minus" variants zero
    /// the term's weight on both sides.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let zero = |f: fn(&mut TermWeights) -> &mut f64, c: &mut TrainConfig| {
            *f(&mut c.weights.discriminator) = 0.0;
            *f(&mut c.weights.generator) = 0.0;
        };
        match self {
            AblationVariant::Full => {}
            AblationVariant::MinusPose => zero(|w| &mut w.pose, &mut c),
            AblationVariant::MinusReconstruction => zero(|w| &mut w.pixel, &mut c),
            AblationVariant::MinusAdversarial => zero(|w| &mut w.adversarial, &mut c),
            AblationVariant::PoseClassification => c.pose_classes = Some(POSE_CLASSES),
        }
        c
    }
}

/// Bins over the symmetric training code range of a state.
pub fn state_bins(state: &TrainingState) -> Result<PoseBins> {
    PoseBins::new(state.pose_extent(), POSE_CLASSES)
}

pub struct VariantRun {
    pub variant: AblationVariant,
    pub state: TrainingState,
    pub reports: Vec<LossReport>,
    pub rank1: Rank1Report,
}

impl VariantRun {
    pub fn all_finite(&self) -> bool {
        self.reports.iter().all(|r| r.non_finite_term().is_none())
    }
}

pub fn run_variant(
    arch: &ArchConfig,
    base: &TrainConfig,
    dataset: &Dataset,
    variant: AblationVariant,
    outputs: &TrainOutputs,
) -> Result<VariantRun> {
    let config = variant.apply(base);
    let (state, reports) = train(arch, &config, dataset, outputs)?;
    let rank1 = evaluate_rank1(&state.generator, dataset, state_bins(&state)?)?;
    Ok(VariantRun { variant, state, reports, rank1 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub rank1: Rank1Report,
    pub steps: usize,
    pub finite: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn from_runs(runs: &[VariantRun]) -> Self {
        let rows = runs
            .iter()
            .map(|r| AblationRow { variant: r.variant, rank1: r.rank1.clone(), steps: r.reports.len(), finite: r.all_finite() })
            .collect();
        AblationTable { rows }
    }

    pub fn average(&self, variant: AblationVariant) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| r.rank1.average)
    }

    /// Plain-text grid: one row per variant, one column per pose bin.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let Some(first) = self.rows.first() else { return s };
        s.push_str(&format!("{:<22}", "variant"));
        for b in &first.rank1.bins {
            s.push_str(&format!("{:>14}", format!("|c| {:.1}-{:.1}", b.code_min, b.code_max)));
        }
        s.push_str(&format!("{:>10}\n", "average"));
        for r in &self.rows {
            s.push_str(&format!("{:<22}", r.variant.name()));
            for b in &r.rank1.bins {
                match b.accuracy {
                    Some(a) => s.push_str(&format!("{:>13.2}%", 100.0 * a)),
                    None => s.push_str(&format!("{:>14}", "-")),
                }
            }
            s.push_str(&format!("{:>9.2}%\n", 100.0 * r.rank1.average));
        }
        s
    }
}

/// Trains every requested variant with the same seed and budget.
pub fn run_ablation(
    arch: &ArchConfig,
    base: &TrainConfig,
    dataset: &Dataset,
    variants: &[AblationVariant],
) -> Result<Vec<VariantRun>> {
    variants.iter().map(|&v| run_variant(arch, base, dataset, v, &TrainOutputs::default())).collect()
}
