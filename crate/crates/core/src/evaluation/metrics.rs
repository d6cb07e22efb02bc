use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::pose_class;
use crate::numerics::RngStream;

/// `<u,v> / (|u| |v|)`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim(format!("cosine of vectors of length {} and {}", u.len(), v.len())));
    }
    let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::numeric("cosine similarity of a zero vector"));
    }
    Ok((uv / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Argument("spearman needs two equal-length series of at least 2 values".into()));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    pearson(&ra, &rb)
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::numeric("correlation of a constant series"));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Folds `classes` equal-width code bins over `[-extent, extent]` into
/// `classes / 2 + 1` columns by distance from the centre bin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PoseBins {
    pub extent: f64,
    pub classes: usize,
}

impl PoseBins {
    pub fn new(extent: f64, classes: usize) -> Result<Self> {
        if !(extent > 0.0) || classes == 0 || classes % 2 == 0 {
            return Err(Error::Argument("pose bins need a positive extent and an odd class count".into()));
        }
        Ok(PoseBins { extent, classes })
    }

    pub fn columns(&self) -> usize {
        self.classes / 2 + 1
    }

    pub fn column(&self, code: f64) -> usize {
        pose_class(code, self.extent, self.classes).abs_diff(self.classes / 2)
    }

    /// `|code|` interval covered by a column.
    pub fn column_range(&self, col: usize) -> (f64, f64) {
        let w = 2.0 * self.extent / self.classes as f64;
        let lo = if col == 0 { 0.0 } else { (col as f64 - 0.5) * w };
        let hi = if col + 1 == self.columns() { self.extent } else { (col as f64 + 0.5) * w };
        (lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinAccuracy {
    pub column: usize,
    pub code_min: f64,
    pub code_max: f64,
    pub correct: usize,
    pub total: usize,
    /// `None` when the bin has no probes.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Rank1Report {
    pub bins: Vec<BinAccuracy>,
    /// Accuracy over all probes.
    pub average: f64,
    pub probes: usize,
}

/// Nearest gallery entry by cosine similarity; the lowest index wins ties.
pub fn nearest(gallery: &[Vec<f64>], probe: &[f64]) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, g) in gallery.iter().enumerate() {
        let s = cosine_similarity(g, probe)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

/// Rank-1 identification of probes `(identity, embedding, pose code)`
/// against a gallery with exactly one embedding per identity.
pub fn rank1_identification(
    gallery: &[(usize, Vec<f64>)],
    probes: &[(usize, Vec<f64>, f64)],
    bins: PoseBins,
) -> Result<Rank1Report> {
    if gallery.is_empty() || probes.is_empty() {
        return Err(Error::Protocol("rank-1 needs a non-empty gallery and probe set".into()));
    }
    let mut ids: Vec<usize> = gallery.iter().map(|g| g.0).collect();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Protocol("gallery holds more than one entry for an identity".into()));
    }
    if let Some(p) = probes.iter().find(|p| ids.binary_search(&p.0).is_err()) {
        return Err(Error::Protocol(format!("probe identity {} has no gallery entry", p.0)));
    }
    let emb: Vec<Vec<f64>> = gallery.iter().map(|g| g.1.clone()).collect();
    let mut correct = vec![0usize; bins.columns()];
    let mut total = vec![0usize; bins.columns()];
    for (id, e, code) in probes {
        let col = bins.column(*code);
        total[col] += 1;
        if gallery[nearest(&emb, e)?].0 == *id {
            correct[col] += 1;
        }
    }
    let all: usize = correct.iter().sum();
    let bins_out = (0..bins.columns())
        .map(|c| {
            let (lo, hi) = bins.column_range(c);
            BinAccuracy {
                column: c,
                code_min: lo,
                code_max: hi,
                correct: correct[c],
                total: total[c],
                accuracy: (total[c] > 0).then(|| correct[c] as f64 / total[c] as f64),
            }
        })
        .collect();
    Ok(Rank1Report { bins: bins_out, average: all as f64 / probes.len() as f64, probes: probes.len() })
}

/// One embedding pair of a verification fold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub matched: bool,
}

/// Folds of class-balanced pairs, disjoint by pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationProtocol {
    pub folds: Vec<Vec<Pair>>,
}

impl VerificationProtocol {
    /// Samples `pairs_per_class` matched and as many non-matched pairs per
    /// fold from the identity labels of an embedding set.
    pub fn sample(identities: &[usize], folds: usize, pairs_per_class: usize, rng: &mut RngStream) -> Result<Self> {
        if folds < 2 || pairs_per_class == 0 {
            return Err(Error::Protocol("need at least 2 folds and 1 pair per class".into()));
        }
        let n = identities.len();
        let has_match = (0..n).any(|i| (0..n).any(|j| i != j && identities[i] == identities[j]));
        let has_other = identities.iter().any(|&x| x != identities[0]);
        if !has_match || !has_other {
            return Err(Error::Protocol("labels admit no matched or no non-matched pairs".into()));
        }
        let mut used = std::collections::BTreeSet::new();
        let want = folds * pairs_per_class;
        let mut draw = |matched: bool, rng: &mut RngStream| -> Result<Vec<Pair>> {
            let mut out = Vec::with_capacity(want);
            let mut attempts = 0usize;
            while out.len() < want {
                attempts += 1;
                if attempts > 1000 * want + 10_000 {
                    return Err(Error::Protocol("not enough distinct pairs for the requested folds".into()));
                }
                let (a, b) = (rng.below(n), rng.below(n));
                if a == b || (identities[a] == identities[b]) != matched {
                    continue;
                }
                let key = (a.min(b), a.max(b));
                if used.insert(key) {
                    out.push(Pair { a: key.0, b: key.1, matched });
                }
            }
            Ok(out)
        };
        let pos = draw(true, rng)?;
        let neg = draw(false, rng)?;
        let folds = (0..folds)
            .map(|f| {
                let r = f * pairs_per_class..(f + 1) * pairs_per_class;
                pos[r.clone()].iter().chain(&neg[r]).copied().collect()
            })
            .collect();
        Ok(VerificationProtocol { folds })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationReport {
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
    pub fold_accuracy: Vec<f64>,
    pub thresholds: Vec<f64>,
}

fn accuracy_at(scored: &[(f64, bool)], threshold: f64) -> f64 {
    let ok = scored.iter().filter(|(s, m)| (*s >= threshold) == *m).count();
    ok as f64 / scored.len() as f64
}

/// Threshold maximising accuracy on `scored`; candidates are midpoints
/// between consecutive distinct scores plus both ends. The smallest
/// threshold wins ties.
pub fn best_threshold(scored: &[(f64, bool)]) -> f64 {
    let mut s: Vec<f64> = scored.iter().map(|x| x.0).collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut candidates = vec![s[0] - 1.0];
    candidates.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(s[s.len() - 1] + 1.0);
    let mut best = (candidates[0], f64::NEG_INFINITY);
    for t in candidates {
        let a = accuracy_at(scored, t);
        if a > best.1 {
            best = (t, a);
        }
    }
    best.0
}

/// Per fold, picks the cosine threshold on the other folds and scores the
/// held-out fold.
pub fn verification_accuracy(protocol: &VerificationProtocol, embeddings: &[Vec<f64>]) -> Result<VerificationReport> {
    if protocol.folds.len() < 2 {
        return Err(Error::Protocol("verification needs at least 2 folds".into()));
    }
    let mut scored = Vec::with_capacity(protocol.folds.len());
    for (f, fold) in protocol.folds.iter().enumerate() {
        if fold.is_empty() {
            return Err(Error::Protocol(format!("fold {f} is empty")));
        }
        let mut s = Vec::with_capacity(fold.len());
        for p in fold {
            let (a, b) = (embeddings.get(p.a), embeddings.get(p.b));
            let (a, b) = a.zip(b).ok_or_else(|| Error::Protocol(format!("pair ({}, {}) references a missing embedding", p.a, p.b)))?;
            s.push((cosine_similarity(a, b)?, p.matched));
        }
        scored.push(s);
    }
    let mut fold_accuracy = Vec::new();
    let mut thresholds = Vec::new();
    for held in 0..scored.len() {
        let train: Vec<(f64, bool)> =
            scored.iter().enumerate().filter(|(i, _)| *i != held).flat_map(|(_, s)| s.iter().copied()).collect();
        let t = best_threshold(&train);
        thresholds.push(t);
        fold_accuracy.push(accuracy_at(&scored[held], t));
    }
    let n = fold_accuracy.len() as f64;
    let mean = fold_accuracy.iter().sum::<f64>() / n;
    let std = (fold_accuracy.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(VerificationReport { mean, std, fold_accuracy, thresholds })
}
