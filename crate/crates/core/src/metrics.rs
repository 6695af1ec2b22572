//! Evaluation metrics: layout/image consistency, diversity, manifold
//! precision/recall, controllability correlations and DCI disentanglement.
//!
//! Everything here is a pure function of label maps or feature vectors; the
//! model-driven sampling that produces those inputs lives with the trainer.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Per-class breakdown of [`miou_pacc`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub iou: f64,
    /// Ground-truth pixel count.
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    /// IoU averaged over classes present in the ground truth, weighted by their frequency.
    pub miou: f64,
    pub pacc: f64,
    pub per_class: Vec<ClassScore>,
}

/// Frequency-weighted mean IoU and pixel accuracy of `pred` against `gt`.
/// Classes absent from `gt` carry no weight.
pub fn miou_pacc(pred: &[usize], gt: &[usize], classes: usize) -> Result<SegScores> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(shape_err("miou_pacc", format!("{} predicted vs {} ground-truth pixels", pred.len(), gt.len())));
    }
    let mut inter = vec![0usize; classes];
    let mut pred_count = vec![0usize; classes];
    let mut gt_count = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= classes || g >= classes {
            return Err(Error::InvalidArgument(format!("label {} outside {classes} classes", p.max(g))));
        }
        pred_count[p] += 1;
        gt_count[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    let n = gt.len() as f64;
    let per_class: Vec<ClassScore> = (0..classes)
        .filter(|&c| gt_count[c] > 0)
        .map(|c| ClassScore { class: c, iou: inter[c] as f64 / (gt_count[c] + pred_count[c] - inter[c]) as f64, support: gt_count[c] })
        .collect();
    let miou = per_class.iter().map(|s| s.iou * s.support as f64).sum::<f64>() / n;
    let pacc = inter.iter().sum::<usize>() as f64 / n;
    Ok(SegScores { miou, pacc, per_class })
}

fn comb2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index (Hubert–Arabie) between two partitions of the same
/// items. When the index is undetermined (both partitions a single cluster,
/// or both all singletons) the partitions are identical and 1 is returned.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err("ari", format!("{} vs {} labels", a.len(), b.len())));
    }
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| comb2(n)).sum();
    let sa: f64 = rows.values().map(|&n| comb2(n)).sum();
    let sb: f64 = cols.values().map(|&n| comb2(n)).sum();
    let total = comb2(a.len());
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine distance `1 − cos(a, b)`, with zero vectors at distance 0 from
/// each other and 1 from anything else.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    match (na == 0.0, nb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => (1.0 - dot(a, b) / (na * nb)).max(0.0),
    }
}

/// Mean pairwise cosine distance of `features` (one row per sample).
pub fn diversity_proxy(features: &[Vec<f64>]) -> Result<f64> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("diversity needs at least 2 samples, got {n}")));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += cosine_distance(&features[i], &features[j]);
        }
    }
    Ok(total / comb2(n))
}

/// Squared distance from each point to its `k`-th nearest other point.
fn knn_radii(points: &[Vec<f64>], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, q)| dist2(p, q)).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn coverage(manifold: &[Vec<f64>], radii: &[f64], queries: &[Vec<f64>]) -> f64 {
    let inside = queries.iter().filter(|q| manifold.iter().zip(radii).any(|(m, &r)| dist2(q, m) <= r)).count();
    inside as f64 / queries.len() as f64
}

/// k-NN manifold precision (fakes inside the real manifold) and recall
/// (reals inside the fake manifold).
pub fn knn_precision_recall(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    if k == 0 || real.len() < k + 1 || fake.len() < k + 1 {
        return Err(Error::InvalidArgument(format!("k-NN with k = {k} needs more than k points per set ({} real, {} fake)", real.len(), fake.len())));
    }
    let (rr, fr) = (knn_radii(real, k), knn_radii(fake, k));
    Ok((coverage(real, &rr, fake), coverage(fake, &fr, real)))
}

/// Minimum probe count for [`controllability_rho`].
pub const MIN_PROBES: usize = 30;

/// Attribute response to perturbing one segment's latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlProbe {
    /// Object whose latent was perturbed.
    pub source: usize,
    /// `deltas[o][p]`: change of property `p` of object `o`.
    pub deltas: Vec<Vec<f64>>,
}

/// Pearson correlation; 0 when either series has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= f64::EPSILON * n * mx.abs().max(1.0) || syy <= f64::EPSILON * n * my.abs().max(1.0) {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Object-ρ and property-ρ of a probe set.
///
/// Probes are grouped by perturbed object `i`. Object-ρ averages, over every
/// group and every other object `j`, `|pearson(‖Δ_i‖, ‖Δ_j‖)|` across the
/// group's probes. Property-ρ averages `|pearson(|Δ_{i,p}|, |Δ_{i,q}|)|` over
/// property pairs of the perturbed object itself.
pub fn controllability_rho(probes: &[ControlProbe]) -> Result<(f64, f64)> {
    if probes.len() < MIN_PROBES {
        return Err(Error::TooFewProbes { got: probes.len(), min: MIN_PROBES });
    }
    let objects = probes[0].deltas.len();
    let props = probes[0].deltas.first().map_or(0, Vec::len);
    if probes.iter().any(|p| p.source >= objects || p.deltas.len() != objects || p.deltas.iter().any(|d| d.len() != props)) {
        return Err(Error::InvalidArgument("probes disagree on object/property counts".into()));
    }
    let norm = |d: &[f64]| d.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (mut obj, mut prop) = (Vec::new(), Vec::new());
    for i in 0..objects {
        let group: Vec<&ControlProbe> = probes.iter().filter(|p| p.source == i).collect();
        if group.len() < 2 {
            continue;
        }
        let own: Vec<f64> = group.iter().map(|p| norm(&p.deltas[i])).collect();
        for j in (0..objects).filter(|&j| j != i) {
            let other: Vec<f64> = group.iter().map(|p| norm(&p.deltas[j])).collect();
            obj.push(pearson(&own, &other).abs());
        }
        for p in 0..props {
            for q in p + 1..props {
                let a: Vec<f64> = group.iter().map(|g| g.deltas[i][p].abs()).collect();
                let b: Vec<f64> = group.iter().map(|g| g.deltas[i][q].abs()).collect();
                prop.push(pearson(&a, &b).abs());
            }
        }
    }
    Ok((mean(&obj), mean(&prop)))
}

/// Ridge strength of the DCI regressors.
pub const DCI_RIDGE: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DciScores {
    pub disentanglement: f64,
    pub completeness: f64,
    /// Held-out R² of the regressors.
    pub informativeness: f64,
    /// Training R².
    pub informativeness_train: f64,
    pub modularity: f64,
    /// Attributes dropped for having no variance.
    pub dropped_attributes: Vec<usize>,
}

/// Disentanglement, completeness and modularity of an importance matrix
/// `r[latent][attribute]` (non-negative).
pub fn dci_from_importance(r: &[Vec<f64>]) -> (f64, f64, f64) {
    let l = r.len();
    let a = r.first().map_or(0, Vec::len);
    if l == 0 || a == 0 {
        return (0.0, 0.0, 0.0);
    }
    let entropy = |p: &[f64], base: usize| -> f64 {
        if base < 2 {
            return 0.0;
        }
        let s: f64 = p.iter().sum();
        if s <= 0.0 {
            return 1.0;
        }
        -p.iter().map(|v| v / s).filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>() / (base as f64).ln()
    };
    let total: f64 = r.iter().flatten().sum();
    let mut d = 0.0;
    for row in r {
        let w: f64 = row.iter().sum();
        if total > 0.0 {
            d += (w / total) * (1.0 - entropy(row, a));
        }
    }
    let mut c = 0.0;
    for j in 0..a {
        let col: Vec<f64> = r.iter().map(|row| row[j]).collect();
        c += 1.0 - entropy(&col, l);
    }
    c /= a as f64;
    let mut m = 0.0;
    for row in r {
        let theta = row.iter().cloned().fold(0.0, f64::max);
        if theta <= 0.0 || a < 2 {
            m += if a < 2 { 1.0 } else { 0.0 };
            continue;
        }
        let best = row.iter().position(|&v| v == theta).unwrap_or(0);
        let dev: f64 = row.iter().enumerate().filter(|&(k, _)| k != best).map(|(_, v)| v * v).sum();
        m += 1.0 - dev / (theta * theta * (a - 1) as f64);
    }
    (d, c, m / l as f64)
}

fn standardize(cols: &DMatrix<f64>, rows: std::ops::Range<usize>) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    (0..cols.ncols())
        .map(|j| {
            let m = rows.clone().map(|i| cols[(i, j)]).sum::<f64>() / n;
            let v = rows.clone().map(|i| (cols[(i, j)] - m).powi(2)).sum::<f64>() / n;
            (m, v.sqrt())
        })
        .unzip()
}

fn r2(pred: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    let m = truth.mean();
    let ss_tot: f64 = truth.iter().map(|v| (v - m).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(truth.iter()).map(|(p, t)| (p - t).powi(2)).sum();
    if ss_tot <= 0.0 {
        0.0
    } else {
        1.0 - ss_res / ss_tot
    }
}

/// DCI scores from paired samples `latents[n][L]` and `attributes[n][A]`,
/// using ridge regressors fit on the first 80% of samples.
pub fn dci_scores(latents: &[Vec<f64>], attributes: &[Vec<f64>]) -> Result<DciScores> {
    let n = latents.len();
    if n != attributes.len() || n < 5 {
        return Err(Error::InvalidArgument(format!("DCI needs ≥ 5 paired samples, got {n} latents and {} attributes", attributes.len())));
    }
    let l = latents[0].len();
    let a = attributes[0].len();
    if latents.iter().any(|r| r.len() != l) || attributes.iter().any(|r| r.len() != a) || l == 0 {
        return Err(Error::InvalidArgument("ragged DCI samples".into()));
    }
    let split = (n * 4 / 5).max(2).min(n - 1);
    let x = DMatrix::from_fn(n, l, |i, j| latents[i][j]);
    let y = DMatrix::from_fn(n, a, |i, j| attributes[i][j]);
    let (xm, xs) = standardize(&x, 0..split);
    let (ym, ys) = standardize(&y, 0..split);
    let xz = DMatrix::from_fn(n, l, |i, j| if xs[j] > 0.0 { (x[(i, j)] - xm[j]) / xs[j] } else { 0.0 });
    let xt = xz.rows(0, split).into_owned();
    let gram = xt.transpose() * &xt + DMatrix::identity(l, l) * (DCI_RIDGE * split as f64);
    let chol = gram.cholesky().ok_or_else(|| Error::InvalidArgument("singular DCI design".into()))?;
    let mut importance = vec![Vec::new(); l];
    let (mut i_test, mut i_train, mut dropped) = (Vec::new(), Vec::new(), Vec::new());
    for j in 0..a {
        if ys[j] <= 1e-12 {
            log::warn!("DCI: attribute {j} has no variance and is excluded");
            dropped.push(j);
            continue;
        }
        let yz = DVector::from_fn(n, |i, _| (y[(i, j)] - ym[j]) / ys[j]);
        let coef = chol.solve(&(xt.transpose() * yz.rows(0, split)));
        let pred = &xz * &coef;
        i_train.push(r2(&pred.rows(0, split).into_owned(), &yz.rows(0, split).into_owned()).max(0.0));
        i_test.push(r2(&pred.rows(split, n - split).into_owned(), &yz.rows(split, n - split).into_owned()).max(0.0));
        for (k, row) in importance.iter_mut().enumerate() {
            row.push(coef[k].abs());
        }
    }
    let (disentanglement, completeness, modularity) = dci_from_importance(&importance);
    Ok(DciScores { disentanglement, completeness, informativeness: mean(&i_test), informativeness_train: mean(&i_train), modularity, dropped_attributes: dropped })
}

/// All evaluation numbers of one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub pacc: f64,
    pub ari: f64,
    pub diversity: f64,
    /// Diversity of duplicated samples, the floor of the proxy.
    pub diversity_duplicates: f64,
    pub precision: f64,
    pub recall: f64,
    pub dci: DciScores,
    pub object_rho: f64,
    pub property_rho: f64,
    /// Feature space used by diversity and precision/recall.
    pub feature_space: String,
    pub samples: usize,
    pub probes: usize,
    pub seed: u64,
    pub per_class: Vec<ClassScore>,
}

impl EvalReport {
    /// Checks every score against its declared range.
    pub fn validate(&self) -> Result<()> {
        let unit = [("miou", self.miou), ("pacc", self.pacc), ("precision", self.precision), ("recall", self.recall)];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(-1.0..=1.0).contains(&self.ari) {
            return Err(Error::InvalidArgument(format!("ari = {} outside [−1, 1]", self.ari)));
        }
        Ok(())
    }

    /// Per-class CSV: `class,iou,support`.
    pub fn write_class_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "class,iou,support")?;
        for c in &self.per_class {
            writeln!(out, "{},{},{}", c.class, c.iou, c.support)?;
        }
        Ok(())
    }
}
