//! Cluster analytics over labeled embeddings.
//!
//! Each class is one cluster. Centroids are per-class means (the fixed point of
//! one-prototype k-means). On top of them: member-to-centroid spread, single
//! linkage between centroids, PCA, and the silhouette / Davies-Bouldin /
//! Calinski-Harabasz validity indices. Everything is Euclidean and computed in
//! f64.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::LabelTable;
use crate::embedding_io::EmbeddingSet;
use crate::error::{Error, Result};
use crate::svg::{self, Svg};

pub type Centroids = BTreeMap<u32, Vec<f64>>;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn dist_mixed(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, y)| (x as f64 - y) * (x as f64 - y))
        .sum::<f64>()
        .sqrt()
}

fn dist32(a: &[f32], b: &[f32]) -> f64 {
    crate::atlas_index::squared_distance(a, b).sqrt()
}

/// Mean vector of every label present in `set`.
pub fn class_centroids(set: &EmbeddingSet) -> Result<Centroids> {
    if set.is_empty() {
        return Err(Error::InvalidInput("no samples, no classes".into()));
    }
    let dim = set.dim();
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, rec) in set.rows().zip(set.records()) {
        let (acc, n) = sums.entry(rec.label_id).or_insert_with(|| (vec![0.0; dim], 0));
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
        *n += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(l, (acc, n))| (l, acc.into_iter().map(|s| s / n as f64).collect()))
        .collect())
}

/// Like [`class_centroids`] but every label of `labels` must have members.
pub fn class_centroids_for(set: &EmbeddingSet, labels: &LabelTable) -> Result<Centroids> {
    let c = class_centroids(set)?;
    if let Some(missing) = labels.ids().find(|id| !c.contains_key(id)) {
        return Err(Error::InvalidInput(format!("class {missing} has no samples")));
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outlier {
    pub patch_id: String,
    pub distance: f64,
}

/// Boxplot summary of member-to-centroid distances for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntraStats {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<Outlier>,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn intra_class_stats(set: &EmbeddingSet, centroids: &Centroids) -> Result<BTreeMap<u32, IntraStats>> {
    let mut members: BTreeMap<u32, Vec<(f64, &str)>> = BTreeMap::new();
    for (row, rec) in set.rows().zip(set.records()) {
        let c = centroids
            .get(&rec.label_id)
            .ok_or_else(|| Error::InvalidInput(format!("no centroid for class {}", rec.label_id)))?;
        members
            .entry(rec.label_id)
            .or_default()
            .push((dist_mixed(row, c), rec.patch_id.as_str()));
    }
    let mut out = BTreeMap::new();
    for (label, items) in members {
        let mut d: Vec<f64> = items.iter().map(|x| x.0).collect();
        d.sort_by(f64::total_cmp);
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let (q1, q3) = (quantile(&d, 0.25), quantile(&d, 0.75));
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let whisker_low = d.iter().copied().find(|&x| x >= lo_fence).unwrap_or(d[0]);
        let whisker_high = d.iter().rev().copied().find(|&x| x <= hi_fence).unwrap_or(d[d.len() - 1]);
        let mut outliers: Vec<Outlier> = items
            .iter()
            .filter(|(x, _)| *x < lo_fence || *x > hi_fence)
            .map(|(x, id)| Outlier {
                patch_id: id.to_string(),
                distance: *x,
            })
            .collect();
        outliers.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.patch_id.cmp(&b.patch_id)));
        out.insert(
            label,
            IntraStats {
                count: d.len(),
                min: d[0],
                q1,
                median: quantile(&d, 0.5),
                q3,
                max: d[d.len() - 1],
                mean,
                stddev: var.sqrt(),
                whisker_low,
                whisker_high,
                outliers,
            },
        );
    }
    Ok(out)
}

/// One agglomeration step. Node ids `0..n` are leaves (in `Linkage::leaves`
/// order); merge `i` creates node `n + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linkage {
    pub leaves: Vec<u32>,
    pub merges: Vec<Merge>,
}

/// Single-linkage agglomeration of the centroids.
///
/// Cluster distance is the minimum pairwise Euclidean distance. Among equally
/// close pairs the one with the smallest (min-label of one side, min-label of
/// the other) wins; the side with the smaller min-label becomes `left`.
pub fn single_linkage(centroids: &Centroids) -> Result<Linkage> {
    let n = centroids.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("single linkage needs at least 2 centroids, got {n}")));
    }
    let leaves: Vec<u32> = centroids.keys().copied().collect();
    let vecs: Vec<&Vec<f64>> = centroids.values().collect();

    // active clusters: (node id, min label); distances updated Lance-Williams style
    let mut active: Vec<(usize, u32)> = leaves.iter().enumerate().map(|(i, &l)| (i, l)).collect();
    let mut d: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| dist(vecs[i], vecs[j])).collect())
        .collect();
    let mut sizes: Vec<usize> = vec![1; n];
    let mut merges = Vec::with_capacity(n - 1);

    while active.len() > 1 {
        let mut best: Option<(f64, u32, u32, usize, usize)> = None;
        for a in 0..active.len() {
            for b in a + 1..active.len() {
                let (ka, kb) = (active[a].1, active[b].1);
                let key = (d[a][b], ka.min(kb), ka.max(kb));
                let better = match best {
                    None => true,
                    Some((bd, b1, b2, _, _)) => key
                        .0
                        .total_cmp(&bd)
                        .then(key.1.cmp(&b1))
                        .then(key.2.cmp(&b2))
                        .is_lt(),
                };
                if better {
                    best = Some((key.0, key.1, key.2, a, b));
                }
            }
        }
        let (height, _, _, a, b) = best.expect("at least two active clusters");
        let (left, right) = if active[a].1 < active[b].1 { (a, b) } else { (b, a) };
        let size = sizes[active[a].0] + sizes[active[b].0];
        let node = n + merges.len();
        merges.push(Merge {
            left: active[left].0,
            right: active[right].0,
            height,
            size,
        });
        sizes.push(size);

        // merged cluster replaces slot a; slot b is removed
        let key = active[a].1.min(active[b].1);
        for k in 0..active.len() {
            let m = d[a][k].min(d[b][k]);
            d[a][k] = m;
            d[k][a] = m;
        }
        d[a][a] = 0.0;
        active[a] = (node, key);
        active.remove(b);
        d.remove(b);
        for row in d.iter_mut() {
            row.remove(b);
        }
    }
    Ok(Linkage { leaves, merges })
}

impl Linkage {
    /// Newick text; branch lengths are height differences.
    pub fn to_newick(&self, name: impl Fn(u32) -> String) -> String {
        let n = self.leaves.len();
        let height = |node: usize| if node < n { 0.0 } else { self.merges[node - n].height };
        fn clean(s: String) -> String {
            s.chars()
                .map(|c| if "(),:;[] ".contains(c) { '_' } else { c })
                .collect()
        }
        fn rec(node: usize, l: &Linkage, name: &dyn Fn(u32) -> String, height: &dyn Fn(usize) -> f64) -> String {
            let n = l.leaves.len();
            if node < n {
                return clean(name(l.leaves[node]));
            }
            let m = &l.merges[node - n];
            format!(
                "({}:{},{}:{})",
                rec(m.left, l, name, height),
                m.height - height(m.left),
                rec(m.right, l, name, height),
                m.height - height(m.right)
            )
        }
        let root = n + self.merges.len() - 1;
        format!("{};", rec(root, self, &name, &height))
    }

    /// Leaf order for drawing (left-to-right traversal).
    pub fn leaf_order(&self) -> Vec<usize> {
        let n = self.leaves.len();
        let mut out = Vec::with_capacity(n);
        let mut stack = vec![n + self.merges.len() - 1];
        while let Some(node) = stack.pop() {
            if node < n {
                out.push(node);
            } else {
                let m = &self.merges[node - n];
                stack.push(m.right);
                stack.push(m.left);
            }
        }
        out
    }

    pub fn to_svg(&self, name: impl Fn(u32) -> String) -> String {
        let n = self.leaves.len();
        let order = self.leaf_order();
        let row_h = 18.0;
        let (left, plot_w) = (260.0, 420.0);
        let max_h = self.merges.iter().map(|m| m.height).fold(0.0, f64::max).max(1e-12);
        let mut y = vec![0.0; n + self.merges.len()];
        let mut x = vec![left; n + self.merges.len()];
        let mut svg = Svg::new(left + plot_w + 40.0, row_h * n as f64 + 60.0);
        svg.text(10.0, 18.0, 13.0, "start", "Single linkage of class centroids");
        for (pos, &leaf) in order.iter().enumerate() {
            y[leaf] = 40.0 + row_h * pos as f64;
            svg.text(left - 6.0, y[leaf] + 4.0, 10.0, "end", &name(self.leaves[leaf]));
        }
        for (i, m) in self.merges.iter().enumerate() {
            let node = n + i;
            x[node] = left + plot_w * m.height / max_h;
            y[node] = (y[m.left] + y[m.right]) / 2.0;
            svg.line(x[m.left], y[m.left], x[node], y[m.left], "#333");
            svg.line(x[m.right], y[m.right], x[node], y[m.right], "#333");
            svg.line(x[node], y[m.left], x[node], y[m.right], "#333");
        }
        let axis_y = 40.0 + row_h * n as f64;
        svg.line(left, axis_y, left + plot_w, axis_y, "#999");
        svg.text(left, axis_y + 14.0, 9.0, "middle", "0");
        svg.text(left + plot_w, axis_y + 14.0, 9.0, "middle", &format!("{max_h:.3}"));
        svg.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k × d`, orthonormal rows.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub k: usize,
}

/// Top-`k` principal components from the SVD of the mean-centered data.
///
/// Each component is signed so its largest-magnitude entry is positive.
pub fn pca_fit(set: &EmbeddingSet, k: usize) -> Result<PcaModel> {
    let (n, d) = (set.count(), set.dim());
    if n < 2 || k < 1 || k > (n - 1).min(d) {
        return Err(Error::InvalidInput(format!(
            "PCA k={k} outside 1..={} for {n} samples of dim {d}",
            n.saturating_sub(1).min(d)
        )));
    }
    let mut mean = vec![0.0f64; d];
    for row in set.rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, d, |i, j| set.row(i)[j] as f64 - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD did not produce right singular vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let denom = (n - 1) as f64;
    let total: f64 = svd.singular_values.iter().map(|s| s * s / denom).sum();
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut c: Vec<f64> = v_t.row(idx).iter().copied().collect();
        let pivot = c
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, &v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc })
            .0;
        if c[pivot] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        let s = svd.singular_values[idx];
        explained_variance.push(s * s / denom);
    }
    let explained_variance_ratio = explained_variance
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        explained_variance_ratio,
        k,
    })
}

impl PcaModel {
    pub fn project_row(&self, row: &[f32]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(row)
                    .zip(&self.mean)
                    .map(|((w, &x), m)| w * (x as f64 - m))
                    .sum()
            })
            .collect()
    }

    pub fn reconstruct_row(&self, scores: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, s) in self.components.iter().zip(scores) {
            for (o, w) in out.iter_mut().zip(c) {
                *o += s * w;
            }
        }
        out
    }
}

/// Projects `set` onto the model's components (records are carried over).
pub fn pca_transform(model: &PcaModel, set: &EmbeddingSet) -> Result<EmbeddingSet> {
    if set.count() > 0 && set.dim() != model.mean.len() {
        return Err(Error::DimMismatch {
            got: set.dim(),
            expected: model.mean.len(),
        });
    }
    let vectors: Vec<f32> = set
        .rows()
        .flat_map(|r| model.project_row(r).into_iter().map(|v| v as f32))
        .collect();
    EmbeddingSet::new(model.k, vectors, set.records().to_vec())
}

/// Groups row indices by label.
fn clusters(set: &EmbeddingSet) -> Result<BTreeMap<u32, Vec<usize>>> {
    let mut by: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in set.records().iter().enumerate() {
        by.entry(r.label_id).or_default().push(i);
    }
    if by.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "validity indices need at least 2 classes, got {}",
            by.len()
        )));
    }
    Ok(by)
}

/// Mean silhouette over all samples; samples of singleton classes score 0.
pub fn silhouette(set: &EmbeddingSet) -> Result<f64> {
    let by = clusters(set)?;
    let labels: Vec<u32> = by.keys().copied().collect();
    let sizes: Vec<usize> = by.values().map(Vec::len).collect();
    let slot: Vec<usize> = set
        .records()
        .iter()
        .map(|r| labels.binary_search(&r.label_id).expect("label indexed"))
        .collect();
    let n = set.count();
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = slot[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0f64; labels.len()];
            let xi = set.row(i);
            for j in 0..n {
                if j != i {
                    sums[slot[j]] += dist32(xi, set.row(j));
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..labels.len())
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / n as f64)
}

pub fn davies_bouldin(set: &EmbeddingSet) -> Result<f64> {
    let by = clusters(set)?;
    let centroids = class_centroids(set)?;
    let cs: Vec<&Vec<f64>> = centroids.values().collect();
    let scatter: Vec<f64> = by
        .iter()
        .zip(&cs)
        .map(|((_, rows), c)| rows.iter().map(|&i| dist_mixed(set.row(i), c)).sum::<f64>() / rows.len() as f64)
        .collect();
    let labels: Vec<u32> = by.keys().copied().collect();
    let k = cs.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = dist(cs[i], cs[j]);
            if d == 0.0 {
                return Err(Error::InvalidInput(format!(
                    "classes {} and {} have identical centroids",
                    labels[i], labels[j]
                )));
            }
            worst = worst.max((scatter[i] + scatter[j]) / d);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

pub fn calinski_harabasz(set: &EmbeddingSet) -> Result<f64> {
    let by = clusters(set)?;
    let (n, k) = (set.count(), by.len());
    if n <= k {
        return Err(Error::InvalidInput(format!("need more samples ({n}) than classes ({k})")));
    }
    let centroids = class_centroids(set)?;
    let mut global = vec![0.0f64; set.dim()];
    for row in set.rows() {
        for (g, &v) in global.iter_mut().zip(row) {
            *g += v as f64;
        }
    }
    global.iter_mut().for_each(|g| *g /= n as f64);
    let mut between = 0.0;
    let mut within = 0.0;
    for ((_, rows), c) in by.iter().zip(centroids.values()) {
        between += rows.len() as f64 * dist(c, &global).powi(2);
        within += rows.iter().map(|&i| dist_mixed(set.row(i), c).powi(2)).sum::<f64>();
    }
    if within == 0.0 {
        return Err(Error::InvalidInput("zero within-class dispersion".into()));
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityIndices {
    pub silhouette: f64,
    pub davies_bouldin: f64,
    pub calinski_harabasz: f64,
}

pub fn validity_indices(set: &EmbeddingSet) -> Result<ValidityIndices> {
    Ok(ValidityIndices {
        silhouette: silhouette(set)?,
        davies_bouldin: davies_bouldin(set)?,
        calinski_harabasz: calinski_harabasz(set)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub centroids: Centroids,
    pub intra_stats: BTreeMap<u32, IntraStats>,
    pub linkage: Linkage,
    /// Keyed by feature variant: `full` and `pca_<k>`.
    pub validity: BTreeMap<String, ValidityIndices>,
    pub pca: Option<PcaModel>,
}

/// Full analysis of `set`; with `pca_k`, indices are also computed on the
/// top-`pca_k` projection fitted on `set`.
pub fn cluster_report(set: &EmbeddingSet, pca_k: Option<usize>) -> Result<ClusterReport> {
    let centroids = class_centroids(set)?;
    let intra_stats = intra_class_stats(set, &centroids)?;
    let linkage = single_linkage(&centroids)?;
    let mut validity = BTreeMap::new();
    validity.insert("full".to_string(), validity_indices(set)?);
    let pca = match pca_k {
        Some(k) => {
            let model = pca_fit(set, k)?;
            let reduced = pca_transform(&model, set)?;
            validity.insert(format!("pca_{k}"), validity_indices(&reduced)?);
            Some(model)
        }
        None => None,
    };
    Ok(ClusterReport {
        centroids,
        intra_stats,
        linkage,
        validity,
        pca,
    })
}

fn boxplot_svg(stats: &BTreeMap<u32, IntraStats>, name: &dyn Fn(u32) -> String) -> String {
    let n = stats.len();
    let (left, top, plot_h, col) = (60.0, 40.0, 300.0, 22.0);
    let max = stats
        .values()
        .map(|s| s.max)
        .fold(0.0, f64::max)
        .max(1e-12);
    let yof = |v: f64| top + plot_h * (1.0 - v / max);
    let mut svg = Svg::new(left + col * n as f64 + 30.0, top + plot_h + 90.0);
    svg.text(10.0, 20.0, 13.0, "start", "Member-to-centroid distance per class");
    svg.line(left, top, left, top + plot_h, "#999");
    svg.text(left - 4.0, top + 4.0, 9.0, "end", &format!("{max:.2}"));
    svg.text(left - 4.0, top + plot_h, 9.0, "end", "0");
    for (i, (label, s)) in stats.iter().enumerate() {
        let cx = left + col * (i as f64 + 0.5);
        let w = col * 0.6;
        svg.line(cx, yof(s.whisker_low), cx, yof(s.whisker_high), "#333");
        svg.rect(cx - w / 2.0, yof(s.q3), w, (yof(s.q1) - yof(s.q3)).max(0.5), &svg::palette(i));
        svg.line(cx - w / 2.0, yof(s.median), cx + w / 2.0, yof(s.median), "#000");
        for o in &s.outliers {
            svg.circle(cx, yof(o.distance), 1.5, "none", Some("#555"));
        }
        svg.text(cx, top + plot_h + 14.0, 9.0, "middle", &name(*label));
    }
    svg.finish()
}

/// Writes `cluster_report.json`, `dendrogram.nwk`, `dendrogram.svg`,
/// `intra_class.csv` and `intra_class.svg` into `dir`.
pub fn write_cluster_report(dir: &Path, report: &ClusterReport, labels: Option<&LabelTable>) -> Result<()> {
    let w = |name: &str, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = |id: u32| match labels.and_then(|t| t.name(id)) {
        Some(n) => format!("{id:02} {n}"),
        None => id.to_string(),
    };
    w("cluster_report.json", serde_json::to_string_pretty(report).expect("serializes") + "\n")?;
    w("dendrogram.nwk", report.linkage.to_newick(name) + "\n")?;
    w("dendrogram.svg", report.linkage.to_svg(name))?;
    let mut csv = String::from("label_id,count,min,q1,median,q3,max,mean,stddev,whisker_low,whisker_high,outliers\n");
    for (l, s) in &report.intra_stats {
        csv += &format!(
            "{l},{},{},{},{},{},{},{},{},{},{},{}\n",
            s.count, s.min, s.q1, s.median, s.q3, s.max, s.mean, s.stddev, s.whisker_low, s.whisker_high,
            s.outliers.len()
        );
    }
    w("intra_class.csv", csv)?;
    w("intra_class.svg", boxplot_svg(&report.intra_stats, &|id| id.to_string()))?;
    Ok(())
}
