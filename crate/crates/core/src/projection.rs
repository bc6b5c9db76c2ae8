//! Exact t-SNE for 2-D maps of atlas and test embeddings.
//!
//! Gaussian input affinities with per-point bandwidth found by bisection to a
//! target perplexity, a Student-t output kernel, and gradient descent with
//! gains, a momentum switch and early exaggeration. The gradient is the exact
//! O(n²) sum; rows are processed in parallel but every reduction runs in a
//! fixed order, so a fixed seed gives bit-identical output.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::LabelTable;
use crate::embedding_io::EmbeddingSet;
use crate::error::{Error, Result};
use crate::svg::{self, Svg};

pub const BISECTION_MAX_ITER: usize = 100;
pub const ENTROPY_TOL: f64 = 1e-5;
const INIT_STD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Pca,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub seed: u64,
    pub init: Init,
    /// Largest n accepted by the exact gradient.
    pub max_points: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 0,
            init: Init::Pca,
            max_points: 5000,
        }
    }
}

impl TsneConfig {
    /// Checks the config on its own; `validate_for` adds the size-dependent rules.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.perplexity.is_finite() && self.perplexity > 0.0) {
            return bad(format!("perplexity must be positive, got {}", self.perplexity));
        }
        if self.iterations < 250 {
            return bad(format!("iterations must be at least 250, got {}", self.iterations));
        }
        if self.exaggeration_iterations > self.iterations || self.momentum_switch > self.iterations {
            return bad("exaggeration_iterations and momentum_switch must not exceed iterations".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.early_exaggeration.is_finite() && self.early_exaggeration >= 1.0) {
            return bad(format!("early_exaggeration must be >= 1, got {}", self.early_exaggeration));
        }
        for m in [self.initial_momentum, self.final_momentum] {
            if !(0.0..1.0).contains(&m) {
                return bad(format!("momentum must lie in [0, 1), got {m}"));
            }
        }
        Ok(())
    }

    pub fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        if n < 4 {
            return Err(Error::InvalidInput(format!("t-SNE needs at least 4 points, got {n}")));
        }
        if n > self.max_points {
            return Err(Error::InvalidInput(format!(
                "{n} points exceed the exact t-SNE limit of {}",
                self.max_points
            )));
        }
        let limit = (n - 1) as f64 / 3.0;
        if self.perplexity >= limit {
            return Err(Error::InvalidConfig(format!(
                "perplexity {} must be below (n-1)/3 = {limit:.3} for n={n}",
                self.perplexity
            )));
        }
        Ok(())
    }
}

/// Input affinities. Matrices are dense, row-major `n × n`.
#[derive(Debug, Clone)]
pub struct Affinities {
    pub n: usize,
    /// P_{j|i}; each row sums to 1, diagonal 0.
    pub conditional: Vec<f64>,
    /// Symmetric joint P; sums to 1.
    pub joint: Vec<f64>,
    /// Achieved entropy of each conditional row, in bits.
    pub entropy_bits: Vec<f64>,
    /// Precision (1 / 2σ²) of each row.
    pub beta: Vec<f64>,
    /// Rows whose neighbors are all equidistant; these are uniform whatever
    /// the perplexity.
    pub degenerate: Vec<bool>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fills `p` with exp(-beta * d) normalized; returns entropy in bits.
fn row_distribution(d: &[f64], beta: f64, p: &mut [f64]) -> f64 {
    let mut z = 0.0;
    for (pj, &dj) in p.iter_mut().zip(d) {
        *pj = (-beta * dj).exp();
        z += *pj;
    }
    let mut weighted = 0.0;
    for (pj, &dj) in p.iter_mut().zip(d) {
        *pj /= z;
        weighted += *pj * dj;
    }
    (z.ln() + beta * weighted) / std::f64::consts::LN_2
}

struct RowFit {
    p: Vec<f64>,
    entropy: f64,
    beta: f64,
    degenerate: bool,
}

fn fit_row(d: &[f64], target_bits: f64, row: usize) -> Result<RowFit> {
    // shift so the nearest neighbor has distance 0; keeps exp() in range
    let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = d.iter().map(|v| v - dmin).collect();
    let spread = shifted.iter().copied().fold(0.0, f64::max);
    let mut p = vec![0.0; d.len()];
    if spread == 0.0 {
        let entropy = row_distribution(&shifted, 0.0, &mut p);
        return Ok(RowFit {
            p,
            entropy,
            beta: 0.0,
            degenerate: true,
        });
    }
    // bisection on ln(beta * spread)
    let (mut lo, mut hi) = (-100.0f64, 100.0f64);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for _ in 0..BISECTION_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let beta = mid.exp() / spread;
        let h = row_distribution(&shifted, beta, &mut p);
        let err = h - target_bits;
        if err.abs() < best.0 {
            best = (err.abs(), beta, h);
        }
        if err.abs() < 1e-10 {
            break;
        }
        // entropy falls as beta grows
        if err > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (err, beta, entropy) = best;
    if err > ENTROPY_TOL {
        return Err(Error::Numerical(format!(
            "perplexity bisection did not converge for row {row} (entropy off by {err:.3e} bits)"
        )));
    }
    row_distribution(&shifted, beta, &mut p);
    Ok(RowFit {
        p,
        entropy,
        beta,
        degenerate: false,
    })
}

/// Per-point Gaussian affinities at the given perplexity, symmetrized as
/// (P_{j|i} + P_{i|j}) / 2n.
pub fn conditional_affinities(points: &[Vec<f64>], perplexity: f64) -> Result<Affinities> {
    let n = points.len();
    if n < 4 {
        return Err(Error::InvalidInput(format!("affinities need at least 4 points, got {n}")));
    }
    if !(perplexity.is_finite() && perplexity > 0.0) {
        return Err(Error::InvalidConfig(format!("perplexity must be positive, got {perplexity}")));
    }
    check_points(points)?;
    let target = perplexity.log2();
    let fits: Vec<RowFit> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(&points[i], &points[j]))
                .collect();
            fit_row(&d, target, i)
        })
        .collect::<Result<_>>()?;

    let mut conditional = vec![0.0; n * n];
    for (i, f) in fits.iter().enumerate() {
        let mut it = f.p.iter();
        for j in (0..n).filter(|&j| j != i) {
            conditional[i * n + j] = *it.next().expect("n-1 entries");
        }
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = (conditional[i * n + j] + conditional[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(Affinities {
        n,
        conditional,
        joint,
        entropy_bits: fits.iter().map(|f| f.entropy).collect(),
        beta: fits.iter().map(|f| f.beta).collect(),
        degenerate: fits.iter().map(|f| f.degenerate).collect(),
    })
}

fn check_points(points: &[Vec<f64>]) -> Result<()> {
    let dim = points.first().map_or(0, Vec::len);
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::DimMismatch {
                got: p.len(),
                expected: dim,
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub coords: Vec<[f64; 2]>,
    /// `kl_trace[i]` is KL(P‖Q) after iteration `i + 1`.
    pub kl_trace: Vec<f64>,
    pub config: TsneConfig,
}

impl ProjectionResult {
    pub fn kl_at(&self, iteration: usize) -> Option<f64> {
        iteration.checked_sub(1).and_then(|i| self.kl_trace.get(i)).copied()
    }

    pub fn final_kl(&self) -> f64 {
        *self.kl_trace.last().expect("at least 250 iterations")
    }
}

fn initial_coords(points: &[Vec<f64>], config: &TsneConfig) -> Vec<[f64; 2]> {
    let n = points.len();
    match config.init {
        Init::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let normal = Normal::new(0.0, INIT_STD).expect("valid std");
            (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect()
        }
        Init::Pca => {
            let d = points[0].len();
            let mut mean = vec![0.0; d];
            for p in points {
                for (m, v) in mean.iter_mut().zip(p) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
            let svd = centered.clone().svd(false, true);
            let v_t = svd.v_t.expect("requested V^T");
            let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
            order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
            let mut scores = vec![[0.0f64; 2]; n];
            for (c, &idx) in order.iter().take(2).enumerate() {
                let mut axis: Vec<f64> = v_t.row(idx).iter().copied().collect();
                let pivot = axis
                    .iter()
                    .enumerate()
                    .fold((0, 0.0f64), |acc, (i, &v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc })
                    .0;
                if axis[pivot] < 0.0 {
                    axis.iter_mut().for_each(|v| *v = -*v);
                }
                for (i, s) in scores.iter_mut().enumerate() {
                    s[c] = (0..d).map(|j| centered[(i, j)] * axis[j]).sum();
                }
            }
            let m0 = scores.iter().map(|s| s[0]).sum::<f64>() / n as f64;
            let sd0 = (scores.iter().map(|s| (s[0] - m0).powi(2)).sum::<f64>() / n as f64).sqrt();
            if sd0 == 0.0 {
                // all points identical: fall back to the seeded draw
                let cfg = TsneConfig {
                    init: Init::Random,
                    ..config.clone()
                };
                return initial_coords(points, &cfg);
            }
            let scale = INIT_STD / sd0;
            scores.iter().map(|s| [s[0] * scale, s[1] * scale]).collect()
        }
    }
}

struct Pass {
    grad: Vec<[f64; 2]>,
    kl: f64,
}

/// One exact pass: gradient under exaggeration `alpha` and the true KL.
fn gradient_pass(p: &[f64], p_log_p: f64, y: &[[f64; 2]], alpha: f64) -> Pass {
    let n = y.len();
    // per row: attractive sum, repulsive sum, row Z, Σ p ln w
    let rows: Vec<([f64; 2], [f64; 2], f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut att, mut rep) = ([0.0; 2], [0.0; 2]);
            let (mut z, mut plw) = (0.0, 0.0);
            let yi = y[i];
            let prow = &p[i * n..(i + 1) * n];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let dx = yi[0] - y[j][0];
                let dy = yi[1] - y[j][1];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                let pw = prow[j] * w;
                att[0] += pw * dx;
                att[1] += pw * dy;
                let ww = w * w;
                rep[0] += ww * dx;
                rep[1] += ww * dy;
                z += w;
                if prow[j] > 0.0 {
                    plw += prow[j] * w.ln();
                }
            }
            (att, rep, z, plw)
        })
        .collect();
    let z: f64 = rows.iter().map(|r| r.2).sum();
    let plw: f64 = rows.iter().map(|r| r.3).sum();
    let grad = rows
        .iter()
        .map(|(att, rep, _, _)| {
            [
                4.0 * (alpha * att[0] - rep[0] / z),
                4.0 * (alpha * att[1] - rep[1] / z),
            ]
        })
        .collect();
    Pass {
        grad,
        kl: (p_log_p - plw + z.ln()).max(0.0),
    }
}

/// Runs t-SNE on `points` (rows of equal length).
pub fn tsne(points: &[Vec<f64>], config: &TsneConfig) -> Result<ProjectionResult> {
    let n = points.len();
    config.validate_for(n)?;
    let aff = conditional_affinities(points, config.perplexity)?;
    let p = aff.joint;
    let p_log_p: f64 = p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();

    let mut y = initial_coords(points, config);
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_trace = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let alpha = if it < config.exaggeration_iterations {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if it < config.momentum_switch {
            config.initial_momentum
        } else {
            config.final_momentum
        };
        let pass = gradient_pass(&p, p_log_p, &y, alpha);
        if it > 0 {
            kl_trace.push(pass.kl);
        }
        for i in 0..n {
            for c in 0..2 {
                let g = pass.grad[i][c];
                gains[i][c] = if (g > 0.0) != (update[i][c] > 0.0) {
                    gains[i][c] + 0.2
                } else {
                    (gains[i][c] * 0.8).max(0.01)
                };
                update[i][c] = momentum * update[i][c] - config.learning_rate * gains[i][c] * g;
                y[i][c] += update[i][c];
            }
        }
        let mut mean = [0.0; 2];
        for yi in &y {
            mean[0] += yi[0];
            mean[1] += yi[1];
        }
        for yi in &mut y {
            yi[0] -= mean[0] / n as f64;
            yi[1] -= mean[1] / n as f64;
        }
        if y.iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
            return Err(Error::Numerical(format!("non-finite coordinates at iteration {}", it + 1)));
        }
    }
    kl_trace.push(gradient_pass(&p, p_log_p, &y, 1.0).kl);

    let result = ProjectionResult {
        coords: y,
        kl_trace,
        config: config.clone(),
    };
    let (at_switch, last) = (result.kl_trace[249], result.final_kl());
    if last > at_switch {
        return Err(Error::Numerical(format!(
            "KL rose after early exaggeration ended: {at_switch} at iteration 250, {last} at the end"
        )));
    }
    Ok(result)
}

/// Atlas map with test rows appended and flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayResult {
    pub result: ProjectionResult,
    /// One flag per row of `result.coords`; atlas rows first.
    pub is_test: Vec<bool>,
}

/// Joint re-projection of atlas and test rows with the atlas run's config.
pub fn overlay(atlas: &[Vec<f64>], atlas_result: &ProjectionResult, test: &[Vec<f64>]) -> Result<OverlayResult> {
    if atlas.len() != atlas_result.coords.len() {
        return Err(Error::InvalidInput(format!(
            "atlas has {} rows but its projection has {}",
            atlas.len(),
            atlas_result.coords.len()
        )));
    }
    if test.is_empty() {
        return Ok(OverlayResult {
            result: atlas_result.clone(),
            is_test: vec![false; atlas.len()],
        });
    }
    let dim = atlas.first().map_or(0, Vec::len);
    if let Some(bad) = test.iter().find(|t| t.len() != dim) {
        return Err(Error::DimMismatch {
            got: bad.len(),
            expected: dim,
        });
    }
    let joint: Vec<Vec<f64>> = atlas.iter().chain(test).cloned().collect();
    let result = tsne(&joint, &atlas_result.config)?;
    let mut is_test = vec![false; atlas.len()];
    is_test.resize(joint.len(), true);
    Ok(OverlayResult { result, is_test })
}

/// Rows of `set` widened to f64.
pub fn rows_f64(set: &EmbeddingSet) -> Vec<Vec<f64>> {
    set.rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub patch_id: String,
    pub label_id: u32,
    pub is_test: bool,
}

pub fn map_csv(points: &[MapPoint], coords: &[[f64; 2]]) -> String {
    let mut out = String::from("patch_id,label_id,is_test,x,y\n");
    for (p, c) in points.iter().zip(coords) {
        out += &format!("{},{},{},{},{}\n", p.patch_id, p.label_id, p.is_test, c[0], c[1]);
    }
    out
}

/// Scatter plot colored by label with a legend in label order; test points
/// are drawn with a black outline.
pub fn map_svg(title: &str, points: &[MapPoint], coords: &[[f64; 2]], labels: Option<&LabelTable>) -> String {
    let (plot, margin, legend_w) = (600.0, 30.0, 220.0);
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in coords {
        xmin = xmin.min(c[0]);
        xmax = xmax.max(c[0]);
        ymin = ymin.min(c[1]);
        ymax = ymax.max(c[1]);
    }
    let span = (xmax - xmin).max(ymax - ymin).max(1e-12);
    let px = |v: f64| margin + plot * (v - xmin) / span;
    let py = |v: f64| margin + 20.0 + plot * (ymax - v) / span;
    let mut present: Vec<u32> = points.iter().map(|p| p.label_id).collect();
    present.sort_unstable();
    present.dedup();
    let color = |l: u32| svg::palette(present.binary_search(&l).unwrap_or(0));

    let mut s = Svg::new(plot + 2.0 * margin + legend_w, plot + 2.0 * margin + 20.0);
    s.text(margin, 20.0, 14.0, "start", title);
    for (p, c) in points.iter().zip(coords).filter(|(p, _)| !p.is_test) {
        s.circle(px(c[0]), py(c[1]), 2.0, &color(p.label_id), None);
    }
    for (p, c) in points.iter().zip(coords).filter(|(p, _)| p.is_test) {
        s.circle(px(c[0]), py(c[1]), 3.0, &color(p.label_id), Some("#000"));
    }
    let lx = plot + 2.0 * margin;
    for (i, &l) in present.iter().enumerate() {
        let ly = margin + 30.0 + 14.0 * i as f64;
        s.circle(lx, ly - 4.0, 4.0, &color(l), None);
        let name = labels.and_then(|t| t.name(l)).map(|n| format!("{l:02} {n}")).unwrap_or(l.to_string());
        s.text(lx + 10.0, ly, 10.0, "start", &name);
    }
    if points.iter().any(|p| p.is_test) {
        let ly = margin + 30.0 + 14.0 * present.len() as f64 + 6.0;
        s.circle(lx, ly - 4.0, 4.0, "white", Some("#000"));
        s.text(lx + 10.0, ly, 10.0, "start", "test patch");
    }
    s.finish()
}

/// Writes `<stem>.csv`, `<stem>.svg` and `<stem>.json` (config echo and KL trace).
pub fn write_map(
    dir: &Path,
    stem: &str,
    points: &[MapPoint],
    result: &ProjectionResult,
    labels: Option<&LabelTable>,
) -> Result<()> {
    if points.len() != result.coords.len() {
        return Err(Error::InvalidInput(format!(
            "{} map points for {} coordinates",
            points.len(),
            result.coords.len()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let w = |name: String, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    w(format!("{stem}.csv"), map_csv(points, &result.coords))?;
    w(format!("{stem}.svg"), map_svg(stem, points, &result.coords, labels))?;
    let echo = serde_json::json!({
        "config": result.config,
        "final_kl": result.final_kl(),
        "kl_trace": result.kl_trace,
    });
    w(format!("{stem}.json"), serde_json::to_string_pretty(&echo).expect("serializes") + "\n")?;
    Ok(())
}
