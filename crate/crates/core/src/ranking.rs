//! One-versus-rest KL ranking of projected instances.
//!
//! Each projected column `i` gets two shared-range histograms: the values of
//! class-`i` rows (foreground) and of every other row (background). The
//! distribution-level criterion of the column is `KL(fg ‖ bg)`. An instance
//! is scored by evaluating the KL integrand `f·ln(f/b)` at the bin its value
//! falls in and summing over columns, so scoring never needs a label and
//! summing the integrand once per occupied bin gives back `Σ_i KL_i`.

use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::projection::{project, Projection};
use crate::tensor::Matrix;

/// Histogram bins per column.
pub const DEFAULT_BINS: usize = 64;
/// Additive smoothing applied to every bin before renormalizing.
pub const SMOOTHING: f64 = 1e-8;

/// Normalized histogram over `[lo, hi]`.
///
/// Bin `b` covers `(lo + b·w, lo + (b+1)·w]` with width `w = (hi − lo)/B`;
/// the first bin also takes `lo` itself, and out-of-range values clamp to the
/// boundary bins.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramDensity {
    pub lo: f64,
    pub hi: f64,
    pub mass: Vec<f64>,
}

impl HistogramDensity {
    pub fn bins(&self) -> usize {
        self.mass.len()
    }

    #[inline]
    pub fn bin_of(&self, v: f64) -> usize {
        bin_index(v, self.lo, self.hi, self.mass.len())
    }

    #[inline]
    pub fn at(&self, v: f64) -> f64 {
        self.mass[self.bin_of(v)]
    }

    fn same_binning(&self, other: &HistogramDensity) -> bool {
        self.lo == other.lo && self.hi == other.hi && self.bins() == other.bins()
    }
}

#[inline]
fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if bins <= 1 {
        return 0;
    }
    let t = (v - lo) / (hi - lo) * bins as f64;
    let idx = t.ceil() - 1.0;
    if idx <= 0.0 {
        0
    } else if idx >= (bins - 1) as f64 {
        bins - 1
    } else {
        idx as usize
    }
}

fn smoothed(counts: &[f64], total: f64) -> Vec<f64> {
    let b = counts.len() as f64;
    // (1 − Bε)·p + ε keeps every bin at least ε and the total exactly 1.
    counts
        .iter()
        .map(|&n| (1.0 - b * SMOOTHING) * (n / total) + SMOOTHING)
        .collect()
}

/// Histogram of `values` over `[lo, hi]` with `bins` bins, smoothed.
pub fn estimate_density(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<HistogramDensity> {
    if values.is_empty() {
        return Err(Error::Estimation(
            "no values to estimate a density from".into(),
        ));
    }
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Estimation(format!("invalid range [{lo}, {hi}]")));
    }
    if bins == 0 {
        return Err(Error::Estimation("bin count must be positive".into()));
    }
    let mut counts = vec![0.0; bins];
    for &v in values {
        counts[bin_index(v, lo, hi, bins)] += 1.0;
    }
    Ok(HistogramDensity {
        lo,
        hi,
        mass: smoothed(&counts, values.len() as f64),
    })
}

/// `Σ_b p_b ln(p_b / q_b)`.
pub fn kl_divergence(p: &HistogramDensity, q: &HistogramDensity) -> Result<f64> {
    if !p.same_binning(q) {
        return Err(Error::Dimension(format!(
            "binning mismatch: [{}, {}]/{} vs [{}, {}]/{}",
            p.lo,
            p.hi,
            p.bins(),
            q.lo,
            q.hi,
            q.bins()
        )));
    }
    Ok(p.mass
        .iter()
        .zip(&q.mass)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum())
}

/// Foreground/background densities of one projected column.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnDensity {
    pub fg: HistogramDensity,
    pub bg: HistogramDensity,
    pub kl: f64,
}

impl ColumnDensity {
    /// `f_b ln(f_b / g_b)` for every bin.
    pub fn pointwise(&self) -> Vec<f64> {
        self.fg
            .mass
            .iter()
            .zip(&self.bg.mass)
            .map(|(&f, &g)| f * (f / g).ln())
            .collect()
    }
}

/// Frozen class-conditional densities for every projected column.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingModel {
    pub columns: Vec<ColumnDensity>,
}

impl RankingModel {
    pub fn class_count(&self) -> usize {
        self.columns.len()
    }

    pub fn column_kl(&self) -> Vec<f64> {
        self.columns.iter().map(|c| c.kl).collect()
    }
}

/// Per-instance multipartite scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
}

/// Fits one foreground/background density pair per column of `projected`;
/// column `i` treats class `i` as foreground.
pub fn fit_ranking(projected: &Matrix, labels: &[usize], bins: usize) -> Result<RankingModel> {
    let (n, c) = projected.shape();
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    if c < 2 {
        return Err(Error::DegenerateLabels(format!(
            "one-versus-rest ranking needs at least 2 classes, got {c}"
        )));
    }
    let mut sizes = vec![0usize; c];
    for &l in labels {
        if l >= c {
            return Err(Error::DegenerateLabels(format!(
                "label {l} has no column in a {c}-column projection"
            )));
        }
        sizes[l] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::DegenerateLabels(format!(
            "class {empty} has no rows"
        )));
    }

    let mut columns = Vec::with_capacity(c);
    for i in 0..c {
        let col = projected.column(i);
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if !(hi - lo > 1e-12 * lo.abs().max(hi.abs()).max(1.0)) {
            let single = HistogramDensity {
                lo,
                hi: lo,
                mass: vec![1.0],
            };
            columns.push(ColumnDensity {
                fg: single.clone(),
                bg: single,
                kl: 0.0,
            });
            continue;
        }
        let (fg, bg): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
            labels.iter().copied().zip(col).partition(|(l, _)| *l == i);
        let fg: Vec<f64> = fg.into_iter().map(|(_, v)| v).collect();
        let bg: Vec<f64> = bg.into_iter().map(|(_, v)| v).collect();
        let fg = estimate_density(&fg, lo, hi, bins)?;
        let bg = estimate_density(&bg, lo, hi, bins)?;
        let kl = kl_divergence(&fg, &bg)?.max(0.0);
        columns.push(ColumnDensity { fg, bg, kl });
    }
    Ok(RankingModel { columns })
}

/// Scores every row of `projected` against a frozen model.
pub fn score_instances(projected: &Matrix, model: &RankingModel) -> Result<ScoreVector> {
    score_instances_with(Exec::default(), projected, model)
}

/// [`score_instances`] with an explicit execution policy. Rows are scored
/// independently, so the policy never changes the result.
pub fn score_instances_with(
    exec: Exec,
    projected: &Matrix,
    model: &RankingModel,
) -> Result<ScoreVector> {
    let c = model.class_count();
    if projected.cols() != c {
        return Err(Error::Dimension(format!(
            "projected set has {} columns, model has {c}",
            projected.cols()
        )));
    }
    let tables: Vec<Vec<f64>> = model.columns.iter().map(ColumnDensity::pointwise).collect();
    let mut scores = vec![0.0; projected.rows()];
    const BLOCK: usize = 4096;
    exec::for_each_chunk_mut(exec, &mut scores, BLOCK, |blk, out| {
        let start = blk * BLOCK;
        for (k, s) in out.iter_mut().enumerate() {
            let row = projected.row(start + k);
            let mut acc = 0.0;
            for ((col, table), &v) in model.columns.iter().zip(&tables).zip(row) {
                acc += table[col.fg.bin_of(v)];
            }
            *s = acc;
        }
    });
    Ok(ScoreVector { scores })
}

/// Projects `data` and scores the result. Takes no labels, so the same call
/// serves training and test data.
pub fn rank_instances(
    data: &Matrix,
    proj: &Projection,
    model: &RankingModel,
) -> Result<ScoreVector> {
    score_instances(&project(data, proj)?, model)
}
