//! Distances between point sets: Chamfer (L1 and L2), density-aware Chamfer,
//! F-score and minimal matching distance.

use std::collections::BTreeMap;

use pcomplete_tensor::{Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::pointops::nearest;

/// Default DCD temperature.
pub const DCD_ALPHA: f64 = 1000.0;
/// Default F-score threshold (1% of the unit extent).
pub const FSCORE_TAU: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChamferVariant {
    /// `½ (mean_x d(x, Y) + mean_y d(y, X))`
    #[default]
    L1,
    /// `mean_x d(x, Y)² + mean_y d(y, X)²`
    L2,
}

impl std::str::FromStr for ChamferVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            other => Err(Error::Config(format!("unknown chamfer variant `{other}` (expected l1 or l2)"))),
        }
    }
}

fn non_empty<T: Scalar>(op: &'static str, clouds: &[&PointCloud<T>]) -> Result<()> {
    if clouds.iter().any(|c| c.is_empty()) {
        return Err(Error::pre(op, "point clouds must be non-empty"));
    }
    Ok(())
}

fn mean<T: Scalar>(v: impl Iterator<Item = T>) -> T {
    let (s, n) = v.fold((T::zero(), 0usize), |(s, n), x| (s + x, n + 1));
    s / T::of(n as f64)
}

pub fn chamfer<T: Scalar>(x: &PointCloud<T>, y: &PointCloud<T>, variant: ChamferVariant) -> Result<T> {
    non_empty("chamfer", &[x, y])?;
    let xy = nearest(x, y);
    let yx = nearest(y, x);
    Ok(match variant {
        ChamferVariant::L1 => {
            let a = mean(xy.iter().map(|e| e.1.sqrt()));
            let b = mean(yx.iter().map(|e| e.1.sqrt()));
            T::of(0.5) * (a + b)
        }
        ChamferVariant::L2 => mean(xy.iter().map(|e| e.1)) + mean(yx.iter().map(|e| e.1)),
    })
}

/// One direction of DCD: `mean_x (1 - e^{-α d²} / n_ŷ)`.
fn dcd_side<T: Scalar>(x: &PointCloud<T>, y: &PointCloud<T>, alpha: T) -> T {
    let nn = nearest(x, y);
    let mut counts = vec![0usize; y.len()];
    for &(j, _) in &nn {
        counts[j] += 1;
    }
    mean(nn.iter().map(|&(j, d2)| T::one() - (-alpha * d2).exp() / T::of(counts[j] as f64)))
}

/// Density-aware Chamfer distance, bounded in `[0, 1]`.
pub fn dcd<T: Scalar>(x: &PointCloud<T>, y: &PointCloud<T>, alpha: T) -> Result<T> {
    non_empty("dcd", &[x, y])?;
    if !(alpha > T::zero()) {
        return Err(Error::pre("dcd", "alpha must be positive"));
    }
    Ok(T::of(0.5) * (dcd_side(x, y, alpha) + dcd_side(y, x, alpha)))
}

/// F-score at threshold `tau`: a point counts when its nearest distance to the
/// other set is strictly below `tau`.
pub fn fscore<T: Scalar>(pred: &PointCloud<T>, gt: &PointCloud<T>, tau: T) -> Result<T> {
    non_empty("fscore", &[pred, gt])?;
    if !(tau > T::zero()) {
        return Err(Error::pre("fscore", "tau must be positive"));
    }
    let tau2 = tau * tau;
    let frac = |a: &PointCloud<T>, b: &PointCloud<T>| {
        let hits = nearest(a, b).iter().filter(|e| e.1 < tau2).count();
        T::of(hits as f64 / a.len() as f64)
    };
    let p = frac(pred, gt);
    let r = frac(gt, pred);
    if p + r == T::zero() {
        return Ok(T::zero());
    }
    Ok(T::of(2.0) * p * r / (p + r))
}

/// Minimal matching distance: mean over outputs of the smallest Chamfer
/// distance to any reference.
pub fn mmd<T: Scalar>(outputs: &[PointCloud<T>], references: &[PointCloud<T>], variant: ChamferVariant) -> Result<T> {
    if outputs.is_empty() || references.is_empty() {
        return Err(Error::pre("mmd", "output and reference lists must be non-empty"));
    }
    let mut total = T::zero();
    for o in outputs {
        let mut best = T::infinity();
        for r in references {
            best = best.min(chamfer(o, r, variant)?);
        }
        total += best;
    }
    Ok(total / T::of(outputs.len() as f64))
}

/// Per-pair evaluation result.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub dcd: f64,
    pub f1: f64,
}

impl MetricReport {
    pub fn evaluate<T: Scalar>(pred: &PointCloud<T>, gt: &PointCloud<T>, alpha: f64, tau: f64) -> Result<Self> {
        Ok(Self {
            cd_l1: chamfer(pred, gt, ChamferVariant::L1)?.to_f64_lossy(),
            cd_l2: chamfer(pred, gt, ChamferVariant::L2)?.to_f64_lossy(),
            dcd: dcd(pred, gt, T::of(alpha))?.to_f64_lossy(),
            f1: fscore(pred, gt, T::of(tau))?.to_f64_lossy(),
        })
    }

    pub fn mean(rows: &[MetricReport]) -> MetricReport {
        let n = rows.len().max(1) as f64;
        let mut m = rows.iter().fold(MetricReport::default(), |a, r| MetricReport {
            cd_l1: a.cd_l1 + r.cd_l1,
            cd_l2: a.cd_l2 + r.cd_l2,
            dcd: a.dcd + r.dcd,
            f1: a.f1 + r.f1,
        });
        m.cd_l1 /= n;
        m.cd_l2 /= n;
        m.dcd /= n;
        m.f1 /= n;
        m
    }

    /// Mean report per category tag.
    pub fn by_category<'a>(rows: impl IntoIterator<Item = (&'a str, MetricReport)>) -> BTreeMap<String, MetricReport> {
        let mut groups: BTreeMap<String, Vec<MetricReport>> = BTreeMap::new();
        for (cat, r) in rows {
            groups.entry(cat.to_string()).or_default().push(r);
        }
        groups.into_iter().map(|(k, v)| (k, Self::mean(&v))).collect()
    }
}

/// Mean nearest distance (or squared distance) from the rows of `pred` to
/// `target`, differentiable in `pred`. Nearest assignments are fixed per call.
fn directed_pred_to_target<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pred: Var,
    target: Var,
    variant: ChamferVariant,
) -> Result<Var> {
    let p = PointCloud::from_tensor(tape.value(pred))?;
    let t = PointCloud::from_tensor(tape.value(target))?;
    let idx: Vec<usize> = nearest(&p, &t).into_iter().map(|e| e.0).collect();
    let matched = tape.select_rows(target, &idx)?;
    let d = tape.sub(pred, matched)?;
    distance_mean(tape, d, variant)
}

fn distance_mean<T: Scalar>(tape: &mut Tape<'_, T>, diff: Var, variant: ChamferVariant) -> Result<Var> {
    let n = match variant {
        ChamferVariant::L1 => tape.row_norm(diff)?,
        ChamferVariant::L2 => tape.row_sq_norm(diff)?,
    };
    Ok(tape.mean(n))
}

/// Chamfer distance between `[N, 3]` tensors on a tape, following the same
/// conventions as [`chamfer`].
pub fn chamfer_on_tape<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, y: Var, variant: ChamferVariant) -> Result<Var> {
    let a = directed_pred_to_target(tape, x, y, variant)?;
    let b = directed_pred_to_target(tape, y, x, variant)?;
    let s = tape.add(a, b)?;
    Ok(match variant {
        ChamferVariant::L1 => tape.scale(s, T::of(0.5)),
        ChamferVariant::L2 => s,
    })
}

/// One-sided mean distance from every `from` row to its nearest `to` row.
pub fn one_sided_on_tape<T: Scalar>(tape: &mut Tape<'_, T>, from: Var, to: Var, variant: ChamferVariant) -> Result<Var> {
    directed_pred_to_target(tape, from, to, variant)
}
