//! Nonnegative feature maps for kernelized attention.
//!
//! The default map is a simplex random feature map: positive random
//! features `sqrt(1/m) exp(-|a|^2/2) exp(W a)` whose projection rows are
//! `W = D S R0`, with `S` the rows of a regular simplex, `R0` Haar-random
//! orthogonal and `D` independent chi-distributed norms. Its inner products
//! are unbiased estimates of `exp(q . k)`.
//!
//! The remaining kinds (`positive_rf` with iid Gaussian rows, `elu1`,
//! `relu`, `focused`) exist for ablations.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest exponent fed to `exp` before clamping.
const MAX_LOG: f64 = 700.0;
/// Offset added after the relu in the focused map so outputs stay positive.
const FOCUSED_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMapKind {
    #[serde(rename = "simrf")]
    SimRf,
    #[serde(rename = "positive_rf")]
    PositiveRf,
    Elu1,
    Relu,
    Focused,
}

impl FeatureMapKind {
    pub fn tag(self) -> u8 {
        match self {
            FeatureMapKind::SimRf => 0,
            FeatureMapKind::PositiveRf => 1,
            FeatureMapKind::Elu1 => 2,
            FeatureMapKind::Relu => 3,
            FeatureMapKind::Focused => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => FeatureMapKind::SimRf,
            1 => FeatureMapKind::PositiveRf,
            2 => FeatureMapKind::Elu1,
            3 => FeatureMapKind::Relu,
            4 => FeatureMapKind::Focused,
            _ => return None,
        })
    }

    pub fn is_random(self) -> bool {
        matches!(self, FeatureMapKind::SimRf | FeatureMapKind::PositiveRf)
    }
}

impl fmt::Display for FeatureMapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureMapKind::SimRf => "simrf",
            FeatureMapKind::PositiveRf => "positive_rf",
            FeatureMapKind::Elu1 => "elu1",
            FeatureMapKind::Relu => "relu",
            FeatureMapKind::Focused => "focused",
        };
        f.write_str(s)
    }
}

impl FromStr for FeatureMapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simrf" => Ok(FeatureMapKind::SimRf),
            "positive_rf" => Ok(FeatureMapKind::PositiveRf),
            "elu1" => Ok(FeatureMapKind::Elu1),
            "relu" => Ok(FeatureMapKind::Relu),
            "focused" => Ok(FeatureMapKind::Focused),
            other => Err(Error::invalid(format!("unknown feature map `{other}`"))),
        }
    }
}

/// How the exponent of a random-feature map is shifted before `exp`.
///
/// A shift shared by every key, or by all features of one query, cancels in
/// the attention ratio, so shifted features give identical outputs while
/// staying in floating-point range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shift {
    /// Exact values, exponent clamped at `MAX_LOG`.
    None,
    /// Subtract each row's maximum exponent.
    PerRow,
    /// Subtract the maximum exponent over the whole batch.
    Global,
}

/// A frozen feature map `R^m -> R^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub kind: FeatureMapKind,
    pub dim: usize,
    pub seed: u64,
    /// `m x m` projection rows for random-feature kinds.
    pub w: Option<Array2<f64>>,
    /// Exponent of the focused map.
    pub focus_power: f64,
}

/// Rows of a regular simplex inscribed in the unit sphere, padded to `m x m`.
pub fn build_simplex_rows(m: usize) -> Result<Array2<f64>> {
    if m < 2 {
        return Err(Error::invalid(format!(
            "simplex dimension must be >= 2, got {m}"
        )));
    }
    let mf = m as f64;
    let mut s = Array2::zeros((m, m));
    let head = (mf / (mf - 1.0)).sqrt();
    let tail = (mf.sqrt() + 1.0) / (mf - 1.0).powf(1.5);
    for i in 0..m - 1 {
        for j in 0..m - 1 {
            s[[i, j]] = -tail;
        }
        s[[i, i]] += head;
    }
    let last = 1.0 / (mf - 1.0).sqrt();
    for j in 0..m - 1 {
        s[[m - 1, j]] = last;
    }
    Ok(s)
}

/// Haar-distributed orthogonal matrix via sign-corrected QR of a Gaussian draw.
pub fn haar_orthogonal(m: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let g: DMatrix<f64> = DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(&mut *rng));
    let qr = g.qr();
    let q = qr.q();
    let r = qr.r();
    Array2::from_shape_fn((m, m), |(i, j)| {
        let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        q[(i, j)] * sign
    })
}

/// `m` independent chi(m) draws.
pub fn sample_chi(m: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let chi2 = ChiSquared::new(m as f64).expect("positive degrees of freedom");
    Array1::from_shape_fn(m, |_| chi2.sample(&mut *rng).sqrt())
}

/// The three factors of a simplex random-feature projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRfParts {
    pub norms: Array1<f64>,
    pub simplex: Array2<f64>,
    pub rotation: Array2<f64>,
}

impl SimRfParts {
    pub fn draw(m: usize, seed: u64) -> Result<Self> {
        let simplex = build_simplex_rows(m)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rotation = haar_orthogonal(m, &mut rng);
        let norms = sample_chi(m, &mut rng);
        Ok(Self {
            norms,
            simplex,
            rotation,
        })
    }

    /// `W = D S R0`.
    pub fn projection(&self) -> Array2<f64> {
        let mut w = self.simplex.dot(&self.rotation);
        for (mut row, d) in w.axis_iter_mut(Axis(0)).zip(self.norms.iter()) {
            row *= *d;
        }
        w
    }
}

pub fn build_simrf_map(m: usize, seed: u64) -> Result<FeatureMap> {
    let parts = SimRfParts::draw(m, seed)?;
    Ok(FeatureMap {
        kind: FeatureMapKind::SimRf,
        dim: m,
        seed,
        w: Some(parts.projection()),
        focus_power: 3.0,
    })
}

/// Positive random features with iid standard Gaussian rows.
pub fn build_positive_rf_map(m: usize, seed: u64) -> Result<FeatureMap> {
    if m == 0 {
        return Err(Error::invalid("feature dimension must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Array2::from_shape_fn((m, m), |_| StandardNormal.sample(&mut rng));
    Ok(FeatureMap {
        kind: FeatureMapKind::PositiveRf,
        dim: m,
        seed,
        w: Some(w),
        focus_power: 3.0,
    })
}

impl FeatureMap {
    pub fn new(kind: FeatureMapKind, m: usize, seed: u64, focus_power: f64) -> Result<Self> {
        let mut map = match kind {
            FeatureMapKind::SimRf => build_simrf_map(m, seed)?,
            FeatureMapKind::PositiveRf => build_positive_rf_map(m, seed)?,
            _ => {
                if m == 0 {
                    return Err(Error::invalid("feature dimension must be positive"));
                }
                FeatureMap {
                    kind,
                    dim: m,
                    seed,
                    w: None,
                    focus_power,
                }
            }
        };
        if !(focus_power.is_finite() && focus_power >= 1.0) {
            return Err(Error::invalid(format!(
                "focused power must be >= 1, got {focus_power}"
            )));
        }
        map.focus_power = focus_power;
        Ok(map)
    }

    /// Exact feature vector of a single input.
    pub fn apply(&self, a: ArrayView1<f64>) -> Result<Array1<f64>> {
        if a.len() != self.dim {
            return Err(Error::Shape {
                op: "apply_feature_map",
                expected: self.dim.to_string(),
                actual: a.len().to_string(),
            });
        }
        if a.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("feature map input".into()));
        }
        let rows = a.insert_axis(Axis(0));
        Ok(self.apply_rows(rows, Shift::None).row(0).to_owned())
    }

    fn projection(&self) -> &Array2<f64> {
        self.w
            .as_ref()
            .expect("random-feature map carries a projection")
    }

    /// Feature vectors of every row of `a`. `shift` applies only to the
    /// random-feature kinds.
    pub fn apply_rows(&self, a: ArrayView2<f64>, shift: Shift) -> Array2<f64> {
        self.apply_rows_offset(a, shift).0
    }

    /// [`apply_rows`](Self::apply_rows) plus the exponent offset `c` a
    /// global shift subtracted: the features equal `exp(-c)` times the
    /// exact ones. Zero for every other shift and kind.
    pub fn apply_rows_offset(&self, a: ArrayView2<f64>, shift: Shift) -> (Array2<f64>, f64) {
        match self.kind {
            FeatureMapKind::SimRf | FeatureMapKind::PositiveRf => {
                let mut logits = a.dot(&self.projection().t());
                let log_scale = -0.5 * (self.dim as f64).ln();
                for (mut row, x) in logits.axis_iter_mut(Axis(0)).zip(a.axis_iter(Axis(0))) {
                    let half_sq = 0.5 * x.dot(&x);
                    row.mapv_inplace(|l| l - half_sq + log_scale);
                }
                let mut offset = 0.0;
                match shift {
                    Shift::None => logits.mapv_inplace(|l| l.min(MAX_LOG).exp()),
                    Shift::PerRow => {
                        for mut row in logits.axis_iter_mut(Axis(0)) {
                            let c = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v)) - log_scale;
                            row.mapv_inplace(|l| (l - c).exp());
                        }
                    }
                    Shift::Global => {
                        offset = logits.fold(f64::NEG_INFINITY, |m, v| m.max(*v)) - log_scale;
                        logits.mapv_inplace(|l| (l - offset).exp());
                    }
                }
                (logits, offset)
            }
            FeatureMapKind::Elu1 => (a.mapv(|x| if x > 0.0 { x + 1.0 } else { x.exp() }), 0.0),
            FeatureMapKind::Relu => (a.mapv(|x| x.max(0.0)), 0.0),
            FeatureMapKind::Focused => {
                let mut out = Array2::zeros(a.raw_dim());
                for (mut o, x) in out.axis_iter_mut(Axis(0)).zip(a.axis_iter(Axis(0))) {
                    let r = x.mapv(|v| v.max(0.0) + FOCUSED_EPS);
                    let t = r.mapv(|v| v.powf(self.focus_power));
                    let scale = r.dot(&r).sqrt() / t.dot(&t).sqrt();
                    o.assign(&(t * scale));
                }
                (out, 0.0)
            }
        }
    }

    /// Reverse-mode pass: given inputs `a`, outputs `phi` from
    /// [`apply_rows`](Self::apply_rows) and upstream `dphi`, returns `da`.
    /// Any shift is treated as a constant, which is exact because it cancels
    /// downstream.
    pub fn backward_rows(
        &self,
        a: ArrayView2<f64>,
        phi: ArrayView2<f64>,
        dphi: ArrayView2<f64>,
    ) -> Array2<f64> {
        match self.kind {
            FeatureMapKind::SimRf | FeatureMapKind::PositiveRf => {
                let g = &dphi * &phi;
                let mut da = g.dot(self.projection());
                for ((mut row, x), gs) in da
                    .axis_iter_mut(Axis(0))
                    .zip(a.axis_iter(Axis(0)))
                    .zip(g.sum_axis(Axis(1)).iter())
                {
                    row.scaled_add(-*gs, &x);
                }
                da
            }
            FeatureMapKind::Elu1 => {
                let mut da = dphi.to_owned();
                da.zip_mut_with(&a, |d, &x| {
                    if x <= 0.0 {
                        *d *= x.exp();
                    }
                });
                da
            }
            FeatureMapKind::Relu => {
                let mut da = dphi.to_owned();
                da.zip_mut_with(&a, |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                da
            }
            FeatureMapKind::Focused => {
                let p = self.focus_power;
                let mut da = Array2::zeros(a.raw_dim());
                for ((mut out, x), up) in da
                    .axis_iter_mut(Axis(0))
                    .zip(a.axis_iter(Axis(0)))
                    .zip(dphi.axis_iter(Axis(0)))
                {
                    let r = x.mapv(|v| v.max(0.0) + FOCUSED_EPS);
                    let t = r.mapv(|v| v.powf(p));
                    let nr = r.dot(&r).sqrt();
                    let nt = t.dot(&t).sqrt();
                    let scale = nr / nt;
                    let g = up.dot(&t);
                    // phi = (|r| / |t|) t
                    let dt = &up * scale - &t * (g * nr / (nt * nt * nt));
                    for k in 0..r.len() {
                        if x[k] > 0.0 {
                            out[k] = dt[k] * p * r[k].powf(p - 1.0) + g / nt * r[k] / nr;
                        }
                    }
                }
                da
            }
        }
    }
}
