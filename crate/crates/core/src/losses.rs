//! Saliency training objective: KL divergence, one minus Pearson correlation,
//! and normalized scanpath saliency, with analytic gradients in the
//! prediction.
//!
//! All statistics use the population standard deviation. Slice-level
//! functions take raw grids so gradients can be probed outside `[0,1]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{cfg_err, dim_err, Error, Result};
use crate::heatmap::SaliencyHeatmap;

/// Keeps the KLD ratio and logarithm finite.
pub const KLD_EPS: f64 = 1e-6;
/// Added to both standard deviations inside NSS.
pub const NSS_STD_EPS: f64 = 1e-6;
/// Ground-truth level at or above which a pixel counts as a fixation.
pub const FIXATION_LEVEL: f64 = 0.5;

/// Binary fixation map: 1 where the ground-truth heatmap is at least 0.5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixationMap {
    pub height: usize,
    pub width: usize,
    pub grid: Vec<u8>,
}

impl FixationMap {
    pub fn from_heatmap(gt: &SaliencyHeatmap) -> Self {
        Self {
            height: gt.height(),
            width: gt.width(),
            grid: fixations(gt.data()),
        }
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&f| f == 1).count()
    }
}

fn fixations(gt: &[f64]) -> Vec<u8> {
    gt.iter().map(|&g| u8::from(g >= FIXATION_LEVEL)).collect()
}

/// Which loss terms are summed into the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LossFlags {
    pub kld: bool,
    pub cc: bool,
    pub nss: bool,
    /// Divide both maps by their sums before the KLD term. Off by default:
    /// the maps are max-normalized and used as they are.
    pub kld_sum_normalized: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self { kld: true, cc: true, nss: true, kld_sum_normalized: false }
    }
}

impl LossFlags {
    pub const fn only_kld() -> Self {
        Self { kld: true, cc: false, nss: false, kld_sum_normalized: false }
    }

    pub const fn only_cc() -> Self {
        Self { kld: false, cc: true, nss: false, kld_sum_normalized: false }
    }

    pub const fn only_nss() -> Self {
        Self { kld: false, cc: false, nss: true, kld_sum_normalized: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kld || self.cc || self.nss) {
            return Err(cfg_err!("at least one loss component must be enabled"));
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation. Disabled terms are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub kld: Option<f64>,
    pub cc: Option<f64>,
    pub nss: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Element-wise mean over several evaluations with the same flags.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> Option<f64>| -> Option<f64> {
            let vals: Option<Vec<f64>> = items.iter().map(f).collect();
            vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / n)
        };
        LossBreakdown {
            kld: avg(|b| b.kld),
            cc: avg(|b| b.cc),
            nss: avg(|b| b.nss),
            total: items.iter().map(|b| b.total).sum::<f64>() / n,
        }
    }
}

fn check_len(gt: &[f64], pred: &[f64]) -> Result<()> {
    if gt.len() != pred.len() || gt.is_empty() {
        return Err(dim_err!("loss inputs have {} and {} entries", gt.len(), pred.len()));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|v| *v == x[0])
}

/// `Σ G log(ε + G/(P + ε))`.
pub fn kld(gt: &[f64], pred: &[f64]) -> Result<f64> {
    check_len(gt, pred)?;
    Ok(gt
        .iter()
        .zip(pred)
        .filter(|(g, _)| **g != 0.0)
        .map(|(g, p)| g * libm::log(KLD_EPS + g / (p + KLD_EPS)))
        .sum())
}

fn kld_grad_into(gt: &[f64], pred: &[f64], scale: f64, grad: &mut [f64]) {
    for ((d, g), p) in grad.iter_mut().zip(gt).zip(pred) {
        if *g == 0.0 {
            continue;
        }
        let q = p + KLD_EPS;
        let r = g / q;
        *d += scale * g / (KLD_EPS + r) * (-r / q);
    }
}

fn sum_normalized(x: &[f64]) -> (Vec<f64>, f64) {
    let s = x.iter().sum::<f64>() + KLD_EPS;
    (x.iter().map(|v| v / s).collect(), s)
}

/// KLD after dividing both maps by their sums.
pub fn kld_sum_normalized(gt: &[f64], pred: &[f64]) -> Result<f64> {
    check_len(gt, pred)?;
    kld(&sum_normalized(gt).0, &sum_normalized(pred).0)
}

fn kld_sum_normalized_grad_into(gt: &[f64], pred: &[f64], scale: f64, grad: &mut [f64]) {
    let (gn, _) = sum_normalized(gt);
    let (pn, s) = sum_normalized(pred);
    let mut inner = vec![0.0; pred.len()];
    kld_grad_into(&gn, &pn, 1.0, &mut inner);
    // p'_i = p_i / s with s = Σp + ε.
    let dot: f64 = inner.iter().zip(&pn).map(|(a, b)| a * b).sum();
    for (d, v) in grad.iter_mut().zip(&inner) {
        *d += scale * (v - dot) / s;
    }
}

/// `1 − cov(P, G) / (σ(P) σ(G))`.
pub fn cc(gt: &[f64], pred: &[f64]) -> Result<f64> {
    Ok(1.0 - pearson(gt, pred)?.r)
}

struct Pearson {
    r: f64,
    gc: Vec<f64>,
    pc: Vec<f64>,
    sgg: f64,
    spp: f64,
}

fn pearson(gt: &[f64], pred: &[f64]) -> Result<Pearson> {
    check_len(gt, pred)?;
    if is_constant(gt) {
        return Err(Error::DegenerateVariance("ground truth"));
    }
    if is_constant(pred) {
        return Err(Error::DegenerateVariance("prediction"));
    }
    let (mg, mp) = (mean(gt), mean(pred));
    let gc: Vec<f64> = gt.iter().map(|g| g - mg).collect();
    let pc: Vec<f64> = pred.iter().map(|p| p - mp).collect();
    let sgg: f64 = gc.iter().map(|v| v * v).sum();
    let spp: f64 = pc.iter().map(|v| v * v).sum();
    let sgp: f64 = gc.iter().zip(&pc).map(|(a, b)| a * b).sum();
    let r = (sgp / libm::sqrt(sgg * spp)).clamp(-1.0, 1.0);
    Ok(Pearson { r, gc, pc, sgg, spp })
}

fn cc_grad_into(p: &Pearson, scale: f64, grad: &mut [f64]) {
    let norm = libm::sqrt(p.sgg * p.spp);
    for ((d, g), q) in grad.iter_mut().zip(&p.gc).zip(&p.pc) {
        *d -= scale * (g / norm - p.r * q / p.spp);
    }
}

/// Mean over fixations of `z(G) − z(P)`, where `z` standardizes with the
/// population standard deviation plus `1e-6`.
pub fn nss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_len(gt, pred)?;
    let fix = fixations(gt);
    let n_fix = fix.iter().filter(|&&f| f == 1).count();
    if n_fix == 0 {
        return Err(Error::NoFixations);
    }
    let zg = zscore(gt);
    let zp = zscore(pred);
    let s: f64 = fix
        .iter()
        .zip(zg.iter().zip(&zp))
        .filter(|(f, _)| **f == 1)
        .map(|(_, (a, b))| a - b)
        .sum();
    Ok(s / n_fix as f64)
}

fn std_pop(x: &[f64]) -> (f64, f64) {
    let m = mean(x);
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64;
    (m, libm::sqrt(var))
}

fn zscore(x: &[f64]) -> Vec<f64> {
    let (m, s) = std_pop(x);
    x.iter().map(|v| (v - m) / (s + NSS_STD_EPS)).collect()
}

fn nss_grad_into(pred: &[f64], gt: &[f64], scale: f64, grad: &mut [f64]) {
    let fix = fixations(gt);
    let n_fix = fix.iter().filter(|&&f| f == 1).count() as f64;
    let n = pred.len() as f64;
    let (m, sigma) = std_pop(pred);
    let s = sigma + NSS_STD_EPS;
    let fx: f64 = fix.iter().zip(pred).filter(|(f, _)| **f == 1).map(|(_, p)| p - m).sum();
    // dσ/dp_j = (p_j − μ)/(nσ), taken as 0 on a constant map.
    let dsigma = if sigma > 0.0 { 1.0 / (n * sigma) } else { 0.0 };
    for ((d, f), p) in grad.iter_mut().zip(&fix).zip(pred) {
        let dz = (f64::from(*f) - n_fix / n) / s - fx / (s * s) * (p - m) * dsigma;
        *d -= scale * dz / n_fix;
    }
}

/// Evaluates the enabled terms and their sum.
pub fn total(gt: &[f64], pred: &[f64], flags: &LossFlags) -> Result<LossBreakdown> {
    flags.validate()?;
    check_len(gt, pred)?;
    let kld_v = flags
        .kld
        .then(|| if flags.kld_sum_normalized { kld_sum_normalized(gt, pred) } else { kld(gt, pred) })
        .transpose()?;
    let cc_v = flags.cc.then(|| cc(gt, pred)).transpose()?;
    let nss_v = flags.nss.then(|| nss(pred, gt)).transpose()?;
    let total = kld_v.unwrap_or(0.0) + cc_v.unwrap_or(0.0) + nss_v.unwrap_or(0.0);
    Ok(LossBreakdown { kld: kld_v, cc: cc_v, nss: nss_v, total })
}

/// Like [`total`], also returning `∂total/∂pred`.
pub fn total_with_grad(gt: &[f64], pred: &[f64], flags: &LossFlags) -> Result<(LossBreakdown, Vec<f64>)> {
    let breakdown = total(gt, pred, flags)?;
    let mut grad = vec![0.0; pred.len()];
    if flags.kld {
        if flags.kld_sum_normalized {
            kld_sum_normalized_grad_into(gt, pred, 1.0, &mut grad);
        } else {
            kld_grad_into(gt, pred, 1.0, &mut grad);
        }
    }
    if flags.cc {
        cc_grad_into(&pearson(gt, pred)?, 1.0, &mut grad);
    }
    if flags.nss {
        nss_grad_into(pred, gt, 1.0, &mut grad);
    }
    Ok((breakdown, grad))
}

/// Gradient of a single term, for testing and diagnostics.
pub fn term_grad(term: Term, gt: &[f64], pred: &[f64]) -> Result<Vec<f64>> {
    check_len(gt, pred)?;
    let mut grad = vec![0.0; pred.len()];
    match term {
        Term::Kld => kld_grad_into(gt, pred, 1.0, &mut grad),
        Term::KldSumNormalized => kld_sum_normalized_grad_into(gt, pred, 1.0, &mut grad),
        Term::Cc => cc_grad_into(&pearson(gt, pred)?, 1.0, &mut grad),
        Term::Nss => {
            nss(pred, gt)?;
            nss_grad_into(pred, gt, 1.0, &mut grad)
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Kld,
    KldSumNormalized,
    Cc,
    Nss,
}

pub fn kld_loss(gt: &SaliencyHeatmap, pred: &SaliencyHeatmap) -> Result<f64> {
    gt.check_same_shape(pred)?;
    kld(gt.data(), pred.data())
}

pub fn cc_loss(gt: &SaliencyHeatmap, pred: &SaliencyHeatmap) -> Result<f64> {
    gt.check_same_shape(pred)?;
    cc(gt.data(), pred.data())
}

pub fn nss_loss(pred: &SaliencyHeatmap, gt: &SaliencyHeatmap) -> Result<f64> {
    gt.check_same_shape(pred)?;
    nss(pred.data(), gt.data())
}

pub fn total_loss(gt: &SaliencyHeatmap, pred: &SaliencyHeatmap, flags: &LossFlags) -> Result<LossBreakdown> {
    gt.check_same_shape(pred)?;
    total(gt.data(), pred.data(), flags)
}
