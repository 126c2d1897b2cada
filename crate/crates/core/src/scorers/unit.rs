//! Per-unit scores: mean replacement penalty (MRP), its first-order estimate
//! (MRS), incoming-weight norms and a random baseline.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_fingerprint, Batch};
use crate::error::{Error, Result};
use crate::hessian::DEFAULT_CHUNK;
use crate::nn::Network;

/// Units above this count make [`mrp`] refuse.
pub const DEFAULT_MRP_UNIT_CAP: usize = 512;
/// Default relative threshold of the frozen and dead detectors.
pub const DEFAULT_RELATIVE_TAU: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum UnitScorerKind {
    Mrp,
    Mrs,
    NormL1,
    NormL2sq,
    Random,
}

impl UnitScorerKind {
    pub const ALL: [UnitScorerKind; 5] = [
        UnitScorerKind::Mrp,
        UnitScorerKind::Mrs,
        UnitScorerKind::NormL1,
        UnitScorerKind::NormL2sq,
        UnitScorerKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnitScorerKind::Mrp => "mrp",
            UnitScorerKind::Mrs => "mrs",
            UnitScorerKind::NormL1 => "normL1",
            UnitScorerKind::NormL2sq => "normL2sq",
            UnitScorerKind::Random => "random",
        }
    }

    pub fn needs_data(self) -> bool {
        matches!(self, UnitScorerKind::Mrp | UnitScorerKind::Mrs)
    }
}

impl fmt::Display for UnitScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UnitScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        UnitScorerKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown unit scorer `{s}`")))
    }
}

/// Scores of every unit of one parametered layer. Data-dependent scores are
/// sums over samples; [`UnitScoreTable::mean`] divides by the sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitScoreTable {
    pub layer: usize,
    pub kind: UnitScorerKind,
    pub scores: Vec<f64>,
    /// Fingerprint of the samples the scores were computed on.
    pub eval_id: Option<u64>,
    pub samples: usize,
}

impl UnitScoreTable {
    pub fn new(layer: usize, kind: UnitScorerKind, scores: Vec<f64>) -> Self {
        UnitScoreTable {
            layer,
            kind,
            scores,
            eval_id: None,
            samples: 0,
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.samples.max(1) as f64;
        self.scores.iter().map(|s| s / n).collect()
    }
}

fn check_layer(net: &Network, p: usize) -> Result<()> {
    if p >= net.param_layer_count() {
        return Err(Error::invalid(format!("no parametered layer {p}")));
    }
    Ok(())
}

fn check_data(data: &Batch) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid(
            "unit scores need a non-empty evaluation set",
        ));
    }
    Ok(())
}

/// A copy of `net` without active mean replacement, or `net` itself.
fn plain(net: &Network) -> std::borrow::Cow<'_, Network> {
    let active = (0..net.param_layer_count()).any(|p| net.replacer(p).enabled.iter().any(|&e| e));
    if active {
        let mut n = net.clone();
        n.clear_replacement();
        std::borrow::Cow::Owned(n)
    } else {
        std::borrow::Cow::Borrowed(net)
    }
}

/// Mean layer output (before the nonlinearity) of every unit of layer `p`,
/// over samples and, for conv units, spatial positions.
pub fn unit_means(net: &Network, p: usize, data: &Batch) -> Result<Vec<f64>> {
    check_layer(net, p)?;
    check_data(data)?;
    let net = plain(net);
    let li = net.spec_index(p);
    let units = net.units(p);
    let mut sums = vec![0.0; units];
    let mut per_unit = 0;
    for part in data.chunks(DEFAULT_CHUNK) {
        let h = net.output_of(&part.images, li)?;
        per_unit = h.row_len() / units;
        for s in 0..h.rows() {
            for (u, block) in h.row(s).chunks(per_unit).enumerate() {
                sums[u] += block.iter().sum::<f64>();
            }
        }
    }
    let count = (data.len() * per_unit) as f64;
    Ok(sums.into_iter().map(|s| s / count).collect())
}

/// `MRP_i = Σ_k |L_k(unit i's output ← μ_i) − L_k|`.
pub fn mrp(net: &Network, p: usize, data: &Batch, cap: usize) -> Result<UnitScoreTable> {
    check_layer(net, p)?;
    check_data(data)?;
    let units = net.units(p);
    if units > cap {
        return Err(Error::CapExceeded {
            what: "mean replacement penalty",
            needed: units,
            cap,
            advice: "use the mrs estimate instead",
        });
    }
    let means = unit_means(net, p, data)?;
    let all: Vec<usize> = (0..units).collect();
    let scores = mrp_of(net, p, data, &means, &all)?;
    Ok(UnitScoreTable {
        layer: p,
        kind: UnitScorerKind::Mrp,
        scores,
        eval_id: Some(batch_fingerprint(data)),
        samples: data.len(),
    })
}

/// MRP of the listed units of layer `p`, given the layer's unit means.
pub fn mrp_of(
    net: &Network,
    p: usize,
    data: &Batch,
    means: &[f64],
    units: &[usize],
) -> Result<Vec<f64>> {
    check_layer(net, p)?;
    check_data(data)?;
    let n_units = net.units(p);
    if means.len() != n_units || units.iter().any(|&u| u >= n_units) {
        return Err(Error::shape(format!("means or units do not fit layer {p}")));
    }
    let net = plain(net);
    let li = net.spec_index(p);
    let mut scores = vec![0.0; units.len()];
    for part in data.chunks(DEFAULT_CHUNK) {
        let h = net.output_of(&part.images, li)?;
        let base = net.losses_from(li + 1, &h, &part.labels);
        let per_unit = h.row_len() / n_units;
        for (score, &u) in scores.iter_mut().zip(units) {
            let mut replaced = h.clone();
            for s in 0..replaced.rows() {
                replaced.row_mut(s)[u * per_unit..(u + 1) * per_unit].fill(means[u]);
            }
            let losses = net.losses_from(li + 1, &replaced, &part.labels);
            *score += losses
                .iter()
                .zip(&base)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        }
    }
    Ok(scores)
}

/// Per-unit quantities gathered in one forward and backward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSweep {
    /// `Σ_k |Σ_pos (μ_i − h_k,i,pos)·∂L_k/∂h_k,i,pos|`.
    pub mrs: Vec<f64>,
    /// `max_k,pos |∂L_k/∂h_k,i,pos|`.
    pub grad_max: Vec<f64>,
    /// L1 norm of the unit's slice of `∂(mean L)/∂h`.
    pub grad_l1: Vec<f64>,
    /// Weight-gradient L1 norm of each unit under the mean loss.
    pub weight_grad_l1: Vec<f64>,
}

pub fn unit_sweep(net: &Network, p: usize, data: &Batch, means: &[f64]) -> Result<UnitSweep> {
    check_layer(net, p)?;
    check_data(data)?;
    let units = net.units(p);
    if means.len() != units {
        return Err(Error::shape(format!(
            "{} means for {units} units",
            means.len()
        )));
    }
    let mut work = net.clone();
    work.clear_replacement();
    let li = work.spec_index(p);
    let total = data.len() as f64;
    let mut out = UnitSweep {
        mrs: vec![0.0; units],
        grad_max: vec![0.0; units],
        grad_l1: vec![0.0; units],
        weight_grad_l1: vec![0.0; units],
    };
    let mut wgrad = vec![0.0; work.params()[p].weight.len()];
    for part in data.chunks(DEFAULT_CHUNK) {
        let n = part.len() as f64;
        work.forward(&part.images, &part.labels)?;
        let g = work.backward()?;
        let h = work.cached_output(li).expect("forward just ran");
        let go = &g.outputs[li];
        let per_unit = h.row_len() / units;
        for s in 0..h.rows() {
            let (hr, gr) = (h.row(s), go.row(s));
            for u in 0..units {
                let r = u * per_unit..(u + 1) * per_unit;
                let mut first_order = 0.0;
                for (hv, gv) in hr[r.clone()].iter().zip(&gr[r]) {
                    let per_sample = n * gv;
                    first_order += (means[u] - hv) * per_sample;
                    out.grad_max[u] = out.grad_max[u].max(per_sample.abs());
                    out.grad_l1[u] += (gv * n / total).abs();
                }
                out.mrs[u] += first_order.abs();
            }
        }
        for (acc, v) in wgrad.iter_mut().zip(g.weight[p].data()) {
            *acc += v * n / total;
        }
    }
    let row = work.params()[p].fan_in();
    for (u, l1) in out.weight_grad_l1.iter_mut().enumerate() {
        *l1 = wgrad[u * row..(u + 1) * row].iter().map(|v| v.abs()).sum();
    }
    Ok(out)
}

/// First-order estimate of [`mrp`] from one forward and backward sweep.
pub fn mrs(net: &Network, p: usize, data: &Batch) -> Result<UnitScoreTable> {
    let means = unit_means(net, p, data)?;
    let sweep = unit_sweep(net, p, data, &means)?;
    Ok(UnitScoreTable {
        layer: p,
        kind: UnitScorerKind::Mrs,
        scores: sweep.mrs,
        eval_id: Some(batch_fingerprint(data)),
        samples: data.len(),
    })
}

/// L1 or squared L2 norm of each unit's incoming weights (bias excluded).
pub fn unit_norms(net: &Network, p: usize, kind: UnitScorerKind) -> Result<UnitScoreTable> {
    check_layer(net, p)?;
    let w = &net.params()[p].weight;
    let scores = (0..w.rows())
        .map(|u| match kind {
            UnitScorerKind::NormL1 => Ok(w.row(u).iter().map(|v| v.abs()).sum()),
            UnitScorerKind::NormL2sq => Ok(w.row(u).iter().map(|v| v * v).sum()),
            other => Err(Error::invalid(format!("{other} is not a norm scorer"))),
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(UnitScoreTable::new(p, kind, scores))
}

/// Uniform(0,1) per unit, seeded by the run seed and the layer index.
pub fn random_unit_scores(net: &Network, p: usize, seed: u64) -> Result<UnitScoreTable> {
    check_layer(net, p)?;
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (p as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let scores = (0..net.units(p)).map(|_| rng.random::<f64>()).collect();
    Ok(UnitScoreTable::new(p, UnitScorerKind::Random, scores))
}

pub fn score_units(
    net: &Network,
    p: usize,
    kind: UnitScorerKind,
    data: Option<&Batch>,
    seed: u64,
) -> Result<UnitScoreTable> {
    let need = || data.ok_or_else(|| Error::invalid(format!("{kind} needs evaluation data")));
    match kind {
        UnitScorerKind::Mrp => mrp(net, p, need()?, DEFAULT_MRP_UNIT_CAP),
        UnitScorerKind::Mrs => mrs(net, p, need()?),
        UnitScorerKind::NormL1 | UnitScorerKind::NormL2sq => unit_norms(net, p, kind),
        UnitScorerKind::Random => random_unit_scores(net, p, seed),
    }
}

/// Computes layer `p`'s unit means on `data` and installs them for
/// replacement (all units disabled).
pub fn install_unit_means(net: &mut Network, p: usize, data: &Batch) -> Result<Vec<f64>> {
    let means = unit_means(net, p, data)?;
    net.install_means(p, means.clone(), batch_fingerprint(data))?;
    Ok(means)
}

/// Toggles mean replacement of one unit. When `current` is given and differs
/// from the samples the means came from, a warning is logged.
pub fn set_mean_replacement(
    net: &mut Network,
    p: usize,
    unit: usize,
    enabled: bool,
    current: Option<&Batch>,
) -> Result<()> {
    if let (Some(data), Some(fp)) = (current, net.replacer(p).fingerprint) {
        if batch_fingerprint(data) != fp {
            log::warn!("layer {p}: unit means were computed on a different evaluation set");
        }
    }
    net.set_replacement(p, unit, enabled)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Units whose quantity falls below `tau` (default: the relative threshold
/// times the layer median). Exact zeros always count.
fn below(values: &[f64], tau: Option<f64>) -> Result<Vec<usize>> {
    let tau = match tau {
        Some(t) if t > 0.0 => t,
        Some(t) => {
            return Err(Error::invalid(format!(
                "threshold must be positive, got {t}"
            )))
        }
        None => DEFAULT_RELATIVE_TAU * median(values),
    };
    Ok(values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v < tau || v == 0.0)
        .map(|(u, _)| u)
        .collect())
}

/// Units whose output gradient stays negligible on every sample.
pub fn detect_frozen(
    net: &Network,
    p: usize,
    data: &Batch,
    tau: Option<f64>,
) -> Result<Vec<usize>> {
    let means = unit_means(net, p, data)?;
    let sweep = unit_sweep(net, p, data, &means)?;
    below(&sweep.grad_max, tau)
}

/// Units whose output can be replaced by a constant at negligible loss.
pub fn detect_dead(net: &Network, p: usize, data: &Batch, tau: Option<f64>) -> Result<Vec<usize>> {
    let table = mrp(net, p, data, usize::MAX)?;
    below(&table.scores, tau)
}

pub const UNIT_SCORE_CSV_HEADER: &str = "step,layer,kind,unit,score";

/// CSV rows `step,layer,kind,unit,score` (no header).
pub fn unit_scores_csv(step: usize, tables: &[UnitScoreTable]) -> String {
    let mut s = String::new();
    for t in tables {
        for (u, v) in t.scores.iter().enumerate() {
            s.push_str(&format!("{step},{},{},{u},{v}\n", t.layer, t.kind));
        }
    }
    s
}
