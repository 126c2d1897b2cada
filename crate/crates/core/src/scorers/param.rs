//! Per-parameter saliency scores.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::hessian::{batch_loss, hvp, NetObjective, Objective, DEFAULT_CHUNK, DEFAULT_FD_EPS};
use crate::nn::Network;
use crate::prune::{prune_parameters, PruneScope};
use crate::tensor::Tensor;
use crate::train::Snapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ParamScorerKind {
    Magnitude,
    Taylor1,
    Taylor2,
    Hessian,
    Taylor1Abs,
    Taylor2Abs,
    HessianAbs,
    LossChange,
    LossChangeAbs,
    Random,
}

impl ParamScorerKind {
    pub const ALL: [ParamScorerKind; 10] = [
        ParamScorerKind::Magnitude,
        ParamScorerKind::Taylor1,
        ParamScorerKind::Taylor2,
        ParamScorerKind::Hessian,
        ParamScorerKind::Taylor1Abs,
        ParamScorerKind::Taylor2Abs,
        ParamScorerKind::HessianAbs,
        ParamScorerKind::LossChange,
        ParamScorerKind::LossChangeAbs,
        ParamScorerKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamScorerKind::Magnitude => "magnitude",
            ParamScorerKind::Taylor1 => "taylor1",
            ParamScorerKind::Taylor2 => "taylor2",
            ParamScorerKind::Hessian => "hessian",
            ParamScorerKind::Taylor1Abs => "taylor1Abs",
            ParamScorerKind::Taylor2Abs => "taylor2Abs",
            ParamScorerKind::HessianAbs => "hessianAbs",
            ParamScorerKind::LossChange => "lossChange",
            ParamScorerKind::LossChangeAbs => "lossChangeAbs",
            ParamScorerKind::Random => "random",
        }
    }

    /// Kinds whose scores carry a meaningful sign.
    pub fn is_signed(self) -> bool {
        matches!(
            self,
            ParamScorerKind::Taylor1
                | ParamScorerKind::Taylor2
                | ParamScorerKind::Hessian
                | ParamScorerKind::LossChange
        )
    }

    fn needs_gradient(self) -> bool {
        matches!(
            self,
            ParamScorerKind::Taylor1
                | ParamScorerKind::Taylor2
                | ParamScorerKind::Taylor1Abs
                | ParamScorerKind::Taylor2Abs
        )
    }

    fn needs_hvp(self) -> bool {
        matches!(
            self,
            ParamScorerKind::Taylor2
                | ParamScorerKind::Hessian
                | ParamScorerKind::Taylor2Abs
                | ParamScorerKind::HessianAbs
        )
    }

    fn is_oracle(self) -> bool {
        matches!(
            self,
            ParamScorerKind::LossChange | ParamScorerKind::LossChangeAbs
        )
    }
}

impl fmt::Display for ParamScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamScorerKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown parameter scorer `{s}`")))
    }
}

/// Choice of the perturbation `Δw` the Taylor scores are evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DeltaConvention {
    /// `Δw = −ε·w` (ε = 1 is removal).
    #[default]
    Prune,
    /// `Δw = −sign(w)`; pair with `λ = ε`.
    Sensitivity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamScorer {
    pub kind: ParamScorerKind,
    /// Weight of the Hessian term in taylor2.
    pub lambda: f64,
    pub epsilon: f64,
    pub delta: DeltaConvention,
    /// Seed for the random scorer.
    pub seed: u64,
    pub fd_eps: f64,
}

impl ParamScorer {
    /// Pruning convention: `Δw = −w`, `λ = 1`.
    pub fn new(kind: ParamScorerKind) -> Self {
        ParamScorer {
            kind,
            lambda: 1.0,
            epsilon: 1.0,
            delta: DeltaConvention::Prune,
            seed: 0,
            fd_eps: DEFAULT_FD_EPS,
        }
    }

    /// Sensitivity analysis: `Δw = −sign(w)`, `λ = ε`.
    pub fn sensitivity(kind: ParamScorerKind, epsilon: f64) -> Self {
        ParamScorer {
            lambda: epsilon,
            epsilon,
            delta: DeltaConvention::Sensitivity,
            ..Self::new(kind)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    fn check(&self) -> Result<()> {
        if !self.lambda.is_finite() || !self.epsilon.is_finite() {
            return Err(Error::invalid("λ and ε must be finite"));
        }
        Ok(())
    }

    pub fn delta_w(&self, w: &[f64]) -> Vec<f64> {
        match self.delta {
            DeltaConvention::Prune => w.iter().map(|x| -self.epsilon * x).collect(),
            DeltaConvention::Sensitivity => w
                .iter()
                .map(|&x| if x == 0.0 { 0.0 } else { -x.signum() })
                .collect(),
        }
    }
}

/// Scores congruent to every layer's weights and bias. Masked (and
/// unscored) positions hold `+∞` so they are never selected.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub kind: ParamScorerKind,
    pub delta: DeltaConvention,
    pub weight: Vec<Tensor>,
    pub bias: Vec<Tensor>,
}

impl SaliencyMap {
    /// Splits a flat score vector (in [`Network::flat_params`] order).
    pub fn from_flat(
        net: &Network,
        kind: ParamScorerKind,
        delta: DeltaConvention,
        flat: &[f64],
    ) -> Result<Self> {
        if flat.len() != net.param_count() {
            return Err(Error::shape(format!(
                "{} scores for {} parameters",
                flat.len(),
                net.param_count()
            )));
        }
        let mut weight = Vec::new();
        let mut bias = Vec::new();
        let mut offset = 0;
        for p in net.params() {
            let nw = p.weight.len();
            weight.push(Tensor::from_slice(
                p.weight.shape(),
                &flat[offset..offset + nw],
            )?);
            offset += nw;
            let nb = p.bias.len();
            bias.push(Tensor::from_slice(
                p.bias.shape(),
                &flat[offset..offset + nb],
            )?);
            offset += nb;
        }
        Ok(SaliencyMap {
            kind,
            delta,
            weight,
            bias,
        })
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (w, b) in self.weight.iter().zip(&self.bias) {
            v.extend_from_slice(w.data());
            v.extend_from_slice(b.data());
        }
        v
    }

    /// Scores of one layer, weights then bias.
    pub fn layer(&self, p: usize) -> Vec<f64> {
        let mut v = self.weight[p].data().to_vec();
        v.extend_from_slice(self.bias[p].data());
        v
    }

    pub fn layers(&self) -> usize {
        self.weight.len()
    }
}

/// Scores for a flat parameter vector. `mask` marks live (1) and pruned (0)
/// positions; pruned positions score `+∞`.
pub fn flat_scores<O: Objective + ?Sized>(
    obj: &mut O,
    mask: &[f64],
    scorer: &ParamScorer,
) -> Result<Vec<f64>> {
    scorer.check()?;
    let kind = scorer.kind;
    if kind.is_oracle() {
        return Err(Error::invalid(format!(
            "{kind} is computed by the loss-change oracle, not by score_parameters"
        )));
    }
    let w = obj.params();
    if mask.len() != w.len() {
        return Err(Error::shape("mask length differs from parameter count"));
    }
    let mut scores = match kind {
        ParamScorerKind::Magnitude => w.iter().map(|x| x.abs()).collect(),
        ParamScorerKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(scorer.seed);
            w.iter().map(|_| rng.random::<f64>()).collect()
        }
        _ => {
            let dw: Vec<f64> = scorer
                .delta_w(&w)
                .into_iter()
                .zip(mask)
                .map(|(d, &m)| if m == 0.0 { 0.0 } else { d })
                .collect();
            let g = if kind.needs_gradient() {
                obj.loss_and_grad()?.1
            } else {
                vec![0.0; w.len()]
            };
            let hdw = if kind.needs_hvp() {
                hvp(obj, &dw, scorer.fd_eps)?
            } else {
                vec![0.0; w.len()]
            };
            taylor_scores(kind, scorer.lambda, &dw, &g, &hdw)
        }
    };
    for (s, &m) in scores.iter_mut().zip(mask) {
        if m == 0.0 {
            *s = f64::INFINITY;
        }
    }
    Ok(scores)
}

/// Elementwise Taylor-family scores from `Δw`, `∇L` and `H·Δw`.
pub fn taylor_scores(
    kind: ParamScorerKind,
    lambda: f64,
    dw: &[f64],
    g: &[f64],
    hdw: &[f64],
) -> Vec<f64> {
    dw.iter()
        .zip(g)
        .zip(hdw)
        .map(|((&d, &gi), &hi)| {
            let s = match kind {
                ParamScorerKind::Taylor1 | ParamScorerKind::Taylor1Abs => d * gi,
                ParamScorerKind::Taylor2 | ParamScorerKind::Taylor2Abs => d * (gi + lambda * hi),
                ParamScorerKind::Hessian | ParamScorerKind::HessianAbs => d * hi,
                _ => unreachable!("not a Taylor-family scorer"),
            };
            match kind {
                ParamScorerKind::Taylor1Abs
                | ParamScorerKind::Taylor2Abs
                | ParamScorerKind::HessianAbs => s.abs(),
                _ => s,
            }
        })
        .collect()
}

/// Scores every parameter of `net` on `data`. Gradients and Hessian-vector
/// products are averaged over the whole batch in fixed chunk order.
pub fn score_parameters(
    net: &mut Network,
    data: &Batch,
    scorer: &ParamScorer,
) -> Result<SaliencyMap> {
    let mask = net.flat_mask();
    let scores = {
        let mut obj = NetObjective::new(net, data);
        flat_scores(&mut obj, &mask, scorer)?
    };
    SaliencyMap::from_flat(net, scorer.kind, scorer.delta, &scores)
}

pub const DEFAULT_ORACLE_CAP: usize = 50_000;

/// Empirical saliency `L(w with w_i ← (1−ε)w_i) − L(w)` for each live
/// parameter of the selected layers (all when `layers` is `None`).
/// Unscored and masked positions get `+∞`.
pub fn loss_change_oracle(
    net: &mut Network,
    data: &Batch,
    epsilon: f64,
    layers: Option<&[usize]>,
    cap: usize,
) -> Result<SaliencyMap> {
    let selected: Vec<usize> = match layers {
        Some(l) => {
            if let Some(&bad) = l.iter().find(|&&p| p >= net.param_layer_count()) {
                return Err(Error::invalid(format!("no parametered layer {bad}")));
            }
            l.to_vec()
        }
        None => (0..net.param_layer_count()).collect(),
    };
    let needed: usize = selected.iter().map(|&p| net.params()[p].len()).sum();
    if needed > cap {
        return Err(Error::CapExceeded {
            what: "loss-change oracle",
            needed,
            cap,
            advice: "use a Taylor approximation (taylor1) instead",
        });
    }
    let base = batch_loss(net, data, DEFAULT_CHUNK)?;
    let mut flat = vec![f64::INFINITY; net.param_count()];
    for &p in &selected {
        let offset = net.flat_offset(p);
        let (nw, nb) = (net.params()[p].weight.len(), net.params()[p].bias.len());
        for j in 0..nw + nb {
            let (live, original) = {
                let pl = &net.params()[p];
                if j < nw {
                    (pl.weight_mask.data()[j] != 0.0, pl.weight.data()[j])
                } else {
                    (pl.bias_mask.data()[j - nw] != 0.0, pl.bias.data()[j - nw])
                }
            };
            if !live {
                continue;
            }
            set_param(net, p, j, (1.0 - epsilon) * original);
            let loss = batch_loss(net, data, DEFAULT_CHUNK);
            set_param(net, p, j, original);
            flat[offset + j] = loss? - base;
        }
    }
    SaliencyMap::from_flat(
        net,
        ParamScorerKind::LossChange,
        DeltaConvention::Prune,
        &flat,
    )
}

fn set_param(net: &mut Network, p: usize, j: usize, value: f64) {
    let pl = &mut net.params_mut()[p];
    let nw = pl.weight.len();
    if j < nw {
        pl.weight.data_mut()[j] = value;
    } else {
        pl.bias.data_mut()[j - nw] = value;
    }
}

/// `|S|` of an oracle map.
pub fn abs_map(map: &SaliencyMap) -> SaliencyMap {
    let kind = match map.kind {
        ParamScorerKind::LossChange => ParamScorerKind::LossChangeAbs,
        ParamScorerKind::Taylor1 => ParamScorerKind::Taylor1Abs,
        ParamScorerKind::Taylor2 => ParamScorerKind::Taylor2Abs,
        ParamScorerKind::Hessian => ParamScorerKind::HessianAbs,
        other => other,
    };
    SaliencyMap {
        kind,
        delta: map.delta,
        weight: map.weight.iter().map(|t| t.map(f64::abs)).collect(),
        bias: map.bias.iter().map(|t| t.map(f64::abs)).collect(),
    }
}

/// Fraction of scored, live parameters of layer `p` with a negative score.
pub fn negative_fraction(scores: &SaliencyMap, p: usize) -> Result<f64> {
    if !scores.kind.is_signed() {
        return Err(Error::invalid(format!(
            "negative fraction is undefined for the unsigned scorer {}",
            scores.kind
        )));
    }
    if p >= scores.layers() {
        return Err(Error::invalid(format!("no parametered layer {p}")));
    }
    let live: Vec<f64> = scores
        .layer(p)
        .into_iter()
        .filter(|s| s.is_finite())
        .collect();
    if live.is_empty() {
        return Ok(0.0);
    }
    Ok(live.iter().filter(|&&s| s < 0.0).count() as f64 / live.len() as f64)
}

/// Loss change from pruning to fraction `f` with `scorer`, measured on `data`
/// and then reverted. The network is left exactly as it was.
pub fn prune_and_measure(
    net: &mut Network,
    data: &Batch,
    scorer: &ParamScorer,
    f: f64,
    scope: PruneScope,
) -> Result<f64> {
    let snap = Snapshot::take(net, 0);
    let outcome = (|| {
        let before = batch_loss(net, data, DEFAULT_CHUNK)?;
        let scores = if scorer.kind.is_oracle() {
            let m = loss_change_oracle(net, data, scorer.epsilon, None, DEFAULT_ORACLE_CAP)?;
            if scorer.kind == ParamScorerKind::LossChangeAbs {
                abs_map(&m)
            } else {
                m
            }
        } else {
            score_parameters(net, data, scorer)?
        };
        prune_parameters(net, &scores, f, scope)?;
        let after = batch_loss(net, data, DEFAULT_CHUNK)?;
        Ok(after - before)
    })();
    snap.restore(net)?;
    outcome
}

pub const COMPARISON_CSV_HEADER: &str = "step,kind,f,delta_loss";

/// One comparison CSV row (no trailing newline).
pub fn comparison_row(step: usize, kind: &str, f: f64, delta_loss: f64) -> String {
    format!("{step},{kind},{f},{delta_loss}")
}
