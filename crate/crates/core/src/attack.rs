//! Learning-rate attacks: scheduled per-unit learning-rate multipliers with a
//! paired control run and per-unit metric tracking.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::hessian::DEFAULT_CHUNK;
use crate::nn::Network;
use crate::prune::UnitRef;
use crate::scorers::unit::{mrp_of, unit_means, unit_sweep};
use crate::train::{sgd_step, BatchCursor, LrMultiplierMap, TrainConfig};

pub const HISTOGRAM_BINS: usize = 50;

/// Multiplies the weight learning rate of one unit at steps
/// `start, start + interval, …` (`count` times). Steps are 1-based update
/// numbers. The unit's bias keeps the base rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub target: UnitRef,
    pub start: usize,
    pub count: usize,
    pub interval: usize,
    pub multiplier: f64,
}

impl AttackSpec {
    pub fn check(&self) -> Result<()> {
        if self.count == 0 || self.interval == 0 {
            return Err(Error::invalid(
                "attack count and interval must be at least 1",
            ));
        }
        if !(self.multiplier > 0.0 && self.multiplier.is_finite()) {
            return Err(Error::invalid(format!(
                "attack multiplier must be positive, got {}",
                self.multiplier
            )));
        }
        Ok(())
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        self.check()?;
        self.target.check(net)
    }

    pub fn fires_at(&self, step: usize) -> bool {
        step >= self.start
            && (step - self.start).is_multiple_of(self.interval)
            && (step - self.start) / self.interval < self.count
    }

    pub fn lr_map(&self) -> Result<LrMultiplierMap> {
        let mut m = LrMultiplierMap::new();
        m.set(self.target.layer, self.target.unit, self.multiplier)?;
        Ok(m)
    }
}

/// `{S, S+I, …, S+(N−1)I}`.
pub fn attack_steps(spec: &AttackSpec) -> BTreeSet<usize> {
    (0..spec.count)
        .map(|i| spec.start + i * spec.interval)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitMetricsRow {
    pub step: usize,
    pub mrp: f64,
    pub mrs: f64,
    pub weight_l1: f64,
    pub outgoing_l1: f64,
    pub output_grad_l1: f64,
    pub weight_grad_l1: f64,
    /// Mean mini-batch loss since the previous row.
    pub train_loss: f64,
}

impl UnitMetricsRow {
    pub fn is_finite(&self) -> bool {
        [
            self.mrp,
            self.mrs,
            self.weight_l1,
            self.outgoing_l1,
            self.output_grad_l1,
            self.weight_grad_l1,
            self.train_loss,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Metric panel of one unit on `eval`. Reads `net` only.
pub fn unit_metrics(
    net: &Network,
    unit: UnitRef,
    eval: &Batch,
    step: usize,
    train_loss: f64,
) -> Result<UnitMetricsRow> {
    unit.check(net)?;
    let p = unit.layer;
    let means = unit_means(net, p, eval)?;
    let mrp = mrp_of(net, p, eval, &means, &[unit.unit])?[0];
    let sweep = unit_sweep(net, p, eval, &means)?;
    let weight_l1 = net.params()[p]
        .weight
        .row(unit.unit)
        .iter()
        .map(|v| v.abs())
        .sum();
    let outgoing_l1 = if p + 1 < net.param_layer_count() {
        let (c, groups) = net.outgoing_indices(p, unit.unit)?;
        let w = net.params()[c.layer].weight.data();
        groups.iter().flatten().map(|&i| w[i].abs()).sum()
    } else {
        0.0
    };
    Ok(UnitMetricsRow {
        step,
        mrp,
        mrs: sweep.mrs[unit.unit],
        weight_l1,
        outgoing_l1,
        output_grad_l1: sweep.grad_l1[unit.unit],
        weight_grad_l1: sweep.weight_grad_l1[unit.unit],
        train_loss,
    })
}

/// Layer-output values of one unit over `eval` (all spatial positions).
pub fn unit_outputs(net: &Network, unit: UnitRef, eval: &Batch) -> Result<Vec<f64>> {
    unit.check(net)?;
    let li = net.spec_index(unit.layer);
    let units = net.units(unit.layer);
    let mut out = Vec::new();
    for part in eval.chunks(DEFAULT_CHUNK) {
        let h = net.output_of(&part.images, li)?;
        let per_unit = h.row_len() / units;
        for s in 0..h.rows() {
            out.extend_from_slice(&h.row(s)[unit.unit * per_unit..(unit.unit + 1) * per_unit]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRecord {
    pub run: String,
    pub layer: usize,
    pub unit: usize,
    pub step: usize,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Equal-width bins over `[lo, hi]`; values outside land in the end bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> (Vec<f64>, Vec<u64>) {
    let (lo, hi) = if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for &v in values {
        let b = ((v - lo) / width).floor();
        let b = if b.is_nan() {
            0
        } else {
            (b.max(0.0) as usize).min(bins - 1)
        };
        counts[b] += 1;
    }
    (edges, counts)
}

#[derive(Debug, Clone)]
pub struct AttackReport {
    pub control: Vec<UnitMetricsRow>,
    pub attacked: Vec<UnitMetricsRow>,
    pub histograms: Vec<HistogramRecord>,
    /// Per-step mini-batch losses.
    pub control_losses: Vec<f64>,
    pub attacked_losses: Vec<f64>,
    pub control_net: Network,
    pub attacked_net: Network,
}

pub const METRICS_CSV_HEADER: &str =
    "run,step,mrp,mrs,weight_l1,outgoing_l1,output_grad_l1,weight_grad_l1,train_loss";

impl AttackReport {
    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{METRICS_CSV_HEADER}\n");
        for (run, rows) in [("control", &self.control), ("attacked", &self.attacked)] {
            for r in rows {
                let _ = writeln!(
                    s,
                    "{run},{},{},{},{},{},{},{},{}",
                    r.step,
                    r.mrp,
                    r.mrs,
                    r.weight_l1,
                    r.outgoing_l1,
                    r.output_grad_l1,
                    r.weight_grad_l1,
                    r.train_loss
                );
            }
        }
        s
    }

    pub fn histograms_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for h in &self.histograms {
            s.push_str(&serde_json::to_string(h)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Trains an attacked copy and a control copy of `net` in lockstep on the
/// same mini-batches. Every `metric_every` steps (and at step 0) both runs'
/// target-unit metrics and output histograms are recorded on `eval`; the bins
/// span the running output range of the control run. With `metric_every == 0`
/// nothing is recorded.
pub fn run_attack_experiment(
    net: &Network,
    ds: &Dataset,
    eval: &Batch,
    cfg: &TrainConfig,
    spec: &AttackSpec,
    metric_every: usize,
) -> Result<AttackReport> {
    cfg.validate()?;
    spec.validate(net)?;
    let mut control = net.clone();
    let mut attacked = net.clone();
    let attack_lr = spec.lr_map()?;
    let base_lr = LrMultiplierMap::new();
    let mut report = AttackReport {
        control: Vec::new(),
        attacked: Vec::new(),
        histograms: Vec::new(),
        control_losses: Vec::new(),
        attacked_losses: Vec::new(),
        control_net: net.clone(),
        attacked_net: net.clone(),
    };
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut window = (0.0, 0.0, 0usize);
    let mut record = |step: usize,
                      control: &Network,
                      attacked: &Network,
                      window: (f64, f64, usize),
                      report: &mut AttackReport|
     -> Result<()> {
        let n = window.2.max(1) as f64;
        report.control.push(unit_metrics(
            control,
            spec.target,
            eval,
            step,
            window.0 / n,
        )?);
        report.attacked.push(unit_metrics(
            attacked,
            spec.target,
            eval,
            step,
            window.1 / n,
        )?);
        let c_out = unit_outputs(control, spec.target, eval)?;
        let a_out = unit_outputs(attacked, spec.target, eval)?;
        for &v in &c_out {
            range = (range.0.min(v), range.1.max(v));
        }
        for (run, values) in [("control", &c_out), ("attacked", &a_out)] {
            let (bin_edges, counts) = histogram(values, range.0, range.1, HISTOGRAM_BINS);
            report.histograms.push(HistogramRecord {
                run: run.into(),
                layer: spec.target.layer,
                unit: spec.target.unit,
                step,
                bin_edges,
                counts,
            });
        }
        Ok(())
    };
    if metric_every > 0 {
        record(0, &control, &attacked, window, &mut report)?;
    }
    let mut cursor = BatchCursor::new(ds.len(), cfg.batch_size, cfg.seed)?;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        while let Some(idx) = cursor.next_indices() {
            let batch = ds.batch(idx);
            step += 1;
            let lr = if spec.fires_at(step) {
                &attack_lr
            } else {
                &base_lr
            };
            let lc = sgd_step(&mut control, &batch, cfg, &base_lr)?;
            let la = sgd_step(&mut attacked, &batch, cfg, lr)?;
            report.control_losses.push(lc);
            report.attacked_losses.push(la);
            window = (window.0 + lc, window.1 + la, window.2 + 1);
            if metric_every > 0 && step % metric_every == 0 {
                record(step, &control, &attacked, window, &mut report)?;
                window = (0.0, 0.0, 0);
            }
        }
        if epoch < cfg.epochs {
            cursor.next_epoch()?;
        }
    }
    report.control_net = control;
    report.attacked_net = attacked;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(start: usize, count: usize, interval: usize) -> AttackSpec {
        AttackSpec {
            target: UnitRef::new(0, 0),
            start,
            count,
            interval,
            multiplier: 100.0,
        }
    }

    #[test]
    fn schedule_steps() {
        let s = attack_steps(&spec(50, 10, 10));
        assert_eq!(
            s.iter().copied().collect::<Vec<_>>(),
            (50..=140).step_by(10).collect::<Vec<_>>()
        );
        let s = attack_steps(&spec(2000, 10, 10));
        assert_eq!(
            (*s.first().unwrap(), *s.last().unwrap(), s.len()),
            (2000, 2090, 10)
        );
        assert_eq!(
            attack_steps(&spec(7, 1, 3)).into_iter().collect::<Vec<_>>(),
            vec![7]
        );
        let a = spec(50, 10, 10);
        for step in 0..200 {
            assert_eq!(a.fires_at(step), attack_steps(&a).contains(&step));
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(spec(0, 0, 1).check().is_err());
        assert!(spec(0, 1, 0).check().is_err());
        let mut s = spec(0, 1, 1);
        s.multiplier = 0.0;
        assert!(s.check().is_err());
    }

    #[test]
    fn histogram_mass_and_clamping() {
        let (edges, counts) = histogram(&[0.0, 0.5, 1.0, 2.0, -1.0], 0.0, 1.0, 4);
        assert_eq!(edges.len(), 5);
        assert_eq!(counts.iter().sum::<u64>(), 5);
        assert_eq!(counts, vec![2, 0, 1, 2]);
        let (_, counts) = histogram(&[3.0, 3.0], 3.0, 3.0, 50);
        assert_eq!(counts.iter().sum::<u64>(), 2);
    }
}
