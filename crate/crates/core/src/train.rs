//! Plain SGD training with per-unit learning-rate multipliers, pruning
//! schedules, snapshots and JSON-lines run logs.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AttackSpec;
use crate::data::{batches, epoch_seed, Batch, Dataset, EvalSet, DEFAULT_EVAL_SIZE};
use crate::error::{Error, Result};
use crate::hessian::DEFAULT_CHUNK;
use crate::nn::{Network, NetworkSpec, ParamLayer};
use crate::prune::{prune_parameters, prune_units, PruneResult, PruneScope};
use crate::scorers::param::{score_parameters, ParamScorer, ParamScorerKind};
use crate::scorers::unit::{score_units, UnitScorerKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 1,
            log_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log interval must be at least 1"));
        }
        Ok(())
    }
}

/// Learning-rate multipliers for individual units' incoming weights. Biases
/// always use the base rate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LrMultiplierMap {
    multipliers: BTreeMap<(usize, usize), f64>,
}

impl LrMultiplierMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, layer: usize, unit: usize, multiplier: f64) -> Result<()> {
        if !(multiplier > 0.0 && multiplier.is_finite()) {
            return Err(Error::invalid(format!(
                "learning-rate multiplier must be positive, got {multiplier}"
            )));
        }
        self.multipliers.insert((layer, unit), multiplier);
        Ok(())
    }

    pub fn get(&self, layer: usize, unit: usize) -> f64 {
        self.multipliers.get(&(layer, unit)).copied().unwrap_or(1.0)
    }

    pub fn is_empty(&self) -> bool {
        self.multipliers.is_empty()
    }
}

/// Deep copy of parameters and masks plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    spec: NetworkSpec,
    params: Vec<ParamLayer>,
    step: usize,
}

impl Snapshot {
    pub fn take(net: &Network, step: usize) -> Self {
        Snapshot {
            spec: net.spec().clone(),
            params: net.params().to_vec(),
            step,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn restore(&self, net: &mut Network) -> Result<()> {
        let spec = net.spec();
        if spec.input != self.spec.input || spec.layers != self.spec.layers {
            return Err(Error::invalid(
                "snapshot was taken from a different architecture",
            ));
        }
        net.params_mut().clone_from_slice(&self.params);
        Ok(())
    }
}

/// One SGD update on `batch`: `w ← w − α·m·∂L/∂w`, with `m` from `lr` for
/// weights and 1 for biases. Returns the batch loss before the update.
pub fn sgd_step(
    net: &mut Network,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: &LrMultiplierMap,
) -> Result<f64> {
    let loss = net.forward(&batch.images, &batch.labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    let grads = net.backward()?;
    let alpha = cfg.learning_rate;
    for (p, pl) in net.params_mut().iter_mut().enumerate() {
        let row = pl.fan_in();
        let gw = grads.weight[p].data();
        for (u, w) in pl.weight.data_mut().chunks_mut(row).enumerate() {
            let a = alpha * lr.get(p, u);
            for (wi, gi) in w.iter_mut().zip(&gw[u * row..(u + 1) * row]) {
                *wi -= a * gi;
            }
        }
        for (b, g) in pl.bias.data_mut().iter_mut().zip(grads.bias[p].data()) {
            *b -= alpha * g;
        }
        pl.apply_masks();
    }
    Ok(loss)
}

/// Mean loss and accuracy over `data` (argmax of the pre-head layer, first
/// maximum on ties).
pub fn evaluate(net: &Network, data: &Batch) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation over an empty batch"));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for part in data.chunks(DEFAULT_CHUNK) {
        let (logits, losses) = net.logits(&part.images, &part.labels)?;
        loss += losses.iter().sum::<f64>();
        for (s, &label) in part.labels.iter().enumerate() {
            let row = logits.row(s);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            correct += usize::from(best == label);
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Walks shuffled mini-batches epoch by epoch.
#[derive(Debug, Clone)]
pub struct BatchCursor {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    order: Vec<Vec<usize>>,
    pos: usize,
}

impl BatchCursor {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        Ok(BatchCursor {
            len,
            batch_size,
            seed,
            epoch: 0,
            order: batches(len, batch_size, epoch_seed(seed, 0))?,
            pos: 0,
        })
    }

    /// Zero-based index of the current epoch.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Next mini-batch of the current epoch, `None` once it is exhausted.
    pub fn next_indices(&mut self) -> Option<&[usize]> {
        let b = self.order.get(self.pos)?;
        self.pos += 1;
        Some(b)
    }

    pub fn next_epoch(&mut self) -> Result<()> {
        self.epoch += 1;
        self.order = batches(self.len, self.batch_size, epoch_seed(self.seed, self.epoch))?;
        self.pos = 0;
        Ok(())
    }
}

/// What a scheduled pruning event does.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum PruneMode {
    Parameter {
        scorer: ParamScorerKind,
        scope: PruneScope,
    },
    Unit {
        scorer: UnitScorerKind,
        bias_propagation: bool,
    },
}

/// Pruning targets applied after the named (1-based) epochs complete. Each
/// fraction is an absolute target, not an increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    entries: Vec<(usize, f64)>,
    pub mode: PruneMode,
}

impl PruneSchedule {
    pub fn new(entries: Vec<(usize, f64)>, mode: PruneMode) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("pruning schedule has no entries"));
        }
        for &(epoch, f) in &entries {
            if epoch == 0 {
                return Err(Error::invalid("schedule epochs are 1-based"));
            }
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!(
                    "schedule fraction {f} outside [0, 1]"
                )));
            }
        }
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::invalid(
                    "schedule epochs must be strictly increasing",
                ));
            }
            if w[1].1 < w[0].1 {
                return Err(Error::invalid("schedule fractions must be non-decreasing"));
            }
        }
        Ok(PruneSchedule { entries, mode })
    }

    /// 0.2, 0.5, 0.8, 0.9 after epochs 2 to 5.
    pub fn table2_2(mode: PruneMode) -> Self {
        Self::new(vec![(2, 0.2), (3, 0.5), (4, 0.8), (5, 0.9)], mode).expect("valid builtin")
    }

    /// 0.1, 0.2, 0.4, 0.6 after epochs 2 to 5.
    pub fn table4_2(mode: PruneMode) -> Self {
        Self::new(vec![(2, 0.1), (3, 0.2), (4, 0.4), (5, 0.6)], mode).expect("valid builtin")
    }

    /// Resolves `table2_2`, `table4_2`, or a path to a file of
    /// `epoch fraction` lines (`#` starts a comment).
    pub fn resolve(name_or_path: &str, mode: PruneMode) -> Result<Self> {
        match name_or_path {
            "table2_2" => Ok(Self::table2_2(mode)),
            "table4_2" => Ok(Self::table4_2(mode)),
            path => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Self::new(parse_schedule(&text)?, mode)
            }
        }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn fraction_at(&self, epoch: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == epoch).map(|e| e.1)
    }
}

pub fn parse_schedule(text: &str) -> Result<Vec<(usize, f64)>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        let bad = || {
            Error::invalid(format!(
                "schedule line {}: expected `epoch fraction`, got `{line}`",
                i + 1
            ))
        };
        if fields.len() != 2 {
            return Err(bad());
        }
        let epoch = fields[0].parse().map_err(|_| bad())?;
        let f = fields[1].parse().map_err(|_| bad())?;
        entries.push((epoch, f));
    }
    Ok(entries)
}

/// Prunes `net` to fraction `f` as `mode` prescribes, scoring on `data`.
pub fn apply_prune(
    net: &mut Network,
    mode: &PruneMode,
    f: f64,
    data: &Batch,
    seed: u64,
) -> Result<PruneResult> {
    match *mode {
        PruneMode::Parameter { scorer, scope } => {
            let scores = score_parameters(net, data, &ParamScorer::new(scorer).with_seed(seed))?;
            prune_parameters(net, &scores, f, scope)
        }
        PruneMode::Unit {
            scorer,
            bias_propagation,
        } => {
            let tables = (0..net.param_layer_count() - 1)
                .map(|p| score_units(net, p, scorer, Some(data), seed))
                .collect::<Result<Vec<_>>>()?;
            prune_units(net, &tables, f, bias_propagation.then_some(data))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        /// Mean mini-batch loss since the previous record.
        train_loss: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        eval: Option<EvalMetrics>,
        pruned_fraction: f64,
    },
    Prune {
        step: usize,
        epoch: usize,
        target: f64,
        pruned_params: usize,
        pruned_units: usize,
        achieved_fraction: f64,
    },
    Final {
        step: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        test: Option<EvalMetrics>,
        pruned_fraction: f64,
        params: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn steps(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step {
                step, train_loss, ..
            } => Some((*step, *train_loss)),
            _ => None,
        })
    }
}

/// Measurement callback. It receives a throwaway copy of the network, so
/// nothing it does reaches the training state.
pub trait Hook {
    fn on_log(&mut self, step: usize, epoch: usize, net: &mut Network) -> Result<()>;
}

impl<F> Hook for F
where
    F: FnMut(usize, usize, &mut Network) -> Result<()>,
{
    fn on_log(&mut self, step: usize, epoch: usize, net: &mut Network) -> Result<()> {
        self(step, epoch, net)
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub schedule: Option<PruneSchedule>,
    pub attack: Option<AttackSpec>,
    /// Samples for scoring, bias propagation and logged eval metrics. When
    /// absent and needed, a subset of the training set is drawn from the seed.
    pub eval: Option<&'a Batch>,
    /// Scored once at the end into the final record.
    pub test: Option<&'a Batch>,
    pub hooks: Vec<Box<dyn Hook + 'a>>,
}

/// Trains `net` for `cfg.epochs` epochs.
pub fn train(
    net: &mut Network,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<RunLog> {
    cfg.validate()?;
    if let Some(a) = &opts.attack {
        a.validate(net)?;
    }
    let drawn;
    let eval: Option<&Batch> = match opts.eval {
        Some(b) => Some(b),
        None if opts.schedule.is_some() => {
            let size = DEFAULT_EVAL_SIZE.min(ds.len());
            drawn = EvalSet::sample(ds.len(), size, cfg.seed ^ 0x5EED_E7A1)?.materialize(ds);
            Some(&drawn)
        }
        None => None,
    };
    let log_eval = opts.eval.is_some();

    let mut log = RunLog::default();
    let mut cursor = BatchCursor::new(ds.len(), cfg.batch_size, cfg.seed)?;
    let mut step = 0usize;
    let mut window = (0.0, 0usize);
    let none = LrMultiplierMap::new();
    for epoch in 1..=cfg.epochs {
        while let Some(idx) = cursor.next_indices() {
            let batch = ds.batch(idx);
            let lr = match &opts.attack {
                Some(a) if a.fires_at(step + 1) => a.lr_map()?,
                _ => none.clone(),
            };
            let loss = sgd_step(net, &batch, cfg, &lr)?;
            step += 1;
            window.0 += loss;
            window.1 += 1;
            if step.is_multiple_of(cfg.log_every) {
                let eval_metrics = match (log_eval, eval) {
                    (true, Some(b)) => {
                        let (loss, accuracy) = evaluate(net, b)?;
                        Some(EvalMetrics { loss, accuracy })
                    }
                    _ => None,
                };
                log.records.push(LogRecord::Step {
                    step,
                    epoch,
                    train_loss: window.0 / window.1 as f64,
                    eval: eval_metrics,
                    pruned_fraction: net.pruned_fraction(),
                });
                window = (0.0, 0);
                for hook in opts.hooks.iter_mut() {
                    let mut sandbox = net.clone();
                    hook.on_log(step, epoch, &mut sandbox)?;
                }
            }
        }
        if let Some(schedule) = &opts.schedule {
            if let Some(f) = schedule.fraction_at(epoch) {
                let data = eval.expect("eval data drawn for scheduled pruning");
                let r = apply_prune(net, &schedule.mode, f, data, cfg.seed)?;
                log::info!(
                    "epoch {epoch}: pruned to {f} ({} params, {} units, achieved {:.4})",
                    r.pruned_params,
                    r.pruned_units.len(),
                    r.achieved_fraction
                );
                log.records.push(LogRecord::Prune {
                    step,
                    epoch,
                    target: f,
                    pruned_params: r.pruned_params,
                    pruned_units: r.pruned_units.len(),
                    achieved_fraction: r.achieved_fraction,
                });
            }
        }
        if epoch < cfg.epochs {
            cursor.next_epoch()?;
        }
    }
    let test = match opts.test {
        Some(b) => {
            let (loss, accuracy) = evaluate(net, b)?;
            Some(EvalMetrics { loss, accuracy })
        }
        None => None,
    };
    log.records.push(LogRecord::Final {
        step,
        test,
        pruned_fraction: net.pruned_fraction(),
        params: net.param_count(),
    });
    Ok(log)
}

impl fmt::Display for PruneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PruneMode::Parameter { scorer, .. } => write!(f, "parameter/{scorer}"),
            PruneMode::Unit { scorer, .. } => write!(f, "unit/{scorer}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{tiny_spec, Activation, InitSpec};
    use crate::tensor::Tensor;

    fn single_linear(w: f64) -> Network {
        use crate::nn::LayerSpec;
        let spec = NetworkSpec::new(
            [1, 1, 1],
            vec![
                LayerSpec::Flatten,
                LayerSpec::linear(1, 1),
                LayerSpec::SumHead,
            ],
        );
        let layer = ParamLayer {
            weight: Tensor::new(vec![1, 1], vec![w]).unwrap(),
            bias: Tensor::new(vec![1], vec![0.0]).unwrap(),
            weight_mask: Tensor::filled(&[1, 1], 1.0),
            bias_mask: Tensor::filled(&[1], 1.0),
        };
        Network::from_params(spec, vec![layer]).unwrap()
    }

    #[test]
    fn sgd_update_rule() {
        // L = w·x with x = 0.5, so g = 0.5
        let mut net = single_linear(1.0);
        let batch = Batch {
            images: Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap(),
            labels: vec![0],
        };
        let cfg = TrainConfig::default();
        sgd_step(&mut net, &batch, &cfg, &LrMultiplierMap::new()).unwrap();
        assert_eq!(net.params()[0].weight.data()[0], 0.995);
        // bias gradient is 1 and ignores the multiplier
        let mut lr = LrMultiplierMap::new();
        lr.set(0, 0, 100.0).unwrap();
        let mut net = single_linear(1.0);
        sgd_step(&mut net, &batch, &cfg, &lr).unwrap();
        assert!((net.params()[0].weight.data()[0] - 0.5).abs() < 1e-15);
        assert_eq!(net.params()[0].bias.data()[0], -0.01);
    }

    #[test]
    fn masked_weight_stays_zero() {
        let mut net = single_linear(1.0);
        net.params_mut()[0].weight_mask.data_mut()[0] = 0.0;
        net.params_mut()[0].apply_masks();
        let batch = Batch {
            images: Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap(),
            labels: vec![0],
        };
        sgd_step(
            &mut net,
            &batch,
            &TrainConfig::default(),
            &LrMultiplierMap::new(),
        )
        .unwrap();
        assert_eq!(net.params()[0].weight.data()[0], 0.0);
    }

    #[test]
    fn schedule_validation() {
        let mode = PruneMode::Parameter {
            scorer: ParamScorerKind::Magnitude,
            scope: PruneScope::Global,
        };
        assert!(PruneSchedule::new(vec![(2, 0.5), (2, 0.6)], mode).is_err());
        assert!(PruneSchedule::new(vec![(2, 0.5), (3, 0.4)], mode).is_err());
        assert!(PruneSchedule::new(vec![(2, 1.5)], mode).is_err());
        let t = PruneSchedule::table2_2(mode);
        assert_eq!(t.entries(), &[(2, 0.2), (3, 0.5), (4, 0.8), (5, 0.9)]);
        let t = PruneSchedule::table4_2(mode);
        assert_eq!(t.entries(), &[(2, 0.1), (3, 0.2), (4, 0.4), (5, 0.6)]);
        assert_eq!(
            parse_schedule("# e f\n2 0.1\n3,0.2\n\n").unwrap(),
            vec![(2, 0.1), (3, 0.2)]
        );
        assert!(parse_schedule("2").is_err());
    }

    #[test]
    fn snapshot_restore_is_exact_and_checks_architecture() {
        let mut net = Network::build(tiny_spec(Activation::Relu), InitSpec::seeded(1)).unwrap();
        let snap = Snapshot::take(&net, 3);
        let before = net.flat_params();
        net.params_mut()[0].weight.data_mut()[0] += 1.0;
        snap.restore(&mut net).unwrap();
        snap.restore(&mut net).unwrap();
        assert_eq!(net.flat_params(), before);
        let mut other = Network::build(tiny_spec(Activation::Tanh), InitSpec::seeded(1)).unwrap();
        assert!(snap.restore(&mut other).is_err());
    }

    #[test]
    fn evaluate_uniform_logits() {
        let mut net = Network::build(tiny_spec(Activation::Relu), InitSpec::seeded(0)).unwrap();
        for pl in net.params_mut() {
            pl.weight.data_mut().fill(0.0);
            pl.bias.data_mut().fill(0.0);
        }
        let batch = Batch {
            images: Tensor::filled(&[4, 1, 12, 12], 0.5),
            labels: vec![0, 1, 2, 0],
        };
        let (loss, acc) = evaluate(&net, &batch).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        // first maximum wins, so class 0 is predicted
        assert_eq!(acc, 0.5);
    }
}
