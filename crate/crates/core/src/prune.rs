//! Mask-based parameter and unit pruning, bias propagation, physical
//! shrinking and weight colormaps.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::hessian::{batch_loss, DEFAULT_CHUNK};
use crate::nn::{Fanout, LayerSpec, Network, NetworkSpec, ParamLayer};
use crate::scorers::param::SaliencyMap;
use crate::scorers::unit::{score_units, unit_means, UnitScoreTable, UnitScorerKind};
use crate::tensor::Tensor;
use crate::train::Snapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitRef {
    /// Parametered-layer index.
    pub layer: usize,
    pub unit: usize,
}

impl UnitRef {
    pub fn new(layer: usize, unit: usize) -> Self {
        UnitRef { layer, unit }
    }

    pub fn check(&self, net: &Network) -> Result<()> {
        if self.layer >= net.param_layer_count() || self.unit >= net.units(self.layer) {
            return Err(Error::invalid(format!("no unit {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for UnitRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.unit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PruneScope {
    /// One ranking over all parameters of the network.
    #[default]
    Global,
    /// Each layer pruned to the fraction independently.
    PerLayer,
}

impl std::str::FromStr for PruneScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(PruneScope::Global),
            "per-layer" | "layer" => Ok(PruneScope::PerLayer),
            other => Err(Error::invalid(format!("unknown prune scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PruneResult {
    /// Parameters newly masked by this call.
    pub pruned_params: usize,
    /// Units newly masked by this call.
    pub pruned_units: Vec<UnitRef>,
    /// Masked fraction of all parameters afterwards.
    pub achieved_fraction: f64,
}

fn check_fraction(f: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::invalid(format!(
            "pruning fraction {f} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Masks the lowest-scored live parameters until a fraction `f` of all
/// parameters (weights and biases) is masked. Ties go to the lower
/// `(layer, flat index)`. Never unmasks.
pub fn prune_parameters(
    net: &mut Network,
    scores: &SaliencyMap,
    f: f64,
    scope: PruneScope,
) -> Result<PruneResult> {
    check_fraction(f)?;
    if scores.layers() != net.param_layer_count()
        || net.params().iter().enumerate().any(|(p, pl)| {
            scores.weight[p].shape() != pl.weight.shape()
                || scores.bias[p].shape() != pl.bias.shape()
        })
    {
        return Err(Error::shape("saliency map is not congruent to the network"));
    }
    // (score, layer, index within layer)
    let mut groups: Vec<Vec<(f64, usize, usize)>> = Vec::new();
    let mut targets = Vec::new();
    let mut current = vec![Vec::new()];
    for (p, pl) in net.params().iter().enumerate() {
        let s = scores.layer(p);
        let mask = pl.weight_mask.data().iter().chain(pl.bias_mask.data());
        let mut live = Vec::new();
        for (j, (&score, &m)) in s.iter().zip(mask).enumerate() {
            if m == 0.0 {
                continue;
            }
            if score.is_nan() {
                return Err(Error::NonFinite(format!(
                    "NaN saliency at layer {p}, index {j}"
                )));
            }
            live.push((score, p, j));
        }
        match scope {
            PruneScope::PerLayer => {
                targets.push(
                    ((pl.len() as f64 * f).floor() as usize).saturating_sub(pl.masked_count()),
                );
                groups.push(live);
            }
            PruneScope::Global => current[0].extend(live),
        }
    }
    if scope == PruneScope::Global {
        let total = net.param_count();
        targets.push(((total as f64 * f).floor() as usize).saturating_sub(net.masked_count()));
        groups = current;
    }
    let mut pruned = 0;
    for (mut live, k) in groups.into_iter().zip(targets) {
        live.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        for &(_, p, j) in live.iter().take(k) {
            let pl = &mut net.params_mut()[p];
            let nw = pl.weight.len();
            if j < nw {
                pl.weight_mask.data_mut()[j] = 0.0;
            } else {
                pl.bias_mask.data_mut()[j - nw] = 0.0;
            }
            pruned += 1;
        }
    }
    for pl in net.params_mut() {
        pl.apply_masks();
    }
    Ok(PruneResult {
        pruned_params: pruned,
        pruned_units: Vec::new(),
        achieved_fraction: net.pruned_fraction(),
    })
}

/// Masks a unit's incoming weights and bias.
pub fn mask_unit(net: &mut Network, unit: UnitRef) -> Result<usize> {
    unit.check(net)?;
    let pl = &mut net.params_mut()[unit.layer];
    let before = pl.masked_count();
    pl.weight_mask.row_mut(unit.unit).fill(0.0);
    pl.bias_mask.data_mut()[unit.unit] = 0.0;
    pl.apply_masks();
    Ok(pl.masked_count() - before)
}

/// Folds a unit's constant activation `g(μ)` into the biases of the next
/// layer: `b_j += Σ W_j,unit · g(μ)`, summed over the kernel or spatial block
/// the unit feeds. Consumers that are themselves pruned, or whose bias is
/// masked, are left alone.
pub fn propagate_bias(net: &mut Network, unit: UnitRef, mean: f64) -> Result<()> {
    unit.check(net)?;
    let (consumer, groups) = net.outgoing_indices(unit.layer, unit.unit)?;
    let value = consumer.activation.map_or(mean, |g| g.apply(mean));
    if value == 0.0 {
        return Ok(());
    }
    let next = &mut net.params_mut()[consumer.layer];
    for (j, group) in groups.iter().enumerate() {
        if next.bias_mask.data()[j] == 0.0 {
            continue;
        }
        let w = next.weight.data();
        let s: f64 = group.iter().map(|&i| w[i]).sum();
        next.bias.data_mut()[j] += s * value;
    }
    Ok(())
}

/// Masks the `⌊n·f⌋ − already pruned` lowest-scored units of every table's
/// layer. With `propagate`, each layer's unit means are computed on those
/// samples right before the layer is pruned and folded into the next layer.
pub fn prune_units(
    net: &mut Network,
    tables: &[UnitScoreTable],
    f: f64,
    propagate: Option<&Batch>,
) -> Result<PruneResult> {
    check_fraction(f)?;
    let last = net.param_layer_count() - 1;
    let mut order: Vec<&UnitScoreTable> = tables.iter().collect();
    order.sort_by_key(|t| t.layer);
    if order.windows(2).any(|w| w[0].layer == w[1].layer) {
        return Err(Error::invalid("two score tables for the same layer"));
    }
    let mut result = PruneResult::default();
    for table in order {
        let p = table.layer;
        if p >= last {
            return Err(Error::invalid(format!(
                "layer {p} is the output layer and cannot lose units"
            )));
        }
        let n = net.units(p);
        if table.scores.len() != n {
            return Err(Error::shape(format!(
                "layer {p} has {n} units, table has {}",
                table.scores.len()
            )));
        }
        if let Some(i) = table.scores.iter().position(|s| s.is_nan()) {
            return Err(Error::NonFinite(format!(
                "NaN unit score at layer {p}, unit {i}"
            )));
        }
        let already = (0..n).filter(|&u| net.params()[p].unit_pruned(u)).count();
        let k = ((n as f64 * f).floor() as usize).saturating_sub(already);
        if k == 0 {
            continue;
        }
        let mut live: Vec<usize> = (0..n)
            .filter(|&u| !net.params()[p].unit_pruned(u))
            .collect();
        live.sort_by(|&a, &b| {
            table.scores[a]
                .partial_cmp(&table.scores[b])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        let chosen: Vec<usize> = live.into_iter().take(k).collect();
        let means = match propagate {
            Some(data) => Some(unit_means(net, p, data)?),
            None => None,
        };
        for &u in &chosen {
            let r = UnitRef::new(p, u);
            if let Some(m) = &means {
                propagate_bias(net, r, m[u])?;
            }
            result.pruned_params += mask_unit(net, r)?;
            result.pruned_units.push(r);
        }
    }
    result.achieved_fraction = net.pruned_fraction();
    Ok(result)
}

/// Loss change on `data` from unit-pruning every hidden layer to `f` with
/// `kind`, then reverting. Returns the change and the score tables used.
pub fn measure_unit_pruning(
    net: &mut Network,
    data: &Batch,
    kind: UnitScorerKind,
    f: f64,
    bias_propagation: bool,
    seed: u64,
) -> Result<(f64, Vec<UnitScoreTable>)> {
    let snap = Snapshot::take(net, 0);
    let outcome = (|| {
        let before = batch_loss(net, data, DEFAULT_CHUNK)?;
        let tables = (0..net.param_layer_count() - 1)
            .map(|p| score_units(net, p, kind, Some(data), seed))
            .collect::<Result<Vec<_>>>()?;
        prune_units(net, &tables, f, bias_propagation.then_some(data))?;
        Ok((batch_loss(net, data, DEFAULT_CHUNK)? - before, tables))
    })();
    snap.restore(net)?;
    outcome
}

/// Live/total incoming weight ratio and live/total outgoing weight ratio of
/// every unit of layer `p` (not the output layer).
pub fn unit_connectivity(net: &Network, p: usize) -> Result<Vec<(f64, f64)>> {
    let pl = &net.params()[p];
    (0..pl.units())
        .map(|u| {
            let row = pl.weight_mask.row(u);
            let live_in = row.iter().filter(|&&m| m != 0.0).count();
            let (c, groups) = net.outgoing_indices(p, u)?;
            let mask = net.params()[c.layer].weight_mask.data();
            let total_out: usize = groups.iter().map(Vec::len).sum();
            let live_out = groups.iter().flatten().filter(|&&i| mask[i] != 0.0).count();
            Ok((
                live_in as f64 / row.len() as f64,
                live_out as f64 / total_out as f64,
            ))
        })
        .collect()
}

/// Masks every unit whose live-incoming or live-outgoing ratio is at most
/// `f_nz`, with optional bias propagation on `propagate`.
pub fn remove_low_nnz_units(
    net: &mut Network,
    f_nz: f64,
    propagate: Option<&Batch>,
) -> Result<PruneResult> {
    check_fraction(f_nz)?;
    let mut result = PruneResult::default();
    for p in 0..net.param_layer_count() - 1 {
        let ratios = unit_connectivity(net, p)?;
        let doomed: Vec<usize> = ratios
            .iter()
            .enumerate()
            .filter(|&(u, &(i, o))| !net.params()[p].unit_pruned(u) && (i <= f_nz || o <= f_nz))
            .map(|(u, _)| u)
            .collect();
        if doomed.is_empty() {
            continue;
        }
        let means = match propagate {
            Some(data) => Some(unit_means(net, p, data)?),
            None => None,
        };
        for u in doomed {
            let r = UnitRef::new(p, u);
            if let Some(m) = &means {
                propagate_bias(net, r, m[u])?;
            }
            result.pruned_params += mask_unit(net, r)?;
            result.pruned_units.push(r);
        }
    }
    result.achieved_fraction = net.pruned_fraction();
    Ok(result)
}

/// Result of [`shrink`]: the smaller network and, per parametered layer, the
/// original indices of the units that were kept.
#[derive(Debug, Clone)]
pub struct Shrunk {
    pub net: Network,
    pub kept: Vec<Vec<usize>>,
}

/// Physically removes units whose incoming weights are all masked (their
/// constant output folded into the next layer's biases) and units whose
/// outgoing weights are all masked, repeating until nothing changes. Every
/// layer keeps at least one unit; output units are never removed.
/// Mean-replacement state is not carried over.
pub fn shrink(net: &Network) -> Result<Shrunk> {
    let np = net.param_layer_count();
    let mut alive: Vec<Vec<bool>> = (0..np).map(|p| vec![true; net.units(p)]).collect();
    let mut biases: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|pl| pl.bias.data().to_vec())
        .collect();
    let mut bias_masks: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|pl| pl.bias_mask.data().to_vec())
        .collect();
    let consumers = (0..np.saturating_sub(1))
        .map(|p| net.consumer(p))
        .collect::<Result<Vec<_>>>()?;

    loop {
        let mut changed = false;
        for p in 0..np - 1 {
            let pl = &net.params()[p];
            let c = consumers[p];
            let next = &net.params()[c.layer];
            for u in 0..pl.units() {
                if !alive[p][u] || alive[p].iter().filter(|&&a| a).count() == 1 {
                    continue;
                }
                let in_dead = incoming_columns(net, p, &alive)
                    .iter()
                    .all(|&col| pl.weight_mask.row(u)[col] == 0.0);
                let (_, groups) = net.outgoing_indices(p, u)?;
                let out_dead = groups
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| alive[c.layer][j])
                    .all(|(_, g)| g.iter().all(|&i| next.weight_mask.data()[i] == 0.0));
                if !(in_dead || out_dead) {
                    continue;
                }
                if in_dead && !out_dead {
                    let b = biases[p][u] * bias_masks[p][u];
                    let value = c.activation.map_or(b, |g| g.apply(b));
                    if value != 0.0 {
                        for (j, g) in groups.iter().enumerate() {
                            let s: f64 = g.iter().map(|&i| next.weight.data()[i]).sum();
                            if s != 0.0 {
                                biases[c.layer][j] += s * value;
                                bias_masks[c.layer][j] = 1.0;
                            }
                        }
                    }
                }
                alive[p][u] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let kept: Vec<Vec<usize>> = alive
        .iter()
        .map(|a| {
            a.iter()
                .enumerate()
                .filter(|(_, &k)| k)
                .map(|(u, _)| u)
                .collect()
        })
        .collect();
    let spec = shrunk_spec(net, &kept)?;
    let mut params = Vec::with_capacity(np);
    for p in 0..np {
        let pl = &net.params()[p];
        let cols = incoming_columns(net, p, &alive);
        let rows = &kept[p];
        let mut w = Vec::with_capacity(rows.len() * cols.len());
        let mut wm = Vec::with_capacity(rows.len() * cols.len());
        for &u in rows {
            let (r, m) = (pl.weight.row(u), pl.weight_mask.row(u));
            w.extend(cols.iter().map(|&c| r[c]));
            wm.extend(cols.iter().map(|&c| m[c]));
        }
        let mut wshape = pl.weight.shape().to_vec();
        wshape[0] = rows.len();
        if wshape.len() == 4 {
            wshape[1] = cols.len() / (wshape[2] * wshape[3]);
        } else {
            wshape[1] = cols.len();
        }
        let b: Vec<f64> = rows.iter().map(|&u| biases[p][u]).collect();
        let bm: Vec<f64> = rows.iter().map(|&u| bias_masks[p][u]).collect();
        params.push(ParamLayer {
            weight: Tensor::new(wshape.clone(), w)?,
            weight_mask: Tensor::new(wshape, wm)?,
            bias: Tensor::new(vec![rows.len()], b)?,
            bias_mask: Tensor::new(vec![rows.len()], bm)?,
        });
    }
    Ok(Shrunk {
        net: Network::from_params(spec, params)?,
        kept,
    })
}

/// Column indices (within a weight row) that survive given the alive units of
/// the previous parametered layer.
fn incoming_columns(net: &Network, p: usize, alive: &[Vec<bool>]) -> Vec<usize> {
    let row_len = net.params()[p].fan_in();
    if p == 0 {
        return (0..row_len).collect();
    }
    let prev_alive = &alive[p - 1];
    let per_unit = row_len / prev_alive.len();
    (0..row_len).filter(|&c| prev_alive[c / per_unit]).collect()
}

fn shrunk_spec(net: &Network, kept: &[Vec<usize>]) -> Result<NetworkSpec> {
    let spec = net.spec();
    let mut layers = spec.layers.clone();
    for p in 0..net.param_layer_count() {
        let li = net.spec_index(p);
        let out = kept[p].len();
        let inp = if p == 0 {
            None
        } else {
            let prev = kept[p - 1].len();
            Some(match net.consumer(p - 1)?.fanout {
                Fanout::Columns { spatial } => prev * spatial,
                Fanout::Channel | Fanout::Feature => prev,
            })
        };
        match &mut layers[li] {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                ..
            } => {
                *out_channels = out;
                if let Some(i) = inp {
                    *in_channels = i;
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                *out_features = out;
                if let Some(i) = inp {
                    *in_features = i;
                }
            }
            _ => unreachable!("parametered layer"),
        }
    }
    Ok(NetworkSpec {
        input: spec.input,
        layers,
        preset: None,
    })
}

/// Min-max normalized weight magnitudes of one layer. Linear layers are
/// `O×I`; conv layers are laid out with each unit as a band of `kh` rows and
/// each input kernel as a band of `kw` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Colormap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Colormap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols)
                .map(|c| format!("{}", self.get(r, c)))
                .collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Binary 8-bit greyscale PGM.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(
            self.values
                .iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        out
    }
}

pub fn colormap(net: &Network, p: usize) -> Result<Colormap> {
    if p >= net.param_layer_count() {
        return Err(Error::invalid(format!("no parametered layer {p}")));
    }
    let w = &net.params()[p].weight;
    let mags: Vec<f64> = w.data().iter().map(|v| v.abs()).collect();
    let (lo, hi) = mags
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let norm = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    let shape = w.shape();
    if shape.len() == 2 {
        return Ok(Colormap {
            rows: shape[0],
            cols: shape[1],
            values: mags.into_iter().map(norm).collect(),
        });
    }
    let (o, i, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
    let (rows, cols) = (o * kh, i * kw);
    let mut values = vec![0.0; rows * cols];
    for u in 0..o {
        for c in 0..i {
            for y in 0..kh {
                for x in 0..kw {
                    let v = mags[((u * i + c) * kh + y) * kw + x];
                    values[(u * kh + y) * cols + c * kw + x] = norm(v);
                }
            }
        }
    }
    Ok(Colormap { rows, cols, values })
}

/// Writes `<prefix>.csv` and `<prefix>.pgm`.
pub fn emit_colormap(net: &Network, p: usize, prefix: &Path) -> Result<Colormap> {
    let map = colormap(net, p)?;
    let csv = prefix.with_extension("csv");
    std::fs::write(&csv, map.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let pgm = prefix.with_extension("pgm");
    std::fs::write(&pgm, map.to_pgm()).map_err(|e| Error::io(&pgm, e))?;
    Ok(map)
}
