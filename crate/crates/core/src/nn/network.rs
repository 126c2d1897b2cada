use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops;
use super::spec::{Activation, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How initial weights are bounded per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitRule {
    /// `uniform(−1/√fan_in, 1/√fan_in)`, the usual framework default.
    #[default]
    InvSqrtFanIn,
    /// `uniform(−1/fan_in, 1/fan_in)`.
    InvFanIn,
}

impl InitRule {
    pub fn bound(self, fan_in: usize) -> f64 {
        match self {
            InitRule::InvSqrtFanIn => 1.0 / (fan_in as f64).sqrt(),
            InitRule::InvFanIn => 1.0 / fan_in as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitSpec {
    pub rule: InitRule,
    pub seed: u64,
}

impl InitSpec {
    pub fn seeded(seed: u64) -> Self {
        InitSpec {
            rule: InitRule::default(),
            seed,
        }
    }
}

/// Weights, bias and their 0/1 masks for one conv or linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub weight_mask: Tensor,
    pub bias_mask: Tensor,
}

impl ParamLayer {
    pub fn units(&self) -> usize {
        self.bias.len()
    }

    /// Incoming weights per unit.
    pub fn fan_in(&self) -> usize {
        self.weight.row_len()
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn apply_masks(&mut self) {
        for (w, m) in self
            .weight
            .data_mut()
            .iter_mut()
            .zip(self.weight_mask.data())
        {
            if *m == 0.0 {
                *w = 0.0;
            }
        }
        for (b, m) in self.bias.data_mut().iter_mut().zip(self.bias_mask.data()) {
            if *m == 0.0 {
                *b = 0.0;
            }
        }
    }

    pub fn masked_count(&self) -> usize {
        let zeros = |t: &Tensor| t.data().iter().filter(|&&m| m == 0.0).count();
        zeros(&self.weight_mask) + zeros(&self.bias_mask)
    }

    /// A unit is pruned when its incoming weights and bias are all masked.
    pub fn unit_pruned(&self, unit: usize) -> bool {
        self.bias_mask.data()[unit] == 0.0 && self.weight_mask.row(unit).iter().all(|&m| m == 0.0)
    }
}

/// Replaces selected units' layer outputs with a per-unit constant.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeanReplacer {
    pub means: Option<Vec<f64>>,
    pub enabled: Vec<bool>,
    /// Identifies the sample set the means were computed on.
    pub fingerprint: Option<u64>,
}

impl MeanReplacer {
    fn active(&self) -> bool {
        self.means.is_some() && self.enabled.iter().any(|&e| e)
    }
}

struct Propagated {
    outputs: Vec<Tensor>,
    last: Tensor,
    losses: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    input: Tensor,
    labels: Vec<usize>,
    outputs: Vec<Tensor>,
    sample_losses: Vec<f64>,
}

/// Gradients of the batch-mean loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Per parametered layer, congruent to the weights. Zero at masked positions.
    pub weight: Vec<Tensor>,
    /// Per parametered layer. Zero at masked positions.
    pub bias: Vec<Tensor>,
    /// `∂L/∂(output of layer i)` for every layer of the spec, batch-shaped.
    pub outputs: Vec<Tensor>,
}

impl Gradients {
    /// Flattened in the same order as [`Network::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (w, b) in self.weight.iter().zip(&self.bias) {
            v.extend_from_slice(w.data());
            v.extend_from_slice(b.data());
        }
        v
    }
}

/// How a unit's activation reaches the next parametered layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fanout {
    /// Conv into conv: the unit is one input channel of every next kernel.
    Channel,
    /// Conv through flatten into linear: the unit owns `spatial` consecutive columns.
    Columns { spatial: usize },
    /// Linear into linear: the unit is one input column.
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Consumer {
    /// Parametered-layer index of the consumer.
    pub layer: usize,
    /// Nonlinearity applied between the unit and the consumer.
    pub activation: Option<Activation>,
    pub fanout: Fanout,
}

#[derive(Debug)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<Vec<usize>>,
    param_layers: Vec<usize>,
    params: Vec<ParamLayer>,
    replacers: Vec<MeanReplacer>,
    cache: Option<ForwardCache>,
}

impl Clone for Network {
    /// Clones parameters, masks and mean-replacement state; the activation
    /// cache is not carried over.
    fn clone(&self) -> Self {
        Network {
            spec: self.spec.clone(),
            shapes: self.shapes.clone(),
            param_layers: self.param_layers.clone(),
            params: self.params.clone(),
            replacers: self.replacers.clone(),
            cache: None,
        }
    }
}

impl Network {
    /// Builds a network with uniform fan-in initialization and all-ones masks.
    pub fn build(spec: NetworkSpec, init: InitSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let mut params = Vec::new();
        for layer in spec.layers.iter().filter(|l| l.has_params()) {
            let (wshape, nb) = layer.param_shapes().expect("parametered layer");
            let fan_in = layer.fan_in().expect("parametered layer");
            let bound = init.rule.bound(fan_in);
            let mut sample = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            let wlen = wshape.iter().product();
            let weight = Tensor::new(wshape.clone(), sample(wlen))?;
            let bias = Tensor::new(vec![nb], sample(nb))?;
            params.push(ParamLayer {
                weight_mask: Tensor::filled(&wshape, 1.0),
                bias_mask: Tensor::filled(&[nb], 1.0),
                weight,
                bias,
            });
        }
        Self::from_params(spec, params)
    }

    /// Assembles a network from explicit parameters, checking shapes and mask
    /// consistency. Masks are re-applied.
    pub fn from_params(spec: NetworkSpec, mut params: Vec<ParamLayer>) -> Result<Self> {
        let shapes = spec.validate()?;
        let param_layers = spec.param_layer_indices();
        if params.len() != param_layers.len() {
            return Err(Error::shape(format!(
                "spec has {} parametered layers, got {} parameter sets",
                param_layers.len(),
                params.len()
            )));
        }
        for (p, (&li, layer)) in param_layers.iter().zip(params.iter_mut()).enumerate() {
            let (wshape, nb) = spec.layers[li].param_shapes().expect("parametered layer");
            let ok = layer.weight.shape() == wshape.as_slice()
                && layer.weight_mask.shape() == wshape.as_slice()
                && layer.bias.shape() == [nb]
                && layer.bias_mask.shape() == [nb];
            if !ok {
                return Err(Error::shape(format!(
                    "parameter layer {p} does not match {}",
                    spec.layers[li]
                )));
            }
            let binary = |t: &Tensor| t.data().iter().all(|&m| m == 0.0 || m == 1.0);
            if !binary(&layer.weight_mask) || !binary(&layer.bias_mask) {
                return Err(Error::invalid(format!("mask of layer {p} is not binary")));
            }
            if !layer.weight.all_finite() || !layer.bias.all_finite() {
                return Err(Error::NonFinite(format!("parameters of layer {p}")));
            }
            layer.apply_masks();
        }
        let replacers = params
            .iter()
            .map(|p| MeanReplacer {
                enabled: vec![false; p.units()],
                ..Default::default()
            })
            .collect();
        Ok(Network {
            spec,
            shapes,
            param_layers,
            params,
            replacers,
            cache: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn params(&self) -> &[ParamLayer] {
        &self.params
    }

    /// Direct parameter access. Callers that change masks or weights should
    /// finish with [`ParamLayer::apply_masks`].
    pub fn params_mut(&mut self) -> &mut [ParamLayer] {
        self.cache = None;
        &mut self.params
    }

    pub fn param_layer_count(&self) -> usize {
        self.params.len()
    }

    /// Spec index of parametered layer `p`.
    pub fn spec_index(&self, p: usize) -> usize {
        self.param_layers[p]
    }

    pub fn units(&self, p: usize) -> usize {
        self.params[p].units()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamLayer::len).sum()
    }

    pub fn masked_count(&self) -> usize {
        self.params.iter().map(ParamLayer::masked_count).sum()
    }

    pub fn pruned_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.param_count() as f64
    }

    /// Number of classes produced by the final parametered layer.
    pub fn outputs(&self) -> usize {
        self.params.last().map(ParamLayer::units).unwrap_or(0)
    }

    pub fn replacer(&self, p: usize) -> &MeanReplacer {
        &self.replacers[p]
    }

    /// Installs per-unit means for layer `p`, disabling any active replacement.
    pub fn install_means(&mut self, p: usize, means: Vec<f64>, fingerprint: u64) -> Result<()> {
        if means.len() != self.units(p) {
            return Err(Error::shape(format!(
                "layer {p} has {} units, got {} means",
                self.units(p),
                means.len()
            )));
        }
        let r = &mut self.replacers[p];
        r.enabled.iter_mut().for_each(|e| *e = false);
        r.means = Some(means);
        r.fingerprint = Some(fingerprint);
        self.cache = None;
        Ok(())
    }

    /// Toggles constant-mean output for one unit.
    pub fn set_replacement(&mut self, p: usize, unit: usize, enabled: bool) -> Result<()> {
        let r = self
            .replacers
            .get_mut(p)
            .ok_or_else(|| Error::invalid(format!("no parametered layer {p}")))?;
        if r.means.is_none() {
            return Err(Error::invalid(format!("no means installed for layer {p}")));
        }
        let slot = r
            .enabled
            .get_mut(unit)
            .ok_or_else(|| Error::invalid(format!("unit {unit} out of range for layer {p}")))?;
        *slot = enabled;
        self.cache = None;
        Ok(())
    }

    pub fn clear_replacement(&mut self) {
        for r in &mut self.replacers {
            r.enabled.iter_mut().for_each(|e| *e = false);
        }
        self.cache = None;
    }

    /// All parameters, ordered layer by layer, each layer as its weights
    /// (row-major) followed by its bias.
    pub fn flat_params(&self) -> Tensor {
        let mut v = Vec::with_capacity(self.param_count());
        for p in &self.params {
            v.extend_from_slice(p.weight.data());
            v.extend_from_slice(p.bias.data());
        }
        Tensor::new(vec![v.len()], v).expect("non-empty parameter vector")
    }

    /// Inverse of [`Network::flat_params`]; masked positions are forced to 0.
    pub fn set_flat_params(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.param_count() {
            return Err(Error::shape(format!(
                "flat vector has {} values, network has {} parameters",
                v.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let nw = p.weight.len();
            p.weight.data_mut().copy_from_slice(&v[offset..offset + nw]);
            offset += nw;
            let nb = p.bias.len();
            p.bias.data_mut().copy_from_slice(&v[offset..offset + nb]);
            offset += nb;
            p.apply_masks();
        }
        self.cache = None;
        Ok(())
    }

    /// Flat 0/1 mask in [`Network::flat_params`] order.
    pub fn flat_mask(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for p in &self.params {
            v.extend_from_slice(p.weight_mask.data());
            v.extend_from_slice(p.bias_mask.data());
        }
        v
    }

    /// Offset of parametered layer `p` in the flat vector.
    pub fn flat_offset(&self, p: usize) -> usize {
        self.params[..p].iter().map(ParamLayer::len).sum()
    }

    fn check_batch(&self, batch: &Tensor, labels: &[usize]) -> Result<usize> {
        let shape = batch.shape();
        if shape.len() != 4 || shape[1..] != self.spec.input {
            return Err(Error::shape(format!(
                "batch shape {shape:?} does not match N×{:?}",
                self.spec.input
            )));
        }
        let n = shape[0];
        if labels.len() != n {
            return Err(Error::shape(format!(
                "{} labels for {n} samples",
                labels.len()
            )));
        }
        if matches!(
            self.spec.layers.last(),
            Some(LayerSpec::SoftmaxCrossEntropy)
        ) {
            let classes = self.shapes[self.shapes.len() - 2][0];
            if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::invalid(format!("label {bad} ≥ {classes} classes")));
            }
        }
        Ok(n)
    }

    fn input_shape_of(&self, layer: usize) -> Vec<usize> {
        if layer == 0 {
            self.spec.input.to_vec()
        } else {
            self.shapes[layer - 1].clone()
        }
    }

    fn param_index_of(&self, layer: usize) -> Option<usize> {
        self.param_layers.iter().position(|&l| l == layer)
    }

    /// Runs layers `start..` on `input` (the batch-shaped output of layer
    /// `start − 1`, or the network input when `start == 0`). Returns the
    /// retained layer outputs (only when `keep`) and per-sample losses.
    fn propagate(
        &self,
        input: &Tensor,
        layers: std::ops::Range<usize>,
        labels: &[usize],
        keep: bool,
    ) -> Propagated {
        let n = input.rows();
        let mut outputs = Vec::new();
        let mut current: Option<Tensor> = None;
        let mut losses = Vec::new();
        for li in layers {
            let x = current.as_ref().unwrap_or(input);
            let in_shape = self.input_shape_of(li);
            let out_shape = &self.shapes[li];
            let mut full = vec![n];
            full.extend_from_slice(out_shape);
            let mut y = Tensor::zeros(&full);
            let out_len = y.row_len();
            match &self.spec.layers[li] {
                LayerSpec::Conv2d { kernel, .. } => {
                    let p = self.param_index_of(li).expect("parametered layer");
                    let pl = &self.params[p];
                    let dims = (in_shape[0], in_shape[1], in_shape[2]);
                    for s in 0..n {
                        ops::conv_forward(
                            x.row(s),
                            dims,
                            pl.weight.data(),
                            pl.bias.data(),
                            *kernel,
                            y.row_mut(s),
                        );
                    }
                    self.apply_replacement(p, &mut y);
                }
                LayerSpec::Linear { .. } => {
                    let p = self.param_index_of(li).expect("parametered layer");
                    let pl = &self.params[p];
                    for s in 0..n {
                        ops::linear_forward(
                            x.row(s),
                            pl.weight.data(),
                            pl.bias.data(),
                            y.row_mut(s),
                        );
                    }
                    self.apply_replacement(p, &mut y);
                }
                LayerSpec::Relu => {
                    for (o, &v) in y.data_mut().iter_mut().zip(x.data()) {
                        *o = v.max(0.0);
                    }
                }
                LayerSpec::Tanh => {
                    for (o, &v) in y.data_mut().iter_mut().zip(x.data()) {
                        *o = v.tanh();
                    }
                }
                LayerSpec::Maxpool2x2 => {
                    let dims = (in_shape[0], in_shape[1], in_shape[2]);
                    for s in 0..n {
                        ops::maxpool_forward(x.row(s), dims, y.row_mut(s));
                    }
                }
                LayerSpec::Flatten => {
                    y.data_mut().copy_from_slice(x.data());
                }
                LayerSpec::SoftmaxCrossEntropy => {
                    let mut scratch = vec![0.0; x.row_len()];
                    for s in 0..n {
                        let l = ops::softmax_cross_entropy(x.row(s), labels[s], &mut scratch);
                        y.row_mut(s)[0] = l;
                    }
                    losses = y.data().to_vec();
                }
                LayerSpec::SumHead => {
                    for s in 0..n {
                        y.row_mut(s)[0] = x.row(s).iter().sum();
                    }
                    losses = y.data().to_vec();
                }
            }
            debug_assert_eq!(out_len, y.row_len());
            if keep {
                outputs.push(y.clone());
            }
            current = Some(y);
        }
        Propagated {
            outputs,
            last: current.unwrap_or_else(|| input.clone()),
            losses,
        }
    }

    fn apply_replacement(&self, p: usize, y: &mut Tensor) {
        let r = &self.replacers[p];
        if !r.active() {
            return;
        }
        let means = r.means.as_ref().expect("active replacer has means");
        let units = self.units(p);
        let per_unit = y.row_len() / units;
        for s in 0..y.rows() {
            let row = y.row_mut(s);
            for (u, &on) in r.enabled.iter().enumerate() {
                if on {
                    row[u * per_unit..(u + 1) * per_unit].fill(means[u]);
                }
            }
        }
    }

    /// Mean loss over the batch; populates the activation cache.
    pub fn forward(&mut self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        self.check_batch(batch, labels)?;
        let Propagated {
            outputs, losses, ..
        } = self.propagate(batch, 0..self.spec.layers.len(), labels, true);
        let loss = mean(&losses);
        self.cache = Some(ForwardCache {
            input: batch.clone(),
            labels: labels.to_vec(),
            outputs,
            sample_losses: losses,
        });
        Ok(loss)
    }

    /// Per-sample losses without touching the cache.
    pub fn sample_losses(&self, batch: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        self.check_batch(batch, labels)?;
        Ok(self
            .propagate(batch, 0..self.spec.layers.len(), labels, false)
            .losses)
    }

    /// Per-sample losses and the per-sample output of the final parametered
    /// layer (logits), without touching the cache.
    pub fn logits(&self, batch: &Tensor, labels: &[usize]) -> Result<(Tensor, Vec<f64>)> {
        self.check_batch(batch, labels)?;
        let nl = self.spec.layers.len();
        let logits = self.propagate(batch, 0..nl - 1, labels, false).last;
        let losses = self.propagate(&logits, nl - 1..nl, labels, false).losses;
        Ok((logits, losses))
    }

    /// All layer outputs for a batch, without touching the cache.
    pub fn layer_outputs(&self, batch: &Tensor, labels: &[usize]) -> Result<Vec<Tensor>> {
        self.check_batch(batch, labels)?;
        Ok(self
            .propagate(batch, 0..self.spec.layers.len(), labels, true)
            .outputs)
    }

    /// Batch output of spec layer `layer`, computing only the layers up to it.
    pub fn output_of(&self, batch: &Tensor, layer: usize) -> Result<Tensor> {
        let n = batch.shape().first().copied().unwrap_or(0);
        let labels = vec![0; n];
        self.check_batch(batch, &labels)?;
        if layer >= self.spec.layers.len() - 1 {
            return Err(Error::invalid(format!(
                "layer {layer} is not a hidden layer"
            )));
        }
        Ok(self.propagate(batch, 0..layer + 1, &labels, false).last)
    }

    /// Per-sample losses when spec layer `layer` receives `input` (the batch
    /// output of layer `layer − 1`).
    pub fn losses_from(&self, layer: usize, input: &Tensor, labels: &[usize]) -> Vec<f64> {
        self.propagate(input, layer..self.spec.layers.len(), labels, false)
            .losses
    }

    /// Cached output of spec layer `layer` from the last forward pass.
    pub fn cached_output(&self, layer: usize) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.outputs[layer])
    }

    pub fn cached_sample_losses(&self) -> Option<&[f64]> {
        self.cache.as_ref().map(|c| c.sample_losses.as_slice())
    }

    /// Gradients of the mean loss of the last forward batch.
    pub fn backward(&mut self) -> Result<Gradients> {
        let cache = self.cache.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let n = cache.input.rows();
        let nl = self.spec.layers.len();
        let mut out_grads: Vec<Tensor> = vec![Tensor::zeros(&[1]); nl];
        let mut wgrads: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| Tensor::zeros(p.weight.shape()))
            .collect();
        let mut bgrads: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| Tensor::zeros(p.bias.shape()))
            .collect();

        // head: ∂L/∂(sample loss) = 1/N
        out_grads[nl - 1] = Tensor::filled(&[n, 1], 1.0 / n as f64);
        let mut dcur = match &self.spec.layers[nl - 1] {
            LayerSpec::SoftmaxCrossEntropy => {
                let logits = &cache.outputs[nl - 2];
                let mut d = Tensor::zeros(logits.shape());
                for s in 0..n {
                    ops::softmax_cross_entropy(logits.row(s), cache.labels[s], d.row_mut(s));
                }
                d.data_mut().iter_mut().for_each(|v| *v /= n as f64);
                d
            }
            LayerSpec::SumHead => Tensor::filled(cache.outputs[nl - 2].shape(), 1.0 / n as f64),
            _ => unreachable!("validated spec ends in a head"),
        };

        for li in (0..nl - 1).rev() {
            out_grads[li] = dcur.clone();
            let x = if li == 0 {
                &cache.input
            } else {
                &cache.outputs[li - 1]
            };
            let y = &cache.outputs[li];
            let in_shape = self.input_shape_of(li);
            let need_input_grad = li > 0;
            let mut dx = Tensor::zeros(x.shape());
            match &self.spec.layers[li] {
                LayerSpec::Conv2d { kernel, .. } => {
                    let p = self.param_index_of(li).expect("parametered layer");
                    self.zero_replaced(p, &mut dcur);
                    let dims = (in_shape[0], in_shape[1], in_shape[2]);
                    let pl = &self.params[p];
                    for s in 0..n {
                        let di = if need_input_grad {
                            Some(dx.row_mut(s))
                        } else {
                            None
                        };
                        ops::conv_backward(
                            x.row(s),
                            dims,
                            pl.weight.data(),
                            *kernel,
                            dcur.row(s),
                            wgrads[p].data_mut(),
                            bgrads[p].data_mut(),
                            di,
                        );
                    }
                }
                LayerSpec::Linear { .. } => {
                    let p = self.param_index_of(li).expect("parametered layer");
                    self.zero_replaced(p, &mut dcur);
                    let pl = &self.params[p];
                    for s in 0..n {
                        let di = if need_input_grad {
                            Some(dx.row_mut(s))
                        } else {
                            None
                        };
                        ops::linear_backward(
                            x.row(s),
                            pl.weight.data(),
                            dcur.row(s),
                            wgrads[p].data_mut(),
                            bgrads[p].data_mut(),
                            di,
                        );
                    }
                }
                LayerSpec::Relu => {
                    for ((d, &g), &v) in dx.data_mut().iter_mut().zip(dcur.data()).zip(x.data()) {
                        *d = if v > 0.0 { g } else { 0.0 };
                    }
                }
                LayerSpec::Tanh => {
                    for ((d, &g), &a) in dx.data_mut().iter_mut().zip(dcur.data()).zip(y.data()) {
                        *d = g * (1.0 - a * a);
                    }
                }
                LayerSpec::Maxpool2x2 => {
                    let dims = (in_shape[0], in_shape[1], in_shape[2]);
                    for s in 0..n {
                        ops::maxpool_backward(x.row(s), dims, dcur.row(s), dx.row_mut(s));
                    }
                }
                LayerSpec::Flatten => {
                    dx.data_mut().copy_from_slice(dcur.data());
                }
                LayerSpec::SoftmaxCrossEntropy | LayerSpec::SumHead => unreachable!(),
            }
            dcur = dx;
        }

        for (p, pl) in self.params.iter().enumerate() {
            mask_in_place(wgrads[p].data_mut(), pl.weight_mask.data());
            mask_in_place(bgrads[p].data_mut(), pl.bias_mask.data());
        }
        Ok(Gradients {
            weight: wgrads,
            bias: bgrads,
            outputs: out_grads,
        })
    }

    fn zero_replaced(&self, p: usize, d: &mut Tensor) {
        let r = &self.replacers[p];
        if !r.active() {
            return;
        }
        let per_unit = d.row_len() / self.units(p);
        for s in 0..d.rows() {
            let row = d.row_mut(s);
            for (u, &on) in r.enabled.iter().enumerate() {
                if on {
                    row[u * per_unit..(u + 1) * per_unit].fill(0.0);
                }
            }
        }
    }

    /// Where the activation of a unit in parametered layer `p` is consumed.
    pub fn consumer(&self, p: usize) -> Result<Consumer> {
        if p + 1 >= self.params.len() {
            return Err(Error::invalid(format!(
                "layer {p} is the output layer and has no consumer"
            )));
        }
        let from = self.param_layers[p];
        let to = self.param_layers[p + 1];
        let mut activation = None;
        let mut flatten_at = None;
        for li in from + 1..to {
            match &self.spec.layers[li] {
                LayerSpec::Relu | LayerSpec::Tanh => {
                    if activation.is_some() {
                        return Err(Error::invalid(format!(
                            "two nonlinearities between layers {p} and {}",
                            p + 1
                        )));
                    }
                    activation = self.spec.layers[li].activation();
                }
                LayerSpec::Maxpool2x2 => {}
                LayerSpec::Flatten => flatten_at = Some(li),
                other => {
                    return Err(Error::invalid(format!(
                        "unsupported layer {other} between layers {p} and {}",
                        p + 1
                    )))
                }
            }
        }
        let fanout = match (&self.spec.layers[from], &self.spec.layers[to]) {
            (LayerSpec::Conv2d { .. }, LayerSpec::Conv2d { .. }) => Fanout::Channel,
            (LayerSpec::Conv2d { .. }, LayerSpec::Linear { .. }) => {
                let li = flatten_at.expect("validated conv→linear passes a flatten");
                let shape = self.input_shape_of(li);
                Fanout::Columns {
                    spatial: shape[1..].iter().product(),
                }
            }
            (LayerSpec::Linear { .. }, LayerSpec::Linear { .. }) => Fanout::Feature,
            (a, b) => return Err(Error::invalid(format!("unsupported connection {a} → {b}"))),
        };
        Ok(Consumer {
            layer: p + 1,
            activation,
            fanout,
        })
    }

    /// Flat weight indices (into the consumer's weight tensor) of the
    /// outgoing connections of `unit`, grouped by consumer unit.
    pub fn outgoing_indices(&self, p: usize, unit: usize) -> Result<(Consumer, Vec<Vec<usize>>)> {
        let c = self.consumer(p)?;
        let next = &self.params[c.layer];
        let row_len = next.fan_in();
        let groups = (0..next.units())
            .map(|j| match c.fanout {
                Fanout::Channel => {
                    let (cin, kh, kw) = {
                        let s = next.weight.shape();
                        (s[1], s[2], s[3])
                    };
                    let base = (j * cin + unit) * kh * kw;
                    (base..base + kh * kw).collect()
                }
                Fanout::Columns { spatial } => {
                    let base = j * row_len + unit * spatial;
                    (base..base + spatial).collect()
                }
                Fanout::Feature => vec![j * row_len + unit],
            })
            .collect();
        Ok((c, groups))
    }
}

fn mask_in_place(values: &mut [f64], mask: &[f64]) {
    for (v, &m) in values.iter_mut().zip(mask) {
        if m == 0.0 {
            *v = 0.0;
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
