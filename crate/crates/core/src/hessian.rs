//! Hessian-vector products by central differences of exact gradients, plus
//! full Hessian and Hessian-diagonal assembly for small models.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{Gradients, Network};

pub const DEFAULT_FD_EPS: f64 = 1e-4;
pub const DEFAULT_HESSIAN_CAP: usize = 2000;
/// Samples per forward/backward chunk when accumulating over a batch.
pub const DEFAULT_CHUNK: usize = 250;

/// A scalar loss over a flat parameter vector with an exact gradient.
pub trait Objective {
    fn dim(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;
    fn loss_and_grad(&mut self) -> Result<(f64, Vec<f64>)>;
}

/// Mean loss of a network over a fixed batch, accumulated chunk by chunk in
/// order.
pub struct NetObjective<'a> {
    pub net: &'a mut Network,
    pub data: &'a Batch,
    pub chunk: usize,
}

impl<'a> NetObjective<'a> {
    pub fn new(net: &'a mut Network, data: &'a Batch) -> Self {
        NetObjective {
            net,
            data,
            chunk: DEFAULT_CHUNK,
        }
    }
}

impl Objective for NetObjective<'_> {
    fn dim(&self) -> usize {
        self.net.param_count()
    }

    fn params(&self) -> Vec<f64> {
        self.net.flat_params().into_data()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.net.set_flat_params(params)
    }

    fn loss_and_grad(&mut self) -> Result<(f64, Vec<f64>)> {
        let (loss, grads) = batch_gradients(self.net, self.data, self.chunk)?;
        Ok((loss, grads.flat()))
    }
}

/// Mean loss and gradient over `data`, split into chunks of `chunk` samples.
/// Each chunk's contribution is weighted by its share of the samples.
pub fn batch_gradients(net: &mut Network, data: &Batch, chunk: usize) -> Result<(f64, Gradients)> {
    if data.is_empty() {
        return Err(Error::invalid("gradient over an empty batch"));
    }
    let total = data.len() as f64;
    let mut acc: Option<Gradients> = None;
    let mut loss = 0.0;
    for part in data.chunks(chunk) {
        let share = part.len() as f64 / total;
        let l = net.forward(&part.images, &part.labels)?;
        let g = net.backward()?;
        loss += share * l;
        match acc.as_mut() {
            None => {
                let mut g = g;
                for t in g.weight.iter_mut().chain(g.bias.iter_mut()) {
                    t.data_mut().iter_mut().for_each(|v| *v *= share);
                }
                // chunked output gradients are not meaningful across chunks
                g.outputs.clear();
                acc = Some(g);
            }
            Some(a) => {
                for (dst, src) in a
                    .weight
                    .iter_mut()
                    .chain(a.bias.iter_mut())
                    .zip(g.weight.iter().chain(g.bias.iter()))
                {
                    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                        *d += share * s;
                    }
                }
            }
        }
    }
    Ok((loss, acc.expect("at least one chunk")))
}

/// Mean loss over `data` without touching the network's cache.
pub fn batch_loss(net: &Network, data: &Batch, chunk: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("loss over an empty batch"));
    }
    let mut total = 0.0;
    for part in data.chunks(chunk) {
        total += net
            .sample_losses(&part.images, &part.labels)?
            .iter()
            .sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `H·v` as `(∇L(w+εv̂) − ∇L(w−εv̂))·‖v‖/(2ε)` with `v̂ = v/‖v‖`. Parameters are
/// restored bit-exactly before returning.
pub fn hvp<O: Objective + ?Sized>(obj: &mut O, v: &[f64], eps: f64) -> Result<Vec<f64>> {
    let n = obj.dim();
    if v.len() != n {
        return Err(Error::shape(format!(
            "direction has {} values, objective has {n}",
            v.len()
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("hvp direction".into()));
    }
    let scale = norm(v);
    if scale == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let base = obj.params();
    let shifted = |sign: f64| -> Vec<f64> {
        base.iter()
            .zip(v)
            .map(|(w, d)| w + sign * eps * d / scale)
            .collect()
    };
    let result = (|| {
        obj.set_params(&shifted(1.0))?;
        let (_, plus) = obj.loss_and_grad()?;
        obj.set_params(&shifted(-1.0))?;
        let (_, minus) = obj.loss_and_grad()?;
        Ok::<_, Error>((plus, minus))
    })();
    obj.set_params(&base)?;
    let (plus, minus) = result?;
    let out: Vec<f64> = plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| (p - m) * scale / (2.0 * eps))
        .collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(
            "gradient during Hessian-vector product".into(),
        ));
    }
    Ok(out)
}

/// Dense Hessian, row-major `dim × dim`, symmetrized.
#[derive(Debug, Clone, PartialEq)]
pub struct Hessian {
    pub dim: usize,
    pub values: Vec<f64>,
    /// `max |H − Hᵀ|` of the raw finite-difference matrix.
    pub asymmetry: f64,
}

impl Hessian {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.dim {
            let row: Vec<String> = (0..self.dim)
                .map(|j| format!("{}", self.get(i, j)))
                .collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Raw (unsymmetrized) Hessian columns: column `i` is `hvp(e_i)`.
pub fn hessian_columns<O: Objective + ?Sized>(
    obj: &mut O,
    eps: f64,
    cap: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = obj.dim();
    if n > cap {
        return Err(Error::CapExceeded {
            what: "full Hessian",
            needed: n,
            cap,
            advice: "use Hessian-vector products instead",
        });
    }
    let mut e = vec![0.0; n];
    (0..n)
        .map(|i| {
            e[i] = 1.0;
            let col = hvp(obj, &e, eps);
            e[i] = 0.0;
            col
        })
        .collect()
}

pub fn full_hessian<O: Objective + ?Sized>(obj: &mut O, eps: f64, cap: usize) -> Result<Hessian> {
    let cols = hessian_columns(obj, eps, cap)?;
    let n = cols.len();
    let mut values = vec![0.0; n * n];
    let mut asymmetry: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            // H[i][j] is entry i of column j
            let hij = cols[j][i];
            let hji = cols[i][j];
            asymmetry = asymmetry.max((hij - hji).abs());
            values[i * n + j] = 0.5 * (hij + hji);
        }
    }
    log::debug!("assembled {n}×{n} Hessian, asymmetry {asymmetry:.3e}");
    Ok(Hessian {
        dim: n,
        values,
        asymmetry,
    })
}

/// Hessian diagonal: read off the full Hessian under `cap`, otherwise one
/// gradient difference per coordinate.
pub fn hessian_diag<O: Objective + ?Sized>(obj: &mut O, eps: f64, cap: usize) -> Result<Vec<f64>> {
    let n = obj.dim();
    if n <= cap {
        return Ok(full_hessian(obj, eps, cap)?.diagonal());
    }
    let mut e = vec![0.0; n];
    let mut diag = Vec::with_capacity(n);
    for i in 0..n {
        e[i] = 1.0;
        diag.push(hvp(obj, &e, eps)?[i]);
        e[i] = 0.0;
    }
    Ok(diag)
}

#[cfg(test)]
pub(crate) mod test_objectives {
    use super::*;

    /// `L = ½ Σ d_i w_i²`.
    pub struct DiagQuadratic {
        pub w: Vec<f64>,
        pub d: Vec<f64>,
    }

    impl Objective for DiagQuadratic {
        fn dim(&self) -> usize {
            self.w.len()
        }
        fn params(&self) -> Vec<f64> {
            self.w.clone()
        }
        fn set_params(&mut self, p: &[f64]) -> Result<()> {
            self.w.copy_from_slice(p);
            Ok(())
        }
        fn loss_and_grad(&mut self) -> Result<(f64, Vec<f64>)> {
            let loss = 0.5
                * self
                    .w
                    .iter()
                    .zip(&self.d)
                    .map(|(w, d)| d * w * w)
                    .sum::<f64>();
            let g = self.w.iter().zip(&self.d).map(|(w, d)| d * w).collect();
            Ok((loss, g))
        }
    }
}
