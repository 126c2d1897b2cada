#![allow(dead_code)]

use prunelab::data::Batch;
use prunelab::hessian::{batch_gradients, batch_loss};
use prunelab::nn::{Activation, InitSpec, LayerSpec, Network, NetworkSpec};
use prunelab::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    CrossEntropy,
    Sum,
}

/// Layout knobs for [`small_spec`].
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub in_channels: usize,
    pub size: usize,
    pub conv1: (usize, usize),
    pub pool: bool,
    pub conv2: Option<(usize, usize)>,
    pub hidden: usize,
    pub classes: usize,
    pub acts: [Activation; 3],
    pub head: Head,
}

fn act(a: Activation) -> LayerSpec {
    a.layer()
}

pub fn small_spec(l: Layout) -> NetworkSpec {
    let (c1, k1) = l.conv1;
    let mut layers = vec![LayerSpec::conv(l.in_channels, c1, k1), act(l.acts[0])];
    let mut side = l.size - k1 + 1;
    let mut ch = c1;
    if l.pool {
        layers.push(LayerSpec::Maxpool2x2);
        side /= 2;
    }
    if let Some((c2, k2)) = l.conv2 {
        layers.push(LayerSpec::conv(ch, c2, k2));
        layers.push(act(l.acts[1]));
        side = side - k2 + 1;
        ch = c2;
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::linear(ch * side * side, l.hidden));
    layers.push(act(l.acts[2]));
    layers.push(LayerSpec::linear(l.hidden, l.classes));
    layers.push(match l.head {
        Head::CrossEntropy => LayerSpec::SoftmaxCrossEntropy,
        Head::Sum => LayerSpec::SumHead,
    });
    NetworkSpec::new([l.in_channels, l.size, l.size], layers)
}

fn random_activation(rng: &mut ChaCha8Rng) -> Activation {
    if rng.random_bool(0.5) {
        Activation::Relu
    } else {
        Activation::Tanh
    }
}

/// The `i`-th random small network. Pooling, the second conv and the head
/// cycle with `i`, so any run of 12 consecutive indices covers every layer
/// kind.
pub fn random_layout(i: usize, rng: &mut ChaCha8Rng) -> Layout {
    let size = rng.random_range(6..=9);
    let k1 = rng.random_range(2..=3);
    Layout {
        in_channels: rng.random_range(1..=2),
        size,
        conv1: (rng.random_range(1..=3), k1),
        pool: i.is_multiple_of(2),
        conv2: (!i.is_multiple_of(3)).then(|| (rng.random_range(1..=3), 2)),
        hidden: rng.random_range(2..=5),
        classes: rng.random_range(2..=4),
        acts: [
            random_activation(rng),
            random_activation(rng),
            random_activation(rng),
        ],
        head: if i % 4 == 3 {
            Head::Sum
        } else {
            Head::CrossEntropy
        },
    }
}

pub fn random_batch(spec: &NetworkSpec, classes: usize, n: usize, rng: &mut ChaCha8Rng) -> Batch {
    let [c, h, w] = spec.input;
    let data: Vec<f64> = (0..n * c * h * w)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Batch {
        images: Tensor::new(vec![n, c, h, w], data).unwrap(),
        labels: (0..n).map(|_| rng.random_range(0..classes)).collect(),
    }
}

pub fn build(spec: NetworkSpec, seed: u64) -> Network {
    Network::build(spec, InitSpec::seeded(seed)).unwrap()
}

/// A random small network with a batch of `n` random samples.
pub fn random_case(i: usize, seed: u64, n: usize) -> (Network, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
    let layout = random_layout(i, &mut rng);
    let spec = small_spec(layout);
    let batch = random_batch(&spec, layout.classes, n, &mut rng);
    (build(spec, rng.random()), batch)
}

pub fn flat_gradient(net: &mut Network, data: &Batch) -> Vec<f64> {
    batch_gradients(net, data, 250).unwrap().1.flat()
}

/// Central finite differences of the mean loss, one coordinate at a time.
pub fn numeric_gradient(net: &mut Network, data: &Batch, h: f64) -> Vec<f64> {
    let base = net.flat_params().into_data();
    let mut w = base.clone();
    let mut g = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        w[i] = base[i] + h;
        net.set_flat_params(&w).unwrap();
        let up = batch_loss(net, data, 250).unwrap();
        w[i] = base[i] - h;
        net.set_flat_params(&w).unwrap();
        let down = batch_loss(net, data, 250).unwrap();
        w[i] = base[i];
        g.push((up - down) / (2.0 * h));
    }
    net.set_flat_params(&base).unwrap();
    g
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Ranks with ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Which side of every ReLU kink each pre-activation sits on, and which
/// element wins every max-pool window. Two parameter settings with equal
/// patterns lie in the same smooth piece of the loss.
pub fn switch_pattern(net: &Network, batch: &Batch) -> Vec<u8> {
    let outputs = net.layer_outputs(&batch.images, &batch.labels).unwrap();
    let mut pattern = Vec::new();
    for (li, layer) in net.spec().layers.iter().enumerate() {
        let input = if li == 0 {
            &batch.images
        } else {
            &outputs[li - 1]
        };
        match layer {
            LayerSpec::Relu => pattern.extend(input.data().iter().map(|&x| (x > 0.0) as u8)),
            LayerSpec::Maxpool2x2 => {
                let s = input.shape();
                let (h, w) = (s[2], s[3]);
                let x = input.data();
                for plane in 0..s[0] * s[1] {
                    let base = plane * h * w;
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            let idx = [
                                base + 2 * oy * w + 2 * ox,
                                base + 2 * oy * w + 2 * ox + 1,
                                base + (2 * oy + 1) * w + 2 * ox,
                                base + (2 * oy + 1) * w + 2 * ox + 1,
                            ];
                            let mut best = 0;
                            for k in 1..4 {
                                if x[idx[k]] > x[idx[best]] {
                                    best = k;
                                }
                            }
                            pattern.push(best as u8);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    pattern
}
