//! Tensors flow through a sequential stack of conv/linear/activation/pool
//! layers ending in a loss head.

mod network;
pub mod ops;
mod spec;

pub use network::{
    Consumer, Fanout, Gradients, InitRule, InitSpec, MeanReplacer, Network, ParamLayer,
};
pub use spec::{
    cifar_spec, mnist_spec, preset, tiny_spec, Activation, LayerSpec, NetworkSpec, PRESET_NAMES,
};
