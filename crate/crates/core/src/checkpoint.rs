//! Binary network checkpoints.
//!
//! Layout (little-endian): magic `PRLB`, `u16` version, `u32` length plus the
//! spec as JSON text, `u32` parametered-layer count, then per layer the
//! weight, bias, weight-mask and bias-mask arrays, each as a `u64` length
//! followed by that many `f64` values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec, ParamLayer};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PRLB";
pub const VERSION: u16 = 1;

pub fn encode(net: &Network) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let spec = serde_json::to_vec(net.spec())?;
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec);
    out.extend_from_slice(&(net.param_layer_count() as u32).to_le_bytes());
    for pl in net.params() {
        for t in [&pl.weight, &pl.bias, &pl.weight_mask, &pl.bias_mask] {
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn array(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let n = self.u64(what)? as usize;
        let expected: usize = shape.iter().product();
        if n != expected {
            return Err(Error::Checkpoint(format!(
                "{what} has {n} values, spec needs {expected}"
            )));
        }
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("length overflow".into()))?,
            what,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::from_untrusted(shape.to_vec(), data)
            .map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected PRLB"
        )));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let spec_len = r.u32("spec length")? as usize;
    let spec: NetworkSpec = serde_json::from_slice(r.take(spec_len, "spec")?)
        .map_err(|e| Error::Checkpoint(format!("spec: {e}")))?;
    spec.validate()?;
    let count = r.u32("layer count")? as usize;
    let idx = spec.param_layer_indices();
    if count != idx.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameter layers stored, spec has {}",
            idx.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for (p, &li) in idx.iter().enumerate() {
        let (wshape, nb) = spec.layers[li].param_shapes().expect("parametered layer");
        params.push(ParamLayer {
            weight: r.array(&wshape, &format!("layer {p} weight"))?,
            bias: r.array(&[nb], &format!("layer {p} bias"))?,
            weight_mask: r.array(&wshape, &format!("layer {p} weight mask"))?,
            bias_mask: r.array(&[nb], &format!("layer {p} bias mask"))?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last layer",
            bytes.len() - r.pos
        )));
    }
    Network::from_params(spec, params)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{tiny_spec, Activation, InitSpec};

    fn masked_net() -> Network {
        let mut net = Network::build(tiny_spec(Activation::Tanh), InitSpec::seeded(9)).unwrap();
        net.params_mut()[1].weight_mask.data_mut()[3] = 0.0;
        net.params_mut()[2].bias_mask.data_mut()[1] = 0.0;
        for pl in net.params_mut() {
            pl.apply_masks();
        }
        net
    }

    #[test]
    fn round_trip_is_exact() {
        let net = masked_net();
        let back = decode(&encode(&net).unwrap()).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.spec(), net.spec());
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode(&masked_net()).unwrap();
        for cut in [0, 3, 5, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(_))),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }
}
