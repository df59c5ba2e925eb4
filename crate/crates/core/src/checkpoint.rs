//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BATT"  u32 version
//! u64 n   n bytes of UTF-8 JSON header {config, epoch, adam}
//! u64 count
//! count × record:
//!     u64 len, len bytes of name
//!     u64 rank, rank × u64 extent
//!     product(extents) × f32
//! ```
//!
//! Records hold the model parameters in construction order, then, when the
//! header's `adam` is present, first moments as `adam.m.<name>` and second
//! moments as `adam.v.<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::network::{ModelConfig, Network};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BATT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    epoch: u64,
    adam: Option<AdamHeader>,
}

/// Decoded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub epoch: u64,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.network.config()
    }
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u64(buf, name.len() as u64);
    buf.extend_from_slice(name.as_bytes());
    put_u64(buf, t.rank() as u64);
    for &d in t.shape() {
        put_u64(buf, d as u64);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(network: &Network, epoch: u64, optimizer: Option<&Adam>) -> Result<Vec<u8>> {
    let header = Header {
        config: network.config().clone(),
        epoch,
        adam: optimizer.map(|a| AdamHeader {
            step: a.step_count(),
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let params = network.params();
    let mut buf = Vec::with_capacity(64 + json.len() + 4 * params.num_elements() * 3);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u64(&mut buf, json.len() as u64);
    buf.extend_from_slice(&json);
    let count = params.len() * if optimizer.is_some() { 3 } else { 1 };
    put_u64(&mut buf, count as u64);
    for (name, t) in params.iter() {
        put_tensor(&mut buf, name, t);
    }
    if let Some(adam) = optimizer {
        for (prefix, moments) in [("adam.m.", adam.first_moments()), ("adam.v.", adam.second_moments())] {
            for ((name, _), t) in params.iter().zip(moments) {
                put_tensor(&mut buf, &format!("{prefix}{name}"), t);
            }
        }
    }
    Ok(buf)
}

pub fn save(path: &Path, network: &Network, epoch: u64, optimizer: Option<&Adam>) -> Result<()> {
    write_atomic(path, &to_bytes(network, epoch, optimizer)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A length that must fit in the remaining bytes at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.bytes.len() - self.pos) as u64;
        if n.checked_mul(unit as u64).is_none_or(|b| b > remaining) {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        Ok(n as usize)
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let n = self.len(1)?;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = self.len(8)?;
        let mut shape = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let d = self.u64()? as usize;
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("extent overflow in {name}")))?;
            shape.push(d);
        }
        let raw = self.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::Format(format!("extent overflow in {name}")))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = r.len(1)?;
    let header: Header = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut network = Network::<f32>::new(header.config.clone())?;
    let count = r.len(1)?;
    let per_set = network.params().len();
    let expected = per_set * if header.adam.is_some() { 3 } else { 1 };
    if count != expected {
        return Err(Error::Format(format!("checkpoint has {count} records, expected {expected}")));
    }
    let mut sets = Vec::new();
    for prefix in ["", "adam.m.", "adam.v."].into_iter().take(count / per_set.max(1)) {
        let mut set = ParamSet::new();
        for (want, _) in network.params().iter() {
            let (name, t) = r.record()?;
            if name != format!("{prefix}{want}") {
                return Err(Error::Format(format!("expected record {prefix}{want}, found {name}")));
            }
            set.add(want, t);
        }
        sets.push(set);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
    }
    let mut sets = sets.into_iter();
    network.load_params(&sets.next().unwrap_or_default())?;
    let optimizer = match header.adam {
        Some(h) => {
            let m: Vec<Tensor<f32>> = sets.next().unwrap().iter().map(|(_, t)| t.clone()).collect();
            let v: Vec<Tensor<f32>> = sets.next().unwrap().iter().map(|(_, t)| t.clone()).collect();
            let mut adam = Adam::from_state(network.params(), h.step, m, v)?;
            adam.beta1 = h.beta1;
            adam.beta2 = h.beta2;
            adam.eps = h.eps;
            Some(adam)
        }
        None => None,
    };
    Ok(Checkpoint {
        network,
        epoch: header.epoch,
        optimizer,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint and rejects it unless its model configuration equals
/// `expected`.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load(path)?;
    if ck.config() != expected {
        return Err(Error::Config(format!(
            "checkpoint config {:?} differs from requested {:?}",
            ck.config(),
            expected
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Variant;
    use crate::priors::uniform_priors_n;

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            channels: 3,
            kernel: 3,
            n_descriptors: 4,
            patch_size: 11,
            attention_kernel: 3,
            se_reduction: 2,
            seed: 1,
        }
    }

    fn trained_adam(net: &mut Network) -> Adam {
        let mut adam = Adam::new(net.params());
        let grads: Vec<_> = net
            .params()
            .iter()
            .map(|(_, t)| Tensor::from_fn(t.shape().to_vec(), |i| (i as f32 * 0.37).sin()))
            .collect();
        adam.step(net.params_mut(), &grads, 1e-3).unwrap();
        adam
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for variant in Variant::ALL {
            let mut net = Network::<f32>::new(cfg(variant)).unwrap();
            let adam = trained_adam(&mut net);
            let bytes = to_bytes(&net, 4, Some(&adam)).unwrap();
            let ck = from_bytes(&bytes).unwrap();
            assert_eq!(ck.epoch, 4);
            assert_eq!(ck.network, net);
            assert_eq!(ck.optimizer.as_ref(), Some(&adam));
            assert_eq!(to_bytes(&ck.network, ck.epoch, ck.optimizer.as_ref()).unwrap(), bytes);

            let x = Tensor::from_fn(vec![1, 1, 12, 12], |i| (i as f32).cos());
            let p = [uniform_priors_n(4).unwrap()];
            assert_eq!(net.predict(&x, &p).unwrap(), ck.network.predict(&x, &p).unwrap());
        }
    }

    #[test]
    fn optimizer_state_is_optional() {
        let net = Network::<f32>::new(cfg(Variant::Base)).unwrap();
        let ck = from_bytes(&to_bytes(&net, 0, None).unwrap()).unwrap();
        assert!(ck.optimizer.is_none());
        assert_eq!(ck.network, net);
    }

    #[test]
    fn file_round_trip_and_config_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.batt");
        let net = Network::<f32>::new(cfg(Variant::BioAtt)).unwrap();
        save(&path, &net, 2, None).unwrap();
        assert_eq!(load(&path).unwrap().network, net);
        assert!(load_expecting(&path, &cfg(Variant::BioAtt)).is_ok());
        let err = load_expecting(&path, &cfg(Variant::Spatial)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn rejects_damaged_files() {
        let net = Network::<f32>::new(cfg(Variant::Spatial)).unwrap();
        let bytes = to_bytes(&net, 1, None).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic")));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(from_bytes(&bad), Err(Error::Format(m)) if m.contains("version")));

        for cut in [3, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut at {cut}");
        }

        let mut long = bytes.clone();
        long.push(0);
        assert!(from_bytes(&long).is_err());

        // a header describing a different architecture no longer matches the records
        let other = to_bytes(&Network::<f32>::new(cfg(Variant::Base)).unwrap(), 1, None).unwrap();
        let hlen = u64::from_le_bytes(other[8..16].try_into().unwrap()) as usize;
        let blen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut mixed = other[..16 + hlen].to_vec();
        mixed.extend_from_slice(&bytes[16 + blen..]);
        assert!(from_bytes(&mixed).is_err());
    }

    #[test]
    fn layout_starts_with_magic_version_and_header() {
        let net = Network::<f32>::new(cfg(Variant::Base)).unwrap();
        let bytes = to_bytes(&net, 3, None).unwrap();
        assert_eq!(&bytes[..4], b"BATT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + n]).unwrap();
        assert_eq!(header["epoch"], 3);
        assert_eq!(header["config"]["variant"], "base");
        let count = u64::from_le_bytes(bytes[16 + n..24 + n].try_into().unwrap());
        assert_eq!(count, 20);
        let name_len = u64::from_le_bytes(bytes[24 + n..32 + n].try_into().unwrap()) as usize;
        assert_eq!(&bytes[32 + n..32 + n + name_len], b"conv1.weight");
    }
}
