//! Binary checkpoints.
//!
//! ```text
//! "PNN1" | u32 version | u32 count | count x (u16 name_len | name | u8 ndim | ndim x u32 | f32 data)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::latent::{GaussianLatent, RaterBank};
use crate::network::{ConvLayer, SegModel};
use crate::tensor::Tensor;

use super::adam::{AdamSlot, AdamState};

pub const MAGIC: [u8; 4] = *b"PNN1";
pub const VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
        let ndim = u8::try_from(t.shape().len())
            .map_err(|_| Error::InvalidArgument(format!("{name} has too many dimensions")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::InvalidArgument(format!("{name} dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
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
                Error::Truncated(format!(
                    "needed {n} bytes for {what} at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap());
        let name = std::str::from_utf8(r.take(len as usize, "name")?)
            .map_err(|_| Error::Truncated(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let ndim = r.take(1, "rank")?[0] as usize;
        let shape = (0..ndim)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|_| ndim > 0)
            .ok_or_else(|| {
                Error::Truncated(format!("tensor {name} has an invalid shape {shape:?}"))
            })?;
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Truncated(format!("tensor {name} is too large")))?,
            &name,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Truncated(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Truncated(format!(
            "{} unexpected trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn write_tensors(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode(tensors)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<NamedTensors> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SegModel,
    pub bank: RaterBank,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
}

fn latent_names(r: usize) -> (String, String) {
    (format!("latent.{r}.mu"), format!("latent.{r}.chol"))
}

impl Checkpoint {
    pub fn to_tensors(&self) -> NamedTensors {
        let mut out: NamedTensors = vec![
            ("meta.epoch".into(), Tensor::scalar(self.epoch as f32)),
            (
                "meta.prior_var".into(),
                Tensor::scalar(self.bank.prior_var() as f32),
            ),
        ];
        for layer in self.model.layers() {
            out.push((format!("{}.weight", layer.name), layer.weight.clone()));
            out.push((format!("{}.bias", layer.name), layer.bias.clone()));
        }
        for (r, lat) in self.bank.latents().iter().enumerate() {
            let (mu, chol) = latent_names(r);
            out.push((mu, lat.mu.clone()));
            out.push((chol, lat.chol_raw.clone()));
        }
        for (name, slot) in &self.adam.slots {
            out.push((format!("adam.m.{name}"), slot.m.clone()));
            out.push((format!("adam.v.{name}"), slot.v.clone()));
            // step counts stay exact in f32 up to 2^24
            out.push((format!("adam.t.{name}"), Tensor::scalar(slot.step as f32)));
        }
        out
    }

    pub fn from_tensors(tensors: NamedTensors) -> Result<Self> {
        let bad = |msg: String| Error::InvalidArgument(format!("checkpoint: {msg}"));
        let mut epoch = None;
        let mut prior_var = None;
        let mut layers: Vec<ConvLayer> = Vec::new();
        let mut latents: Vec<(Option<Tensor<f32>>, Option<Tensor<f32>>)> = Vec::new();
        let mut adam = AdamState::new();
        let mut pending_weight: Option<(String, Tensor<f32>)> = None;
        for (name, t) in tensors {
            if let Some(layer) = name
                .strip_suffix(".weight")
                .filter(|_| !name.starts_with("adam."))
            {
                pending_weight = Some((layer.to_string(), t));
            } else if let Some(layer) = name
                .strip_suffix(".bias")
                .filter(|_| !name.starts_with("adam."))
            {
                let (wname, weight) = pending_weight
                    .take()
                    .filter(|(w, _)| w == layer)
                    .ok_or_else(|| bad(format!("bias {name} without its weight")))?;
                layers.push(ConvLayer {
                    name: wname,
                    weight,
                    bias: t,
                });
            } else if let Some(rest) = name.strip_prefix("latent.") {
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| bad(format!("bad latent name {name}")))?;
                let r: usize = idx
                    .parse()
                    .map_err(|_| bad(format!("bad latent index in {name}")))?;
                if latents.len() <= r {
                    latents.resize(r + 1, (None, None));
                }
                match field {
                    "mu" => latents[r].0 = Some(t),
                    "chol" => latents[r].1 = Some(t),
                    _ => return Err(bad(format!("unknown latent field in {name}"))),
                }
            } else if let Some(rest) = name.strip_prefix("adam.") {
                let (kind, param) = rest
                    .split_once('.')
                    .ok_or_else(|| bad(format!("bad optimizer entry {name}")))?;
                let slot = adam
                    .slots
                    .entry(param.to_string())
                    .or_insert_with(|| AdamSlot::new(t.shape()));
                match kind {
                    "m" => slot.m = t,
                    "v" => slot.v = t,
                    "t" => slot.step = t.item() as u64,
                    _ => return Err(bad(format!("unknown optimizer field in {name}"))),
                }
            } else {
                match name.as_str() {
                    "meta.epoch" => epoch = Some(t.item() as usize),
                    "meta.prior_var" => prior_var = Some(t.item() as f64),
                    _ => return Err(bad(format!("unexpected tensor {name}"))),
                }
            }
        }
        if let Some((w, _)) = pending_weight {
            return Err(bad(format!("weight {w} without a bias")));
        }
        let latents = latents
            .into_iter()
            .enumerate()
            .map(|(r, (mu, chol))| match (mu, chol) {
                (Some(mu), Some(chol_raw)) => Ok(GaussianLatent { mu, chol_raw }),
                _ => Err(bad(format!("latent {r} is incomplete"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let model = SegModel::from_layers(layers)?;
        let prior_var = prior_var.ok_or_else(|| bad("missing meta.prior_var".into()))?;
        let bank = RaterBank::from_latents(latents, prior_var)?;
        if bank.dim() != model.latent_dim() {
            return Err(bad(format!(
                "latent dimension {} does not match the head ({})",
                bank.dim(),
                model.latent_dim()
            )));
        }
        for (name, slot) in &adam.slots {
            if slot.m.shape() != slot.v.shape() {
                return Err(bad(format!("optimizer moments of {name} disagree")));
            }
        }
        Ok(Checkpoint {
            model,
            bank,
            adam,
            epoch: epoch.ok_or_else(|| bad("missing meta.epoch".into()))?,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_tensors(path, &ckpt.to_tensors())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_tensors(read_tensors(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    fn sample() -> Checkpoint {
        let model = SegModel::new(
            ModelConfig {
                widths: [4, 4, 4],
                ..ModelConfig::new(3, 2)
            },
            1,
        )
        .unwrap();
        let bank = RaterBank::init(2, 2, 2.0, 8.0, 1).unwrap();
        let mut adam = AdamState::new();
        let mut p = bank.latents()[0].mu.clone();
        adam.update(
            "latent.0.mu",
            &mut p,
            &Tensor::from_vec(vec![0.5, -1.0]),
            0.1,
        )
        .unwrap();
        Checkpoint {
            model,
            bank,
            adam,
            epoch: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pnn");
        let ck = sample();
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let (a, b) = (ck.to_tensors(), back.to_tensors());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn header_is_as_documented() {
        let bytes = encode(&[("x".into(), Tensor::from_vec(vec![1.0f32, 2.0]))]).unwrap();
        let mut want = b"PNN1".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(1u16.to_le_bytes());
        want.push(b'x');
        want.push(1);
        want.extend(2u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend(2.0f32.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = encode(&sample().to_tensors()).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'Q';
        assert!(matches!(decode(&bad_magic), Err(Error::BadMagic { .. })));
        let mut future = bytes.clone();
        future[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = decode(&future).unwrap_err();
        assert!(matches!(
            err,
            Error::UnsupportedVersion {
                found: 2,
                supported: 1
            }
        ));
        assert!(err.to_string().contains('2'));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Truncated(_))),
                "cut {cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
