//! `CRN1` tensor container: a model configuration header followed by named
//! little-endian f32 tensors. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model_with, HeadInit, ModelConfig, ModelState, SegNet};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const CRN_MAGIC: &[u8; 4] = b"CRN1";
pub const CRN_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl TensorFile {
    pub fn new(config: ModelConfig) -> Self {
        Self {
            config,
            tensors: BTreeMap::new(),
        }
    }

    /// Adds every tensor of `module` under `prefix`.
    pub fn push_module(&mut self, prefix: &str, module: &impl Module<f32>) {
        for (name, _, t) in module.tensors() {
            self.tensors.insert(join(prefix, &name), t.clone());
        }
    }

    /// Overwrites every tensor of `module` from the entries under `prefix`.
    pub fn fill_module(&self, prefix: &str, module: &mut impl Module<f32>) -> Result<()> {
        for (name, _, t) in module.tensors_mut() {
            let key = join(prefix, &name);
            let src = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{key}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "tensor `{key}` has shape {:?}, model expects {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(CRN_MAGIC);
        out.extend_from_slice(&CRN_VERSION.to_le_bytes());
        u32le(&mut out, self.config.classes);
        u32le(&mut out, self.config.channels.len());
        for &c in &self.config.channels {
            u32le(&mut out, c);
        }
        u32le(&mut out, self.config.head_width);
        u32le(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            u32le(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            u32le(&mut out, t.shape().len());
            for &d in t.shape() {
                u32le(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CRN_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "bad magic, expected CRN1".into(),
            });
        }
        let version = r.u32("version")?;
        if version != CRN_VERSION {
            return r.fail(format!("unsupported version {version}"));
        }
        let classes = r.u32("class count")? as usize;
        let levels = r.u32("level count")? as usize;
        if levels > 64 {
            return r.fail(format!("{levels} encoder levels"));
        }
        let channels = (0..levels).map(|_| r.u32("channel width").map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
        let head_width = r.u32("head width")? as usize;
        let config = ModelConfig {
            channels,
            head_width,
            classes,
        };
        config.validate().map_err(|e| Error::Parse {
            offset: r.pos as u64,
            message: e.to_string(),
        })?;
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Parse {
                    offset: r.pos as u64,
                    message: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let ndim = r.u32("rank")? as usize;
            if ndim > 8 {
                return r.fail(format!("tensor `{name}` has rank {ndim}"));
            }
            let shape = (0..ndim).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= (bytes.len() - r.pos) / 4);
            let Some(n) = n else {
                return r.fail(format!("tensor `{name}` of shape {shape:?} exceeds the remaining file"));
            };
            let data = r
                .take(4 * n, "tensor data")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name, Tensor::from_vec(&shape, data));
        }
        if r.pos != bytes.len() {
            return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn to_model(&self, prefix: &str) -> Result<ModelState> {
        let mut m = build_model_with::<f32>(0, &self.config, HeadInit::Independent)?;
        self.fill_module(prefix, &mut m)?;
        Ok(m)
    }

    /// Encoder and main head only; auxiliary head tensors may be absent.
    pub fn to_segnet(&self, prefix: &str) -> Result<SegNet> {
        let mut m = build_model_with::<f32>(0, &self.config, HeadInit::Independent)?.into_segnet();
        self.fill_module(prefix, &mut m)?;
        Ok(m)
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: String) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos as u64,
            message,
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn save_model(path: impl AsRef<Path>, model: &ModelState) -> Result<()> {
    let mut f = TensorFile::new(model.config().clone());
    f.push_module("", model);
    f.save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelState> {
    TensorFile::load(path)?.to_model("")
}

pub fn save_segnet(path: impl AsRef<Path>, net: &SegNet) -> Result<()> {
    let mut f = TensorFile::new(net.config().clone());
    f.push_module("", net);
    f.save(path)
}

pub fn load_segnet(path: impl AsRef<Path>) -> Result<SegNet> {
    TensorFile::load(path)?.to_segnet("")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelState {
        build_model_with(3, &ModelConfig::new(&[4, 4, 8, 8], 2).with_head_width(4), HeadInit::Independent).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let mut f = TensorFile::new(m.config().clone());
        f.push_module("", &m);
        let bytes = f.encode();
        let back = TensorFile::decode(&bytes).unwrap();
        assert_eq!(back, f);
        let m2 = back.to_model("").unwrap();
        for ((na, _, a), (nb, _, b)) in m.tensors().into_iter().zip(m2.tensors()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.to_segnet("").unwrap(), m.clone().into_segnet());
    }

    #[test]
    fn prefixed_sections_coexist() {
        let m = model();
        let teacher = m.net.clone();
        let mut f = TensorFile::new(m.config().clone());
        f.push_module("student", &m);
        f.push_module("teacher", &teacher);
        assert_eq!(f.to_segnet("teacher").unwrap(), teacher);
        assert!(f.to_model("teacher").is_err());
    }

    #[test]
    fn corrupt_inputs_give_parse_errors() {
        let m = model();
        let mut f = TensorFile::new(m.config().clone());
        f.push_module("", &m);
        let bytes = f.encode();
        for cut in [0, 3, 10, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(TensorFile::decode(&bytes[..cut]), Err(Error::Parse { .. })), "cut {cut}");
        }
        let mut bad = bytes;
        bad[1] = b'Z';
        assert!(matches!(TensorFile::decode(&bad), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn wrong_architecture_is_rejected() {
        let m = model();
        let mut f = TensorFile::new(ModelConfig::new(&[4, 4, 8, 16], 2).with_head_width(4));
        f.push_module("", &m);
        assert!(matches!(f.to_model(""), Err(Error::Shape(_))));
    }
}
