//! Checkpoint files: a canonical text header of sorted `key=value` lines,
//! one blank line, then named tensors in the binary tensor format. Writing
//! is canonical (sorted keys, sorted tensor names), so identical state
//! produces identical bytes and round trips are bit-exact.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::losses::{ArcHead, ArcParams, CenterBank};
use crate::network::{Network, NetworkConfig, StageSpec};
use crate::tensor::{Activation, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    header: BTreeMap<String, String>,
    tensors: BTreeMap<String, Tensor>,
}

fn check_text(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() {
        return Err(Error::Usage(format!("checkpoint {kind} must not be empty")));
    }
    if s.contains('\n') || s.contains('\r') {
        return Err(Error::Usage(format!("checkpoint {kind} {s:?} contains a line break")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    /// Inserts or overwrites one header entry. Values use the type's plain
    /// text form; floats round-trip exactly through their shortest form.
    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        let value = value.to_string();
        check_text("key", key)?;
        if key.contains('=') {
            return Err(Error::Usage(format!("checkpoint key {key:?} contains '='")));
        }
        check_text("value", &value)?;
        self.header.insert(key.to_string(), value);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Io(format!("checkpoint header is missing key {key}")))
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| {
            Error::Io(format!("checkpoint key {key} holds unparseable value {raw:?}"))
        })
    }

    pub fn insert_tensor(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        check_text("tensor name", name)?;
        if self.tensors.contains_key(name) {
            return Err(Error::Usage(format!("duplicate checkpoint tensor {name}")));
        }
        self.tensors.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Io(format!("checkpoint is missing tensor {name}")))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (key, value) in &self.header {
            out.extend_from_slice(key.as_bytes());
            out.push(b'=');
            out.extend_from_slice(value.as_bytes());
            out.push(b'\n');
        }
        out.push(b'\n');
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            tensor.write_to(&mut out).expect("write to Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut header = BTreeMap::new();
        let mut pos = 0;
        loop {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|i| pos + i)
                .ok_or_else(|| Error::Io("checkpoint header is not newline terminated".into()))?;
            if end == pos {
                pos += 1;
                break;
            }
            let line = std::str::from_utf8(&bytes[pos..end])
                .map_err(|_| Error::Io("checkpoint header is not UTF-8".into()))?;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Io(format!("checkpoint header line {line:?} lacks '='")))?;
            if header.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Io(format!("checkpoint header repeats key {key}")));
            }
            pos = end + 1;
        }
        let mut tensors = BTreeMap::new();
        let mut cursor = &bytes[pos..];
        while !cursor.is_empty() {
            if cursor.len() < 4 {
                return Err(Error::Io("checkpoint ends inside a tensor name length".into()));
            }
            let len = u32::from_le_bytes(cursor[..4].try_into().unwrap()) as usize;
            cursor = &cursor[4..];
            if cursor.len() < len {
                return Err(Error::Io("checkpoint ends inside a tensor name".into()));
            }
            let name = std::str::from_utf8(&cursor[..len])
                .map_err(|_| Error::Io("checkpoint tensor name is not UTF-8".into()))?
                .to_string();
            cursor = &cursor[len..];
            let tensor = Tensor::read_from(&mut cursor)?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(Error::Io(format!("checkpoint repeats tensor {name}")));
            }
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Everything needed to resume scoring: the network, the angular-margin
/// head, the center bank, and the loss hyperparameters they were trained
/// with.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub network: Network,
    pub head: ArcHead,
    pub bank: CenterBank,
    pub arc: ArcParams,
    pub lambda: f64,
}

pub fn model_to_checkpoint(bundle: &ModelBundle) -> Result<Checkpoint> {
    let mut cp = Checkpoint::new();
    cp.set("format", 1)?;
    let cfg = &bundle.network.config;
    cp.set("net.input.c", cfg.input.0)?;
    cp.set("net.input.h", cfg.input.1)?;
    cp.set("net.input.w", cfg.input.2)?;
    cp.set("net.stem.channels", cfg.stem_channels)?;
    cp.set("net.stem.kernel", cfg.stem_kernel)?;
    cp.set("net.stem.stride", cfg.stem_stride)?;
    cp.set("net.stage.count", cfg.stages.len())?;
    for (i, stage) in cfg.stages.iter().enumerate() {
        cp.set(format!("net.stage{i}.blocks").as_str(), stage.blocks)?;
        cp.set(format!("net.stage{i}.channels").as_str(), stage.channels)?;
        cp.set(format!("net.stage{i}.stride").as_str(), stage.stride)?;
    }
    cp.set("net.activation", cfg.activation.name())?;
    cp.set("net.negative_slope", cfg.negative_slope)?;
    cp.set("net.embedding_dim", cfg.embedding_dim)?;
    cp.set("net.classes", cfg.classes)?;
    cp.set("loss.scale", bundle.arc.scale)?;
    cp.set("loss.margin", bundle.arc.margin)?;
    cp.set("loss.alpha", bundle.bank.alpha)?;
    cp.set("loss.lambda", bundle.lambda)?;

    let mut network = bundle.network.clone();
    for (name, tensor) in network.params_mut() {
        cp.insert_tensor(&format!("net.{name}"), tensor.clone())?;
    }
    for (name, tensor) in bundle.network.buffers() {
        cp.insert_tensor(&format!("net.{name}"), tensor)?;
    }
    cp.insert_tensor("head.weight", bundle.head.weight.clone())?;
    cp.insert_tensor("bank.centers", bundle.bank.centers.clone())?;
    Ok(cp)
}

fn take_tensor_into(cp: &Checkpoint, name: &str, target: &mut Tensor) -> Result<()> {
    let stored = cp.tensor(name)?;
    if stored.shape != target.shape {
        return Err(Error::Io(format!(
            "checkpoint tensor {name} has shape {:?}, model expects {:?}",
            stored.shape, target.shape
        )));
    }
    target.data.clone_from(&stored.data);
    Ok(())
}

pub fn checkpoint_to_model(cp: &Checkpoint) -> Result<ModelBundle> {
    let format: u32 = cp.get_parsed("format")?;
    if format != 1 {
        return Err(Error::Io(format!("unsupported checkpoint format {format}")));
    }
    let stage_count: usize = cp.get_parsed("net.stage.count")?;
    let mut stages = Vec::with_capacity(stage_count);
    for i in 0..stage_count {
        stages.push(StageSpec {
            blocks: cp.get_parsed(&format!("net.stage{i}.blocks"))?,
            channels: cp.get_parsed(&format!("net.stage{i}.channels"))?,
            stride: cp.get_parsed(&format!("net.stage{i}.stride"))?,
        });
    }
    let config = NetworkConfig {
        input: (
            cp.get_parsed("net.input.c")?,
            cp.get_parsed("net.input.h")?,
            cp.get_parsed("net.input.w")?,
        ),
        stem_channels: cp.get_parsed("net.stem.channels")?,
        stem_kernel: cp.get_parsed("net.stem.kernel")?,
        stem_stride: cp.get_parsed("net.stem.stride")?,
        stages,
        activation: Activation::parse(cp.get("net.activation")?)?,
        negative_slope: cp.get_parsed("net.negative_slope")?,
        embedding_dim: cp.get_parsed("net.embedding_dim")?,
        classes: cp.get_parsed("net.classes")?,
    };
    let arc = ArcParams {
        scale: cp.get_parsed("loss.scale")?,
        margin: cp.get_parsed("loss.margin")?,
    };
    let lambda: f64 = cp.get_parsed("loss.lambda")?;
    let alpha: f64 = cp.get_parsed("loss.alpha")?;

    let mut network = Network::new(config.clone(), 0)?;
    for (name, tensor) in network.params_mut() {
        take_tensor_into(cp, &format!("net.{name}"), tensor)?;
    }
    let mut buffers = network.buffers();
    for (name, tensor) in buffers.iter_mut() {
        take_tensor_into(cp, &format!("net.{name}"), tensor)?;
    }
    network.set_buffers(&buffers)?;

    let mut head = ArcHead::new(config.embedding_dim, config.classes, 0)?;
    take_tensor_into(cp, "head.weight", &mut head.weight)?;
    let mut bank = CenterBank::new(config.classes, config.embedding_dim, alpha)?;
    take_tensor_into(cp, "bank.centers", &mut bank.centers)?;

    Ok(ModelBundle { network, head, bank, arc, lambda })
}

pub fn save_model(path: &Path, bundle: &ModelBundle) -> Result<()> {
    model_to_checkpoint(bundle)?.save(path)
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    checkpoint_to_model(&Checkpoint::load(path)?)
}
