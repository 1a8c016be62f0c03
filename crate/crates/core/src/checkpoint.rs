//! Binary checkpoint (`SQCK`) and quantized export (`SQQX`) files.
//!
//! All integers and floats are little-endian.
//!
//! `SQCK` version 1:
//! ```text
//! magic "SQCK" | u32 version | [u8; 32] sha-256 of config text
//! u32 config length | config text (utf-8, canonical key = value lines)
//! u64 iteration | u32 input rank | u64 dims.. | u32 classes | u32 records
//! per record:
//!   u32 name length | name | u32 rank | u64 dims..
//!   f64 values.. | u8 has momentum | [f64 momentum..]
//!   u32 blob length | blob
//! ```
//! The blob is empty except on quantizable weights, where it carries the
//! random state of that layer: u64 seed, u64 layer index, u64 iteration,
//! u8 fixed-partition flag and, when set, u64 stage, f64 ratio, u32 units,
//! u32 count, u32 quantized indices.. (the stage is stored on every layer).
//!
//! `SQQX` version 1:
//! ```text
//! magic "SQQX" | u32 version | [u8; 32] digest | u32 config length | config
//! u32 input rank | u64 dims.. | u32 classes | u32 quantized layers
//! per quantized layer:
//!   u32 name length | name | u32 rank | u64 dims.. | u32 rows | u32 cols
//!   per row: f32 alpha | i8 codes[cols]
//! u32 other tensors
//! per tensor: u32 name length | name | u32 rank | u64 dims.. | f64 values..
//! ```

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::partition::{FixedPartition, PartitionResult};
use crate::tensor::Tensor;
use crate::trainer::{inference_quantize, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SQCK";
pub const EXPORT_MAGIC: &[u8; 4] = b"SQQX";
pub const VERSION: u32 = 1;

/// Everything needed to resume a run bit-exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub trainer: Trainer,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::argument(format!("{v} does not fit in u32")))?;
        self.bytes(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.bytes(&x.to_le_bytes()));
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.bytes(s.as_bytes());
        Ok(())
    }
    fn shape(&mut self, shape: &[usize]) -> Result<()> {
        self.u32(shape.len())?;
        shape.iter().for_each(|&d| self.u64(d as u64));
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            let err = io::Error::from(io::ErrorKind::UnexpectedEof);
            return Err(Error::from_read(err, self.what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0; N];
        self.take(N)?.read_exact(&mut out).map_err(|e| Error::from_read(e, self.what))?;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.corrupt("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.corrupt("name is not utf-8"))
    }
    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()?;
        if rank > 8 {
            return Err(self.corrupt(&format!("implausible rank {rank}")));
        }
        (0..rank).map(|_| Ok(self.u64()? as usize)).collect()
    }
    fn corrupt(&self, msg: &str) -> Error {
        Error::Corruption(format!("{}: {msg}", self.what))
    }
    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(self.corrupt(&format!("{} trailing bytes", self.buf.len())))
        }
    }
}

fn write_header(w: &mut Writer, magic: &[u8; 4], config: &TrainConfig) -> Result<()> {
    w.bytes(magic);
    w.bytes(&VERSION.to_le_bytes());
    w.bytes(&config.digest());
    w.str(&config.canonical_text())
}

fn read_header(r: &mut Reader<'_>, magic: &[u8; 4]) -> Result<TrainConfig> {
    let found: [u8; 4] = r.array()?;
    if &found != magic {
        return Err(Error::Format(format!(
            "{}: expected magic {:?}, found {:?}",
            r.what,
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&found)
        )));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(Error::Format(format!("{}: unsupported version {version}", r.what)));
    }
    let digest: [u8; 32] = r.array()?;
    let text = r.str()?;
    let config = TrainConfig::parse(&text)?;
    if config.digest() != digest {
        return Err(r.corrupt("config digest mismatch"));
    }
    Ok(config)
}

fn write_geometry(w: &mut Writer, net: &Network) -> Result<()> {
    w.shape(net.input_shape())?;
    w.u32(net.classes())
}

/// Rebuilds the network skeleton described by the config and geometry;
/// parameters are overwritten by the caller.
fn read_network(r: &mut Reader<'_>, config: &TrainConfig, input: &[usize]) -> Result<Network> {
    let classes = r.u32()?;
    if classes == 0 {
        return Err(r.corrupt("zero classes"));
    }
    Network::build(config.model, input, classes, &mut ChaCha8Rng::seed_from_u64(0))
}

fn check_shape(what: &str, name: &str, found: &[usize], expected: &[usize]) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::Format(format!(
            "{what}: tensor {name} has shape {found:?}, model expects {expected:?}"
        )))
    }
}

fn rng_blob(trainer: &Trainer, layer: usize) -> Result<Vec<u8>> {
    let (fixed, stage) = trainer.fixed_partitions();
    let mut w = Writer::default();
    w.u64(trainer.config().seed);
    w.u64(layer as u64);
    w.u64(trainer.iteration());
    match (fixed[layer].get(), stage) {
        (Ok(p), Some(stage)) => {
            w.u8(1);
            w.u64(stage as u64);
            w.f64s(&[p.ratio_used()]);
            w.u32(p.units())?;
            w.u32(p.quantized_indices().len())?;
            for &i in p.quantized_indices() {
                w.u32(i)?;
            }
        }
        _ => w.u8(0),
    }
    Ok(w.0)
}

struct RngState {
    seed: u64,
    layer: usize,
    iteration: u64,
    fixed: Option<(usize, PartitionResult)>,
}

fn parse_rng_blob(blob: &[u8]) -> Result<RngState> {
    let mut r = Reader {
        buf: blob,
        what: "checkpoint random state",
    };
    let seed = r.u64()?;
    let layer = r.u64()? as usize;
    let iteration = r.u64()?;
    let fixed = match r.u8()? {
        0 => None,
        1 => {
            let stage = r.u64()? as usize;
            let ratio = r.f64s(1)?[0];
            let units = r.u32()?;
            let count = r.u32()?;
            let idx = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let p = PartitionResult::from_quantized(idx, units, ratio)
                .map_err(|e| r.corrupt(&e.to_string()))?;
            Some((stage, p))
        }
        f => return Err(r.corrupt(&format!("bad partition flag {f}"))),
    };
    r.finish()?;
    Ok(RngState {
        seed,
        layer,
        iteration,
        fixed,
    })
}

pub fn encode_checkpoint(config: &TrainConfig, trainer: &Trainer) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    write_header(&mut w, CHECKPOINT_MAGIC, config)?;
    w.u64(trainer.iteration());
    write_geometry(&mut w, &trainer.net)?;
    let quant_names: Vec<String> = trainer
        .net
        .quant_layers()
        .map(|(n, _)| format!("{n}.weight"))
        .collect();
    let tensors = trainer.net.state_tensors();
    w.u32(tensors.len())?;
    for (name, value, momentum) in tensors {
        w.str(&name)?;
        w.shape(value.shape())?;
        w.f64s(value.data());
        match momentum {
            Some(m) => {
                w.u8(1);
                w.f64s(m.data());
            }
            None => w.u8(0),
        }
        let blob = match quant_names.iter().position(|n| *n == name) {
            Some(layer) => rng_blob(trainer, layer)?,
            None => Vec::new(),
        };
        w.u32(blob.len())?;
        w.bytes(&blob);
    }
    Ok(w.0)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader {
        buf: bytes,
        what: "checkpoint",
    };
    let config = read_header(&mut r, CHECKPOINT_MAGIC)?;
    let iteration = r.u64()?;
    let input = r.shape()?;
    let mut net = read_network(&mut r, &config, &input)?;
    let quant_names: Vec<String> = net.quant_layers().map(|(n, _)| format!("{n}.weight")).collect();
    let mut fixed = vec![FixedPartition::new(); quant_names.len()];
    let mut fixed_stage = None;
    let count = r.u32()?;
    {
        let mut slots = net.state_tensors_mut();
        if count != slots.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} tensors, model expects {}",
                slots.len()
            )));
        }
        for (name, value, momentum) in slots.iter_mut() {
            let found = r.str()?;
            if found != *name {
                return Err(Error::Format(format!("checkpoint tensor {found}, model expects {name}")));
            }
            let shape = r.shape()?;
            check_shape("checkpoint", name, &shape, value.shape())?;
            let n = value.len();
            value.data_mut().copy_from_slice(&r.f64s(n)?);
            match (r.u8()?, momentum) {
                (1, Some(m)) => m.data_mut().copy_from_slice(&r.f64s(n)?),
                (0, None) => {}
                (flag, _) => return Err(Error::Format(format!("tensor {name}: momentum flag {flag}"))),
            }
            let blob_len = r.u32()?;
            let blob = r.take(blob_len)?;
            if let Some(layer) = quant_names.iter().position(|q| q == name) {
                let state = parse_rng_blob(blob)?;
                if state.seed != config.seed || state.layer != layer || state.iteration != iteration {
                    return Err(r.corrupt(&format!("random state of {name} disagrees with header")));
                }
                if let Some((stage, p)) = state.fixed {
                    fixed_stage = Some(stage);
                    fixed[layer].store(p);
                }
            } else if blob_len != 0 {
                return Err(r.corrupt(&format!("unexpected random state on {name}")));
            }
        }
    }
    r.finish()?;
    let mut trainer = Trainer::new(net, config.step_config())?;
    trainer.set_iteration(iteration);
    trainer.restore_fixed_partitions(fixed, fixed_stage)?;
    Ok(Checkpoint { config, trainer })
}

pub fn save_checkpoint(path: &Path, config: &TrainConfig, trainer: &Trainer) -> Result<()> {
    fs::write(path, encode_checkpoint(config, trainer)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Quantized export: codes and per-row scale of every quantizable layer,
/// plus the remaining full-precision tensors needed for inference.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub config: TrainConfig,
    pub layers: Vec<ExportedLayer>,
    /// Network with quantizable weights replaced by `alpha * codes`.
    pub net: Network,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportedLayer {
    pub name: String,
    pub shape: Vec<usize>,
    pub codes: Vec<Vec<i8>>,
    pub alphas: Vec<f32>,
}

impl ExportedLayer {
    pub fn reconstruction(&self) -> Vec<f64> {
        self.codes
            .iter()
            .zip(&self.alphas)
            .flat_map(|(row, &a)| row.iter().map(move |&c| f64::from(a) * f64::from(c)))
            .collect()
    }
}

pub fn encode_export(config: &TrainConfig, net: &Network) -> Result<Vec<u8>> {
    let Some(kind) = config.scheme.quant_kind() else {
        return Err(Error::argument("full-precision runs have nothing to export"));
    };
    let mut w = Writer::default();
    write_header(&mut w, EXPORT_MAGIC, config)?;
    write_geometry(&mut w, net)?;
    let quant: Vec<_> = net.quant_layers().collect();
    w.u32(quant.len())?;
    let mut quant_names = Vec::new();
    for (name, q) in &quant {
        let qm = inference_quantize(kind, &q.matrix());
        w.str(name)?;
        w.shape(q.weight.value.shape())?;
        w.u32(qm.rows.len())?;
        w.u32(qm.cols)?;
        for row in &qm.rows {
            w.bytes(&(row.alpha as f32).to_le_bytes());
            row.codes.iter().for_each(|&c| w.bytes(&c.to_le_bytes()));
        }
        quant_names.push(format!("{name}.weight"));
    }
    let rest: Vec<_> = net
        .state_tensors()
        .into_iter()
        .filter(|(n, _, _)| !quant_names.contains(n))
        .collect();
    w.u32(rest.len())?;
    for (name, value, _) in rest {
        w.str(&name)?;
        w.shape(value.shape())?;
        w.f64s(value.data());
    }
    Ok(w.0)
}

pub fn decode_export(bytes: &[u8]) -> Result<QuantizedModel> {
    let mut r = Reader {
        buf: bytes,
        what: "quantized export",
    };
    let config = read_header(&mut r, EXPORT_MAGIC)?;
    let input = r.shape()?;
    let mut net = read_network(&mut r, &config, &input)?;
    let expected: Vec<(String, Vec<usize>)> = net
        .quant_layers()
        .map(|(n, q)| (n.to_string(), q.weight.value.shape().to_vec()))
        .collect();
    let count = r.u32()?;
    if count != expected.len() {
        return Err(Error::Format(format!(
            "export has {count} quantized layers, model expects {}",
            expected.len()
        )));
    }
    let mut layers = Vec::with_capacity(count);
    for (exp_name, exp_shape) in &expected {
        let name = r.str()?;
        if name != *exp_name {
            return Err(Error::Format(format!("export layer {name}, model expects {exp_name}")));
        }
        let shape = r.shape()?;
        check_shape("quantized export", &name, &shape, exp_shape)?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        if rows * cols != shape.iter().product::<usize>() || rows != shape[0] {
            return Err(r.corrupt(&format!("{name}: {rows}x{cols} codes for shape {shape:?}")));
        }
        let mut codes = Vec::with_capacity(rows);
        let mut alphas = Vec::with_capacity(rows);
        for _ in 0..rows {
            alphas.push(f32::from_le_bytes(r.array()?));
            let row: Vec<i8> = r.take(cols)?.iter().map(|&b| b as i8).collect();
            if let Some(bad) = row.iter().find(|c| !(-1..=1).contains(*c)) {
                return Err(r.corrupt(&format!("{name}: code {bad} outside -1..=1")));
            }
            codes.push(row);
        }
        layers.push(ExportedLayer {
            name,
            shape,
            codes,
            alphas,
        });
    }
    for ((_, q), layer) in net.quant_layers_mut().zip(&layers) {
        let t = Tensor::new(layer.shape.clone(), layer.reconstruction())?;
        q.weight.value = t;
    }
    let rest = r.u32()?;
    {
        let mut slots: Vec<_> = net
            .state_tensors_mut()
            .into_iter()
            .filter(|(n, _, _)| !expected.iter().any(|(q, _)| format!("{q}.weight") == *n))
            .collect();
        if rest != slots.len() {
            return Err(Error::Format(format!(
                "export has {rest} other tensors, model expects {}",
                slots.len()
            )));
        }
        for (name, value, _) in slots.iter_mut() {
            let found = r.str()?;
            if found != *name {
                return Err(Error::Format(format!("export tensor {found}, model expects {name}")));
            }
            let shape = r.shape()?;
            check_shape("quantized export", name, &shape, value.shape())?;
            let n = value.len();
            value.data_mut().copy_from_slice(&r.f64s(n)?);
        }
    }
    r.finish()?;
    Ok(QuantizedModel {
        config,
        layers,
        net,
    })
}

pub fn export_quantized(path: &Path, config: &TrainConfig, net: &Network) -> Result<()> {
    fs::write(path, encode_export(config, net)?)?;
    Ok(())
}

pub fn load_export(path: &Path) -> Result<QuantizedModel> {
    decode_export(&fs::read(path)?)
}

/// A model file of either kind, told apart by its magic.
#[derive(Debug, Clone)]
pub enum ModelFile {
    Checkpoint(Box<Checkpoint>),
    Export(Box<QuantizedModel>),
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let bytes = fs::read(path)?;
    match bytes.get(..4) {
        Some(m) if m == EXPORT_MAGIC => Ok(ModelFile::Export(Box::new(decode_export(&bytes)?))),
        _ => Ok(ModelFile::Checkpoint(Box::new(decode_checkpoint(&bytes)?))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Arch;
    use crate::quant::QuantKind;
    use crate::trainer::{PartitionMode, Scheme};

    fn small_trainer(scheme: Scheme, mode: PartitionMode) -> (TrainConfig, Trainer) {
        let mut config = TrainConfig::default();
        config.scheme = scheme;
        config.partition_mode = mode;
        config.model = Arch::Mlp;
        config.seed = 3;
        if scheme == Scheme::Fwn {
            config.schedule = crate::schedule::ScheduleMode::Full;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::build(Arch::Mlp, &[1, 3, 3], 4, &mut rng).unwrap();
        let trainer = Trainer::new(net, config.step_config()).unwrap();
        (config, trainer)
    }

    fn batch() -> (Tensor, Vec<usize>) {
        let x: Vec<f64> = (0..8 * 9).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        (Tensor::new(vec![8, 1, 3, 3], x).unwrap(), (0..8).map(|i| i % 4).collect())
    }

    #[test]
    fn resume_reproduces_losses() {
        let (config, mut t) = small_trainer(Scheme::Quantized(QuantKind::Twn), PartitionMode::Fixed);
        let (x, y) = batch();
        for _ in 0..3 {
            t.step(&x, &y, 0.5, 0.1, 0).unwrap();
        }
        let bytes = encode_checkpoint(&config, &t).unwrap();
        let mut resumed = decode_checkpoint(&bytes).unwrap().trainer;
        assert_eq!(resumed.iteration(), 3);
        assert_eq!(resumed.fixed_partitions().0, t.fixed_partitions().0);
        for stage in [0, 0, 1, 1] {
            let a = t.step(&x, &y, 0.5 + 0.25 * stage as f64, 0.1, stage).unwrap();
            let b = resumed.step(&x, &y, 0.5 + 0.25 * stage as f64, 0.1, stage).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(encode_checkpoint(&config, &t).unwrap(), encode_checkpoint(&config, &resumed).unwrap());
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let (config, t) = small_trainer(Scheme::Quantized(QuantKind::Bwn), PartitionMode::Stochastic);
        let bytes = encode_checkpoint(&config, &t).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        for cut in [3, 10, 60, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Corruption(_) | Error::Format(_)), "cut {cut}: {err}");
        }
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Corruption(_))));
        let mut bad = bytes.clone();
        bad[8] ^= 1;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Corruption(_))));
        assert!(matches!(decode_export(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn export_matches_inference_quantization() {
        for kind in [QuantKind::Bwn, QuantKind::Twn, QuantKind::StochasticBinary] {
            let (config, t) = small_trainer(Scheme::Quantized(kind), PartitionMode::Stochastic);
            let model = decode_export(&encode_export(&config, &t.net).unwrap()).unwrap();
            for ((_, q), layer) in t.net.quant_layers().zip(&model.layers) {
                let qm = inference_quantize(kind, &q.matrix());
                for (row, (codes, &alpha)) in qm.rows.iter().zip(layer.codes.iter().zip(&layer.alphas)) {
                    assert_eq!(&row.codes, codes);
                    assert_eq!(row.alpha as f32, alpha);
                }
            }
        }
        let (config, t) = small_trainer(Scheme::Fwn, PartitionMode::Stochastic);
        assert!(encode_export(&config, &t.net).is_err());
    }
}
