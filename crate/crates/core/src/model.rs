//! The residual fully convolutional architectures (Shallow/Deep x 2D/3D)
//! and their checkpoint format.
//!
//! Every network is stem convolution (1 → stem_width) → residual blocks with
//! the configured widths → final 3-per-axis convolution onto the two output
//! channels (fiber, background). No pooling anywhere, so spatial dimensions
//! survive the whole chain.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Conv, KernelExtent, Mode, ResidualBlock, Tensor, TensorShape};
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Variant {
    Shallow,
    Deep,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Shallow => "shallow",
            Variant::Deep => "deep",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "shallow" => Ok(Variant::Shallow),
            "deep" => Ok(Variant::Deep),
            other => Err(Error::InvalidConfig(format!("unknown variant `{other}`"))),
        }
    }

    /// Default residual block widths for the variant.
    pub fn default_widths(&self) -> Vec<usize> {
        match self {
            Variant::Shallow => vec![16, 32, 64],
            Variant::Deep => vec![16, 16, 32, 32, 64, 64],
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ModelConfig {
    pub dimensionality: u8,
    pub variant: Variant,
    pub stem_width: usize,
    pub block_widths: Vec<usize>,
}

impl ModelConfig {
    pub fn new(dimensionality: u8, variant: Variant) -> ModelConfig {
        ModelConfig {
            dimensionality,
            variant,
            stem_width: 16,
            block_widths: variant.default_widths(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensionality != 2 && self.dimensionality != 3 {
            return Err(Error::InvalidConfig(format!(
                "dimensionality must be 2 or 3, got {}",
                self.dimensionality
            )));
        }
        if self.stem_width == 0 {
            return Err(Error::InvalidConfig("stem_width must be positive".into()));
        }
        if self.block_widths.is_empty() || self.block_widths.contains(&0) {
            return Err(Error::InvalidConfig(
                "block_widths must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    /// RNG seed the weights were initialized from.
    pub seed: u64,
    /// Optimizer steps this model has been trained for.
    pub iterations: u64,
    stem: Conv<f32>,
    blocks: Vec<ResidualBlock<f32>>,
    head: Conv<f32>,
}

/// Deterministic construction from config and seed.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k3 = KernelExtent::k3(cfg.dimensionality);
    let stem = Conv::new(1, cfg.stem_width, k3, &mut rng);
    let mut blocks = Vec::with_capacity(cfg.block_widths.len());
    let mut width = cfg.stem_width;
    for &next in &cfg.block_widths {
        blocks.push(ResidualBlock::new(width, next, cfg.dimensionality, &mut rng));
        width = next;
    }
    let head = Conv::new(width, 2, k3, &mut rng);
    Ok(Model {
        cfg: cfg.clone(),
        seed,
        iterations: 0,
        stem,
        blocks,
        head,
    })
}

impl Model {
    pub fn forward(&mut self, x: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
        if x.shape.c != 1 {
            return Err(Error::InvalidConfig(format!(
                "model expects a 1-channel input, got {}",
                x.shape
            )));
        }
        if self.cfg.dimensionality == 2 && x.shape.d != 1 {
            return Err(Error::InvalidConfig(format!(
                "2D model got a {}-deep input",
                x.shape.d
            )));
        }
        let mut h = self.stem.forward(x, mode)?;
        for block in &mut self.blocks {
            h = block.forward(&h, mode)?;
        }
        self.head.forward(&h, mode)
    }

    pub fn backward(&mut self, gy: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = self.head.backward(gy)?;
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        self.stem.backward(&g)
    }

    /// Learned parameters in a fixed order (the Adam state indexes into it).
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        let mut out: Vec<(String, &mut Tensor<f32>)> = Vec::new();
        out.push(("stem.weight".into(), &mut self.stem.weight));
        out.push(("stem.bias".into(), &mut self.stem.bias));
        for (i, block) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.conv1.weight"), &mut block.conv1.weight));
            out.push((format!("block{i}.conv1.bias"), &mut block.conv1.bias));
            out.push((format!("block{i}.conv2.weight"), &mut block.conv2.weight));
            out.push((format!("block{i}.conv2.bias"), &mut block.conv2.bias));
            out.push((format!("block{i}.bn.gamma"), &mut block.bn.gamma));
            out.push((format!("block{i}.bn.beta"), &mut block.bn.beta));
            if let Some(proj) = &mut block.skip {
                out.push((format!("block{i}.skip.weight"), &mut proj.weight));
                out.push((format!("block{i}.skip.bias"), &mut proj.bias));
            }
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Number of trainable scalars.
    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|(_, p)| p.data.len()).sum()
    }

    /// Every persisted array: parameters plus BN running statistics.
    fn sections_mut(&mut self) -> Vec<(String, SectionRef<'_>)> {
        let mut out: Vec<(String, SectionRef<'_>)> = Vec::new();
        out.push(("stem.weight".into(), SectionRef::Tensor(&mut self.stem.weight)));
        out.push(("stem.bias".into(), SectionRef::Tensor(&mut self.stem.bias)));
        for (i, block) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.conv1.weight"), SectionRef::Tensor(&mut block.conv1.weight)));
            out.push((format!("block{i}.conv1.bias"), SectionRef::Tensor(&mut block.conv1.bias)));
            out.push((format!("block{i}.conv2.weight"), SectionRef::Tensor(&mut block.conv2.weight)));
            out.push((format!("block{i}.conv2.bias"), SectionRef::Tensor(&mut block.conv2.bias)));
            out.push((format!("block{i}.bn.gamma"), SectionRef::Tensor(&mut block.bn.gamma)));
            out.push((format!("block{i}.bn.beta"), SectionRef::Tensor(&mut block.bn.beta)));
            out.push((format!("block{i}.bn.running_mean"), SectionRef::Raw(&mut block.bn.running_mean)));
            out.push((format!("block{i}.bn.running_var"), SectionRef::Raw(&mut block.bn.running_var)));
            if let Some(proj) = &mut block.skip {
                out.push((format!("block{i}.skip.weight"), SectionRef::Tensor(&mut proj.weight)));
                out.push((format!("block{i}.skip.bias"), SectionRef::Tensor(&mut proj.bias)));
            }
        }
        out.push(("head.weight".into(), SectionRef::Tensor(&mut self.head.weight)));
        out.push(("head.bias".into(), SectionRef::Tensor(&mut self.head.bias)));
        out
    }

    /// Read-only access to a block for tests and diagnostics.
    pub fn block(&self, i: usize) -> &ResidualBlock<f32> {
        &self.blocks[i]
    }
}

enum SectionRef<'a> {
    Tensor(&'a mut Tensor<f32>),
    Raw(&'a mut Vec<f32>),
}

impl SectionRef<'_> {
    fn as_slice(&self) -> &[f32] {
        match self {
            SectionRef::Tensor(t) => &t.data,
            SectionRef::Raw(v) => v,
        }
    }

    fn as_mut_slice(&mut self) -> &mut [f32] {
        match self {
            SectionRef::Tensor(t) => &mut t.data,
            SectionRef::Raw(v) => v,
        }
    }
}

/// In-memory image of a checkpoint file: config header, named sections with
/// element counts, little-endian f32 payload.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub iterations: u64,
    pub seed: u64,
    pub sections: Vec<(String, usize)>,
}

const CKPT_MAGIC: &str = "FSEGCKPT1";

pub fn save_checkpoint(model: &mut Model, path: &Path) -> Result<()> {
    let cfg = model.cfg.clone();
    let (iterations, seed) = (model.iterations, model.seed);
    let sections = model.sections_mut();
    let widths: Vec<String> = cfg.block_widths.iter().map(|w| w.to_string()).collect();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(
            w,
            "{CKPT_MAGIC} dim={} variant={} stem_width={} widths={} iterations={} seed={}",
            cfg.dimensionality,
            cfg.variant.as_str(),
            cfg.stem_width,
            widths.join(","),
            iterations,
            seed,
        )?;
        for (name, sec) in &sections {
            writeln!(w, "section {name} {}", sec.as_slice().len())?;
        }
        writeln!(w, "payload")?;
        for (_, sec) in &sections {
            for v in sec.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Parse the text manifest; returns the checkpoint metadata and the byte
/// offset where the payload starts.
fn parse_manifest(path: &Path, bytes: &[u8]) -> Result<(Checkpoint, usize)> {
    let mut pos = 0usize;
    let mut lines: Vec<String> = Vec::new();
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "unterminated manifest"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| Error::format(path, "manifest is not UTF-8"))?
            .to_string();
        pos += nl + 1;
        let done = line == "payload";
        lines.push(line);
        if done {
            break;
        }
    }

    let header = &lines[0];
    let mut fields = header.split_whitespace();
    if fields.next() != Some(CKPT_MAGIC) {
        return Err(Error::format(path, "missing checkpoint magic"));
    }
    let mut dim = None;
    let mut variant = None;
    let mut stem_width = None;
    let mut widths = None;
    let mut iterations = 0u64;
    let mut seed = 0u64;
    for field in fields {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("bad header field `{field}`")))?;
        match key {
            "dim" => dim = Some(value.parse::<u8>().map_err(|_| Error::format(path, "bad dim"))?),
            "variant" => variant = Some(Variant::parse(value)?),
            "stem_width" => {
                stem_width =
                    Some(value.parse::<usize>().map_err(|_| Error::format(path, "bad stem_width"))?)
            }
            "widths" => {
                widths = Some(
                    value
                        .split(',')
                        .map(|s| s.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::format(path, "bad widths"))?,
                )
            }
            "iterations" => {
                iterations = value.parse().map_err(|_| Error::format(path, "bad iterations"))?
            }
            "seed" => seed = value.parse().map_err(|_| Error::format(path, "bad seed"))?,
            other => return Err(Error::format(path, format!("unknown header key `{other}`"))),
        }
    }
    let cfg = ModelConfig {
        dimensionality: dim.ok_or_else(|| Error::format(path, "missing dim"))?,
        variant: variant.ok_or_else(|| Error::format(path, "missing variant"))?,
        stem_width: stem_width.ok_or_else(|| Error::format(path, "missing stem_width"))?,
        block_widths: widths.ok_or_else(|| Error::format(path, "missing widths"))?,
    };

    let mut sections: Vec<(String, usize)> = Vec::new();
    for line in &lines[1..lines.len() - 1] {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some("section"), Some(name), Some(count)) => {
                let count: usize =
                    count.parse().map_err(|_| Error::format(path, "bad section count"))?;
                sections.push((name.to_string(), count));
            }
            _ => return Err(Error::format(path, format!("bad manifest line `{line}`"))),
        }
    }
    Ok((
        Checkpoint {
            cfg,
            iterations,
            seed,
            sections,
        },
        pos,
    ))
}

/// Checkpoint metadata without the weights.
pub fn read_checkpoint_info(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_manifest(path, &bytes).map(|(info, _)| info)
}

/// Rebuild a model from a checkpoint file. When `expect_dimensionality` is
/// given, a checkpoint of the other dimensionality is rejected.
pub fn load_checkpoint(path: &Path, expect_dimensionality: Option<u8>) -> Result<Model> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let (info, payload_at) = parse_manifest(path, &bytes)?;
    let payload = &bytes[payload_at..];

    if let Some(expected) = expect_dimensionality {
        if info.cfg.dimensionality != expected {
            return Err(Error::InvalidConfig(format!(
                "checkpoint is {}D, expected {}D",
                info.cfg.dimensionality, expected
            )));
        }
    }
    let total: usize = info.sections.iter().map(|(_, c)| c).sum();
    if payload.len() != total * 4 {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, manifest declares {}", payload.len(), total * 4),
        ));
    }

    let mut model = build_model(&info.cfg, info.seed)?;
    model.iterations = info.iterations;
    let mut sections = model.sections_mut();
    if sections.len() != info.sections.len() {
        return Err(Error::format(
            path,
            format!(
                "manifest has {} sections, architecture needs {}",
                info.sections.len(),
                sections.len()
            ),
        ));
    }
    let mut offset = 0usize;
    for ((name, count), (want_name, sec)) in info.sections.iter().zip(sections.iter_mut()) {
        if name != want_name || *count != sec.as_slice().len() {
            return Err(Error::format(
                path,
                format!(
                    "section `{name}`({count}) does not match architecture `{want_name}`({})",
                    sec.as_slice().len()
                ),
            ));
        }
        let dst = sec.as_mut_slice();
        for (i, slot) in dst.iter_mut().enumerate() {
            let at = (offset + i) * 4;
            *slot = f32::from_le_bytes([
                payload[at],
                payload[at + 1],
                payload[at + 2],
                payload[at + 3],
            ]);
        }
        offset += count;
    }
    drop(sections);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(dim: u8, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = if dim == 3 {
            TensorShape::new(1, 1, 8, 8, 8)
        } else {
            TensorShape::new(1, 1, 1, 8, 8)
        };
        let data = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn bits(t: &Tensor<f32>) -> Vec<u32> {
        t.data.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn shallow_3d_output_has_two_channels_same_spatial() {
        let mut model = build_model(&ModelConfig::new(3, Variant::Shallow), 42).unwrap();
        let x = random_input(3, 1);
        let y = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape, TensorShape::new(1, 2, 8, 8, 8));
    }

    #[test]
    fn deep_has_more_parameters_than_shallow() {
        for dim in [2u8, 3] {
            let mut shallow = build_model(&ModelConfig::new(dim, Variant::Shallow), 0).unwrap();
            let mut deep = build_model(&ModelConfig::new(dim, Variant::Deep), 0).unwrap();
            assert!(deep.param_count() > shallow.param_count());
        }
    }

    #[test]
    fn shallow_3d_parameter_count_closed_form() {
        let mut model = build_model(&ModelConfig::new(3, Variant::Shallow), 0).unwrap();
        // stem 1→16, blocks 16→16, 16→32, 32→64, head 64→2, all 3³ kernels;
        // width-changing skips are 1³ projections; BN holds γ and β.
        let conv = |ci: usize, co: usize, k: usize| co * ci * k + co;
        let block = |ci: usize, co: usize| {
            conv(ci, co, 27)
                + conv(co, co, 27)
                + 2 * co
                + if ci != co { conv(ci, co, 1) } else { 0 }
        };
        let want = conv(1, 16, 27)
            + block(16, 16)
            + block(16, 32)
            + block(32, 64)
            + conv(64, 2, 27);
        assert_eq!(model.param_count(), want);
    }

    #[test]
    fn two_d_model_rejects_volumetric_input() {
        let mut model = build_model(&ModelConfig::new(2, Variant::Shallow), 0).unwrap();
        let x = random_input(3, 2);
        assert!(model.forward(&x, Mode::Eval).is_err());
        let flat = random_input(2, 3);
        assert!(model.forward(&flat, Mode::Eval).is_ok());
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let mut model = build_model(&ModelConfig::new(3, Variant::Shallow), 7).unwrap();
        let x = random_input(3, 4);
        let y1 = model.forward(&x, Mode::Eval).unwrap();
        let y2 = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(bits(&y1), bits(&y2));
    }

    #[test]
    fn train_forward_moves_bn_stats_eval_does_not() {
        let mut model = build_model(&ModelConfig::new(3, Variant::Shallow), 7).unwrap();
        let x = random_input(3, 5);
        let snapshot = model.block(0).bn.running_mean.clone();
        model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(model.block(0).bn.running_mean, snapshot);
        model.forward(&x, Mode::Train).unwrap();
        assert_ne!(model.block(0).bn.running_mean, snapshot);
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let mut a = build_model(&ModelConfig::new(3, Variant::Shallow), 9).unwrap();
        let mut b = build_model(&ModelConfig::new(3, Variant::Shallow), 9).unwrap();
        let x = random_input(3, 6);
        let ya = a.forward(&x, Mode::Eval).unwrap();
        let yb = b.forward(&x, Mode::Eval).unwrap();
        assert_eq!(bits(&ya), bits(&yb));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = build_model(&ModelConfig::new(3, Variant::Shallow), 11).unwrap();
        // Move BN stats off their defaults so the round trip covers them.
        let x = random_input(3, 7);
        model.forward(&x, Mode::Train).unwrap();
        model.iterations = 123;
        save_checkpoint(&mut model, &path).unwrap();

        let mut back = load_checkpoint(&path, Some(3)).unwrap();
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.iterations, 123);
        assert_eq!(back.seed, 11);
        let ya = model.forward(&x, Mode::Eval).unwrap();
        let yb = back.forward(&x, Mode::Eval).unwrap();
        assert_eq!(bits(&ya), bits(&yb));
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut model = build_model(&ModelConfig::new(2, Variant::Shallow), 0).unwrap();
        save_checkpoint(&mut model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::Format { .. })));
    }

    #[test]
    fn dimensionality_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let mut model = build_model(&ModelConfig::new(2, Variant::Deep), 0).unwrap();
        save_checkpoint(&mut model, &path).unwrap();
        assert!(load_checkpoint(&path, Some(3)).is_err());
        assert!(load_checkpoint(&path, Some(2)).is_ok());
    }
}
