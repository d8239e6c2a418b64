//! Miniature U-Net taking a short stack of adjacent slices and emitting
//! per-pixel class logits for the central slice.
//!
//! The volumetric context enters as the leading axis of a (Z,H,W,1) tensor.
//! Encoder convolutions use no z padding, so each one with a z extent above 1
//! shrinks the stack; the z kernel schedule greedily spends extents of up to
//! 3 until the stack is a single slice. Skip connections whose stack is still
//! deeper than one slice are averaged over z before concatenation, and the
//! decoder is purely 2D.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of adjacent slices fed to the network.
    pub context_slices: usize,
    /// Training image height and width.
    pub image_size: usize,
    /// Channels of the first encoder level; level i has `base << i`.
    pub base_channels: usize,
    /// Number of resolution levels including the bottom.
    pub depth: usize,
    /// Output classes.
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_slices == 0 {
            return Err(Error::Config("context_slices must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        let factor = 1usize << (self.depth - 1);
        if self.image_size == 0 || self.image_size % factor != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of {factor} for depth {}",
                self.image_size, self.depth
            )));
        }
        Ok(())
    }
}

/// z kernel extent of each encoder convolution, two per level in order.
///
/// Extents of up to 3 are spent greedily until the stack is one slice deep;
/// afterwards every convolution is purely 2D.
pub fn z_kernel_schedule(context_slices: usize, depth: usize) -> Vec<usize> {
    let mut z = context_slices;
    let mut schedule = Vec::with_capacity(2 * depth);
    for _ in 0..2 * depth {
        let k = z.min(3).max(1);
        schedule.push(k);
        z = z - k + 1;
    }
    schedule
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    kz: usize,
    ky: usize,
    kx: usize,
    c_in: usize,
    c_out: usize,
}

impl ConvSpec {
    fn kernel_shape(&self) -> Vec<usize> {
        vec![self.kz, self.ky, self.kx, self.c_in, self.c_out]
    }

    fn fan_in(&self) -> usize {
        self.kz * self.ky * self.kx * self.c_in
    }
}

/// Convolution layers in construction order with their stable names.
fn layer_specs(config: &ModelConfig) -> Vec<(String, ConvSpec)> {
    let b = config.base_channels;
    let schedule = z_kernel_schedule(config.context_slices, config.depth);
    let mut layers = Vec::new();
    for level in 0..config.depth {
        let c_in = if level == 0 { 1 } else { b << (level - 1) };
        let c_out = b << level;
        layers.push((
            format!("enc{level}_conv1"),
            ConvSpec { kz: schedule[2 * level], ky: 3, kx: 3, c_in, c_out },
        ));
        layers.push((
            format!("enc{level}_conv2"),
            ConvSpec { kz: schedule[2 * level + 1], ky: 3, kx: 3, c_in: c_out, c_out },
        ));
    }
    for level in (0..config.depth.saturating_sub(1)).rev() {
        let c_hi = b << (level + 1);
        let c_lo = b << level;
        layers.push((
            format!("dec{level}_up"),
            ConvSpec { kz: 1, ky: 3, kx: 3, c_in: c_hi, c_out: c_lo },
        ));
        layers.push((
            format!("dec{level}_conv1"),
            ConvSpec { kz: 1, ky: 3, kx: 3, c_in: 2 * c_lo, c_out: c_lo },
        ));
        layers.push((
            format!("dec{level}_conv2"),
            ConvSpec { kz: 1, ky: 3, kx: 3, c_in: c_lo, c_out: c_lo },
        ));
    }
    layers.push((
        "final".into(),
        ConvSpec { kz: 1, ky: 1, kx: 1, c_in: b, c_out: config.num_classes },
    ));
    layers
}

/// A forward pass: the tape, the logits node, and the parameter nodes in the
/// model's parameter order.
#[derive(Debug)]
pub struct ForwardPass {
    pub graph: Graph,
    pub logits: NodeId,
    pub params: Vec<NodeId>,
}

/// The network: a configuration plus named parameter tensors.
///
/// Each forward pass builds a fresh tape over the current parameter values,
/// so updating the tensors between passes is all an optimizer step needs.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<(String, Tensor)>,
}

impl Model {
    /// Initializes all kernels with He-style uniform draws
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))` and all biases with zeros.
    pub fn build(config: ModelConfig, rng: &mut impl Rng) -> Result<Model> {
        config.validate()?;
        let mut params = Vec::new();
        for (name, spec) in layer_specs(&config) {
            let limit = (6.0 / spec.fan_in() as f64).sqrt();
            let shape = spec.kernel_shape();
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| rng.random::<f64>() * 2.0 * limit - limit)
                .collect();
            params.push((format!("{name}_kernel"), Tensor::new(shape, data)?));
            params.push((format!("{name}_bias"), Tensor::zeros(&[spec.c_out])));
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter tensors in their fixed construction order.
    pub fn parameters(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    /// Total number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Runs the network over one (Z,H,W,1) context stack.
    pub fn forward(&self, input: &Tensor) -> Result<ForwardPass> {
        let shape = input.shape();
        if shape.len() != 4 || shape[3] != 1 {
            return Err(Error::dimension(
                "input",
                format!("expected (Z,H,W,1), got {shape:?}"),
            ));
        }
        if shape[0] != self.config.context_slices {
            return Err(Error::dimension(
                "z",
                format!(
                    "expected {} context slices, got {}",
                    self.config.context_slices, shape[0]
                ),
            ));
        }
        let factor = 1usize << (self.config.depth - 1);
        if shape[1] % factor != 0 || shape[2] % factor != 0 {
            return Err(Error::dimension(
                "y",
                format!(
                    "spatial extents {}x{} must be multiples of {factor} for depth {}",
                    shape[1], shape[2], self.config.depth
                ),
            ));
        }

        let mut graph = Graph::new();
        let mut nodes = std::collections::HashMap::new();
        let mut param_ids = Vec::with_capacity(self.params.len());
        for (name, tensor) in &self.params {
            let id = graph.parameter(tensor.clone());
            param_ids.push(id);
            nodes.insert(name.clone(), id);
        }

        let conv_block = |graph: &mut Graph, x: NodeId, name: &str, kz: usize| -> Result<NodeId> {
            let k = nodes[&format!("{name}_kernel")];
            let b = nodes[&format!("{name}_bias")];
            let pad_yx = if kz == 1 && graph.value(k).shape()[1] == 1 {
                [0, 0]
            } else {
                [1, 1]
            };
            let c = graph.conv3d(x, k, [[0, 0], pad_yx, pad_yx], [1, 1, 1])?;
            graph.bias_add(c, b)
        };

        let schedule = z_kernel_schedule(self.config.context_slices, self.config.depth);
        let mut x = graph.leaf(input.clone());
        let mut skips = Vec::new();
        for level in 0..self.config.depth {
            let c1 = conv_block(&mut graph, x, &format!("enc{level}_conv1"), schedule[2 * level])?;
            let r1 = graph.relu(c1)?;
            let c2 = conv_block(
                &mut graph,
                r1,
                &format!("enc{level}_conv2"),
                schedule[2 * level + 1],
            )?;
            x = graph.relu(c2)?;
            if level + 1 < self.config.depth {
                skips.push(x);
                x = graph.maxpool2d(x)?;
            }
        }
        if graph.value(x).shape()[0] > 1 {
            x = graph.mean_z(x)?;
        }

        for level in (0..self.config.depth.saturating_sub(1)).rev() {
            let up = graph.upsample2d_nearest(x)?;
            let uc = conv_block(&mut graph, up, &format!("dec{level}_up"), 1)?;
            let ur = graph.relu(uc)?;
            let mut skip = skips[level];
            if graph.value(skip).shape()[0] > 1 {
                skip = graph.mean_z(skip)?;
            }
            let cat = graph.concat_channels(skip, ur)?;
            let c1 = conv_block(&mut graph, cat, &format!("dec{level}_conv1"), 1)?;
            let r1 = graph.relu(c1)?;
            let c2 = conv_block(&mut graph, r1, &format!("dec{level}_conv2"), 1)?;
            x = graph.relu(c2)?;
        }

        let logits = conv_block(&mut graph, x, "final", 1)?;
        Ok(ForwardPass { graph, logits, params: param_ids })
    }

    /// Writes the checkpoint: a `config` key-value file plus one tensor file
    /// per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(dir.display().to_string(), e.to_string()))?;
        let config_path = dir.join("config");
        let mut f = std::fs::File::create(&config_path)
            .map_err(|e| Error::io(config_path.display().to_string(), e.to_string()))?;
        write!(
            f,
            "context_slices: {}\nimage_size: {}\nbase_channels: {}\ndepth: {}\nnum_classes: {}\n",
            self.config.context_slices,
            self.config.image_size,
            self.config.base_channels,
            self.config.depth,
            self.config.num_classes
        )
        .map_err(|e| Error::io(config_path.display().to_string(), e.to_string()))?;
        for (name, tensor) in &self.params {
            tensor.save(&dir.join(format!("{name}.f64")))?;
        }
        Ok(())
    }

    /// Loads a checkpoint written by [`Model::save`], validating that every
    /// parameter file matches the shape the configuration dictates.
    pub fn load(dir: &Path) -> Result<Model> {
        let config_path = dir.join("config");
        let f = std::fs::File::open(&config_path)
            .map_err(|e| Error::io(config_path.display().to_string(), e.to_string()))?;
        let mut fields = std::collections::HashMap::new();
        for line in std::io::BufReader::new(f).lines() {
            let line =
                line.map_err(|e| Error::io(config_path.display().to_string(), e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once(':').ok_or_else(|| {
                Error::io(config_path.display().to_string(), format!("malformed line {line:?}"))
            })?;
            let value: usize = value.trim().parse().map_err(|_| {
                Error::io(config_path.display().to_string(), format!("malformed line {line:?}"))
            })?;
            fields.insert(key.trim().to_string(), value);
        }
        let get = |key: &str| {
            fields.get(key).copied().ok_or_else(|| {
                Error::io(config_path.display().to_string(), format!("missing field {key}"))
            })
        };
        let config = ModelConfig {
            context_slices: get("context_slices")?,
            image_size: get("image_size")?,
            base_channels: get("base_channels")?,
            depth: get("depth")?,
            num_classes: get("num_classes")?,
        };
        config.validate()?;

        let mut params = Vec::new();
        for (name, spec) in layer_specs(&config) {
            let kernel = Tensor::load(&dir.join(format!("{name}_kernel.f64")))?;
            if kernel.shape() != spec.kernel_shape() {
                return Err(Error::dimension(
                    "shape",
                    format!(
                        "{name}_kernel has shape {:?}, expected {:?}",
                        kernel.shape(),
                        spec.kernel_shape()
                    ),
                ));
            }
            let bias = Tensor::load(&dir.join(format!("{name}_bias.f64")))?;
            if bias.shape() != [spec.c_out] {
                return Err(Error::dimension(
                    "shape",
                    format!("{name}_bias has shape {:?}, expected [{}]", bias.shape(), spec.c_out),
                ));
            }
            params.push((format!("{name}_kernel"), kernel));
            params.push((format!("{name}_bias"), bias));
        }
        Ok(Model { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn z_schedule_spends_context_greedily() {
        assert_eq!(z_kernel_schedule(6, 3), vec![3, 3, 2, 1, 1, 1]);
        assert_eq!(z_kernel_schedule(3, 2), vec![3, 1, 1, 1]);
        assert_eq!(z_kernel_schedule(1, 2), vec![1, 1, 1, 1]);
        assert_eq!(z_kernel_schedule(2, 2), vec![2, 1, 1, 1]);
    }

    #[test]
    fn config_validation() {
        let ok = ModelConfig {
            context_slices: 6,
            image_size: 64,
            base_channels: 8,
            depth: 3,
            num_classes: 5,
        };
        assert!(ok.validate().is_ok());
        assert!(ModelConfig { image_size: 66, ..ok }.validate().is_err());
        assert!(ModelConfig { depth: 0, ..ok }.validate().is_err());
        assert!(ModelConfig { context_slices: 0, ..ok }.validate().is_err());
        assert!(ModelConfig { num_classes: 1, ..ok }.validate().is_err());
    }

    #[test]
    fn parameter_count_matches_hand_total() {
        let config = ModelConfig {
            context_slices: 3,
            image_size: 8,
            base_channels: 2,
            depth: 2,
            num_classes: 5,
        };
        let model = Model::build(config, &mut rng(0)).unwrap();
        // enc0: (3,3,3,1,2)+2 and (1,3,3,2,2)+2; enc1: (1,3,3,2,4)+4 and
        // (1,3,3,4,4)+4; dec0: up (1,3,3,4,2)+2, (1,3,3,4,2)+2, (1,3,3,2,2)+2;
        // final (1,1,1,2,5)+5
        assert_eq!(model.count_parameters(), 519);
    }

    #[test]
    fn forward_emits_single_slice_logits() {
        let config = ModelConfig {
            context_slices: 6,
            image_size: 16,
            base_channels: 2,
            depth: 3,
            num_classes: 5,
        };
        let model = Model::build(config, &mut rng(1)).unwrap();
        let input = Tensor::filled(&[6, 16, 16, 1], 0.25);
        let pass = model.forward(&input).unwrap();
        assert_eq!(pass.graph.value(pass.logits).shape(), &[1, 16, 16, 5]);
    }

    #[test]
    fn forward_collapses_deep_context_without_schedule_room() {
        // context 12 leaves z above 1 at the bottom; the mean collapse keeps
        // the output a single slice
        let config = ModelConfig {
            context_slices: 12,
            image_size: 8,
            base_channels: 1,
            depth: 2,
            num_classes: 5,
        };
        let model = Model::build(config, &mut rng(2)).unwrap();
        let input = Tensor::filled(&[12, 8, 8, 1], 0.1);
        let pass = model.forward(&input).unwrap();
        assert_eq!(pass.graph.value(pass.logits).shape(), &[1, 8, 8, 5]);
    }

    #[test]
    fn forward_rejects_wrong_context_depth() {
        let config = ModelConfig {
            context_slices: 6,
            image_size: 16,
            base_channels: 2,
            depth: 2,
            num_classes: 5,
        };
        let model = Model::build(config, &mut rng(3)).unwrap();
        let err = model.forward(&Tensor::zeros(&[4, 16, 16, 1])).unwrap_err();
        assert!(err.to_string().contains("on z"), "{err}");
    }

    #[test]
    fn forward_is_deterministic_per_build_seed() {
        let config = ModelConfig {
            context_slices: 3,
            image_size: 8,
            base_channels: 2,
            depth: 2,
            num_classes: 5,
        };
        let input_data: Vec<f64> = (0..3 * 8 * 8).map(|i| (i % 11) as f64 * 0.09).collect();
        let input = Tensor::new(vec![3, 8, 8, 1], input_data).unwrap();

        let a = Model::build(config, &mut rng(7)).unwrap();
        let b = Model::build(config, &mut rng(7)).unwrap();
        let pa = a.forward(&input).unwrap();
        let pb = b.forward(&input).unwrap();
        assert_eq!(
            pa.graph.value(pa.logits).data(),
            pb.graph.value(pb.logits).data()
        );

        let c = Model::build(config, &mut rng(8)).unwrap();
        let pc = c.forward(&input).unwrap();
        assert_ne!(
            pa.graph.value(pa.logits).data(),
            pc.graph.value(pc.logits).data()
        );
    }

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        let config = ModelConfig {
            context_slices: 2,
            image_size: 4,
            base_channels: 1,
            depth: 2,
            num_classes: 5,
        };
        let mut model = Model::build(config, &mut rng(11)).unwrap();
        // a generic point: zero biases leave dead relu units exactly at the
        // kink, where finite differences are meaningless
        for (name, tensor) in model.parameters_mut() {
            if name.ends_with("_bias") {
                for (i, v) in tensor.data_mut().iter_mut().enumerate() {
                    *v = 0.05 + 0.013 * i as f64;
                }
            }
        }
        let input_data: Vec<f64> = (0..2 * 4 * 4).map(|i| (i as f64 * 0.7391).sin() * 0.8).collect();
        let input = Tensor::new(vec![2, 4, 4, 1], input_data).unwrap();
        let mut pass = model.forward(&input).unwrap();

        let probs = pass.graph.softmax_channels(pass.logits).unwrap();
        let clamped = pass.graph.clamp_min(probs, 1e-7).unwrap();
        let lp = pass.graph.ln(clamped).unwrap();
        let mut pick = vec![0.0; 4 * 4 * 5];
        for px in 0..16 {
            pick[px * 5 + px % 5] = -1.0 / 16.0;
        }
        let w = pass.graph.leaf(Tensor::new(vec![1, 4, 4, 5], pick).unwrap());
        let weighted = pass.graph.mul(lp, w).unwrap();
        let loss = pass.graph.sum(weighted).unwrap();

        // relu and pooling kinks cap finite-difference accuracy
        for &p in &pass.params {
            let err = pass.graph.gradient_check(p, loss, 1e-5).unwrap();
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let config = ModelConfig {
            context_slices: 6,
            image_size: 16,
            base_channels: 2,
            depth: 3,
            num_classes: 5,
        };
        let model = Model::build(config, &mut rng(21)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let loaded = Model::load(dir.path()).unwrap();
        assert_eq!(loaded.config(), model.config());
        assert_eq!(loaded.params.len(), model.params.len());
        for ((na, ta), (nb, tb)) in model.params.iter().zip(&loaded.params) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn checkpoint_load_rejects_shape_mismatch() {
        let config = ModelConfig {
            context_slices: 3,
            image_size: 8,
            base_channels: 2,
            depth: 2,
            num_classes: 5,
        };
        let model = Model::build(config, &mut rng(22)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        Tensor::zeros(&[1, 1, 1, 1, 1])
            .save(&dir.path().join("enc0_conv1_kernel.f64"))
            .unwrap();
        let err = Model::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("enc0_conv1_kernel"), "{err}");
    }
}
