//! The embedding network: conv/BN/LReLU stages with max pooling, a fully
//! connected embedding layer, optional FRW reweighting, a softmax head and
//! the center table. Also parameter bookkeeping and head replacement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kv;
use crate::layers::{
    leaky_relu, max_pool, BatchNormLayer, ConvLayer, FcLayer, FrwLayer, Mode, Param,
};
use crate::losses::{CenterTable, SoftmaxHead};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Nine 3×3 conv layers, four pools, 512-D embedding, 128×48 input.
    Paper,
    /// Four conv layers, two pools, 32-D embedding, 32×16 input.
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected paper|desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    /// `(height, width)` of input images.
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub conv_channels: Vec<usize>,
    /// Zero-based conv indices followed by a 2×2 max pool.
    pub pool_after: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub frw_enabled: bool,
    pub lrelu_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// `C`: FRW weights start with `½‖w‖² = C`.
    pub frw_norm_target: f64,
    /// Center update rate.
    pub center_alpha: f64,
}

impl ModelConfig {
    pub fn paper(num_classes: usize) -> Self {
        ModelConfig {
            preset: Preset::Paper,
            input_size: (128, 48),
            in_channels: 3,
            conv_channels: vec![32, 32, 64, 64, 128, 128, 256, 256, 256],
            pool_after: vec![1, 3, 5, 8],
            embedding_dim: 512,
            num_classes,
            frw_enabled: true,
            lrelu_slope: 0.1,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            frw_norm_target: 200.0,
            center_alpha: 0.5,
        }
    }

    pub fn desk(num_classes: usize) -> Self {
        ModelConfig {
            preset: Preset::Desk,
            input_size: (32, 16),
            conv_channels: vec![8, 16, 32, 32],
            pool_after: vec![1, 3],
            embedding_dim: 32,
            ..Self::paper(num_classes)
        }
    }

    pub fn for_preset(preset: Preset, num_classes: usize) -> Self {
        match preset {
            Preset::Paper => Self::paper(num_classes),
            Preset::Desk => Self::desk(num_classes),
        }
    }

    /// Spatial size of the final feature map.
    pub fn feature_map_size(&self) -> (usize, usize) {
        let (mut h, mut w) = self.input_size;
        for _ in &self.pool_after {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    pub fn fc_inputs(&self) -> usize {
        let (h, w) = self.feature_map_size();
        h * w * self.conv_channels.last().copied().unwrap_or(self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            problems.push("conv_channels must be a nonempty list of positive widths".to_string());
        }
        if self.pool_after.windows(2).any(|w| w[0] >= w[1]) {
            problems.push("pool_after must be strictly increasing".to_string());
        }
        if let Some(&p) = self.pool_after.iter().find(|&&p| p >= self.conv_channels.len()) {
            problems.push(format!(
                "pool position {p} exceeds conv count {}",
                self.conv_channels.len()
            ));
        }
        let (mut h, mut w) = self.input_size;
        if h == 0 || w == 0 {
            problems.push("input_size must be positive".to_string());
        }
        for _ in &self.pool_after {
            if h < 2 || w < 2 {
                problems.push(format!("input {:?} too small for the pools", self.input_size));
                break;
            }
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        if self.in_channels == 0 {
            problems.push("in_channels must be positive".to_string());
        }
        if self.embedding_dim == 0 {
            problems.push("embedding_dim must be positive".to_string());
        }
        if self.num_classes == 0 {
            problems.push("num_classes must be positive".to_string());
        }
        if !(self.lrelu_slope > 0.0 && self.lrelu_slope < 1.0) {
            problems.push(format!("lrelu_slope must be in (0, 1), got {}", self.lrelu_slope));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum >= 0.0 && self.bn_momentum < 1.0) {
            problems.push("bn_eps must be > 0 and bn_momentum in [0, 1)".to_string());
        }
        if !(self.frw_norm_target > 0.0) {
            problems.push("frw_norm_target must be > 0".to_string());
        }
        if !(self.center_alpha > 0.0 && self.center_alpha <= 1.0) {
            problems.push(format!("center_alpha must be in (0, 1], got {}", self.center_alpha));
        }
        if self.preset == Preset::Paper {
            if self.conv_channels.len() != 9 {
                problems.push("paper preset needs exactly 9 conv layers".to_string());
            }
            if self.pool_after.len() != 4 {
                problems.push("paper preset needs exactly 4 pools".to_string());
            }
            if self.embedding_dim != 512 {
                problems.push("paper preset uses a 512-D embedding".to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        vec![
            ("preset".into(), self.preset.name().into()),
            ("input_height".into(), self.input_size.0.to_string()),
            ("input_width".into(), self.input_size.1.to_string()),
            ("in_channels".into(), self.in_channels.to_string()),
            ("conv_channels".into(), list(&self.conv_channels)),
            ("pool_after".into(), list(&self.pool_after)),
            ("embedding_dim".into(), self.embedding_dim.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("frw_enabled".into(), self.frw_enabled.to_string()),
            ("lrelu_slope".into(), format!("{:?}", self.lrelu_slope)),
            ("bn_eps".into(), format!("{:?}", self.bn_eps)),
            ("bn_momentum".into(), format!("{:?}", self.bn_momentum)),
            ("frw_norm_target".into(), format!("{:?}", self.frw_norm_target)),
            ("center_alpha".into(), format!("{:?}", self.center_alpha)),
        ]
    }

    /// Inverse of [`ModelConfig::to_pairs`]; every key is required.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let map: std::collections::BTreeMap<&str, &str> = pairs.into_iter().collect();
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("missing model key `{k}`")))
        };
        let cfg = ModelConfig {
            preset: Preset::parse(get("preset")?)?,
            input_size: (
                kv::parse_num("input_height", get("input_height")?)?,
                kv::parse_num("input_width", get("input_width")?)?,
            ),
            in_channels: kv::parse_num("in_channels", get("in_channels")?)?,
            conv_channels: kv::parse_list("conv_channels", get("conv_channels")?)?,
            pool_after: kv::parse_list("pool_after", get("pool_after")?)?,
            embedding_dim: kv::parse_num("embedding_dim", get("embedding_dim")?)?,
            num_classes: kv::parse_num("num_classes", get("num_classes")?)?,
            frw_enabled: kv::parse_bool("frw_enabled", get("frw_enabled")?)?,
            lrelu_slope: kv::parse_num("lrelu_slope", get("lrelu_slope")?)?,
            bn_eps: kv::parse_num("bn_eps", get("bn_eps")?)?,
            bn_momentum: kv::parse_num("bn_momentum", get("bn_momentum")?)?,
            frw_norm_target: kv::parse_num("frw_norm_target", get("frw_norm_target")?)?,
            center_alpha: kv::parse_num("center_alpha", get("center_alpha")?)?,
        };
        Ok(cfg)
    }
}

/// One conv → batch norm → leaky ReLU stage.
#[derive(Clone, Debug)]
pub struct ConvBlock<T: Scalar = f32> {
    pub conv: ConvLayer<T>,
    pub bn: BatchNormLayer<T>,
    pub pool: bool,
}

/// Nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// FC → BN → LReLU output, before FRW.
    pub pre_frw: Var,
    /// Final embedding (post-FRW when enabled).
    pub embedding: Var,
    /// Bound FRW weight, when enabled.
    pub frw_weight: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct EmbeddingModel<T: Scalar = f32> {
    config: ModelConfig,
    pub blocks: Vec<ConvBlock<T>>,
    pub fc: FcLayer<T>,
    pub fc_bn: BatchNormLayer<T>,
    pub frw: Option<FrwLayer<T>>,
    pub head: SoftmaxHead<T>,
    pub centers: CenterTable<T>,
    mode: Mode,
}

/// Rows per chunk when embedding large image sets.
const EMBED_CHUNK: usize = 64;

impl<T: Scalar> EmbeddingModel<T> {
    /// Deterministic construction: the same `(cfg, seed)` always yields
    /// bit-identical parameters.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(cfg.conv_channels.len());
        let mut in_ch = cfg.in_channels;
        for (i, &out_ch) in cfg.conv_channels.iter().enumerate() {
            let mut bn = BatchNormLayer::new(&format!("conv{i}.bn"), out_ch);
            bn.eps = cfg.bn_eps;
            bn.momentum = cfg.bn_momentum;
            blocks.push(ConvBlock {
                conv: ConvLayer::new(&format!("conv{i}"), in_ch, out_ch, &mut rng),
                bn,
                pool: cfg.pool_after.contains(&i),
            });
            in_ch = out_ch;
        }
        let d = cfg.embedding_dim;
        let fc = FcLayer::new("fc", cfg.fc_inputs(), d, &mut rng);
        let mut fc_bn = BatchNormLayer::new("fc.bn", d);
        fc_bn.eps = cfg.bn_eps;
        fc_bn.momentum = cfg.bn_momentum;
        let frw = cfg
            .frw_enabled
            .then(|| FrwLayer::new("frw", d, cfg.frw_norm_target));
        let head = SoftmaxHead::new(d, cfg.num_classes, &mut rng);
        let centers = CenterTable::zeros(cfg.num_classes, d, cfg.center_alpha)?;
        Ok(EmbeddingModel {
            config: cfg.clone(),
            blocks,
            fc,
            fc_bn,
            frw,
            head,
            centers,
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        for b in &mut self.blocks {
            b.bn.mode = mode;
        }
        self.fc_bn.mode = mode;
    }

    /// Sets the center update rate in both the config and the table.
    pub fn set_center_alpha(&mut self, alpha: f64) -> Result<()> {
        self.centers = CenterTable::from_centers(self.centers.centers().clone(), alpha)?;
        self.config.center_alpha = alpha;
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn num_classes(&self) -> usize {
        self.head.classes()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = self.config.input_size;
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] != h || shape[3] != w
        {
            return Err(Error::dim(
                "model input",
                shape,
                &[0, self.config.in_channels, h, w],
            ));
        }
        Ok(())
    }

    /// Records the network on `tape`. Batch-norm layers follow the model's
    /// current mode (and update running statistics in training mode).
    pub fn forward(&mut self, tape: &Tape<T>, images: Var) -> Result<Forward> {
        self.check_input(&tape.shape(images))?;
        let slope = self.config.lrelu_slope;
        let mut h = images;
        for block in &mut self.blocks {
            h = block.conv.forward(tape, h)?;
            h = block.bn.forward(tape, h)?;
            h = leaky_relu(tape, h, slope);
            if block.pool {
                h = max_pool(tape, h)?;
            }
        }
        let batch = tape.shape(h)[0];
        let flat = tape.reshape(h, &[batch, self.config.fc_inputs()])?;
        let z = self.fc.forward(tape, flat)?;
        let z = self.fc_bn.forward(tape, z)?;
        let pre_frw = leaky_relu(tape, z, slope);
        let (embedding, frw_weight) = match &self.frw {
            Some(frw) => {
                let w = frw.weight.bind(tape);
                (crate::layers::frw_forward(tape, pre_frw, w)?, Some(w))
            }
            None => (pre_frw, None),
        };
        Ok(Forward {
            pre_frw,
            embedding,
            frw_weight,
        })
    }

    fn forward_eval(&self, tape: &Tape<T>, images: Var) -> Result<Forward> {
        let slope = self.config.lrelu_slope;
        let mut h = images;
        for block in &self.blocks {
            h = block.conv.forward(tape, h)?;
            h = block.bn.forward_eval(tape, h)?;
            h = leaky_relu(tape, h, slope);
            if block.pool {
                h = max_pool(tape, h)?;
            }
        }
        let batch = tape.shape(h)[0];
        let flat = tape.reshape(h, &[batch, self.config.fc_inputs()])?;
        let z = self.fc.forward(tape, flat)?;
        let z = self.fc_bn.forward_eval(tape, z)?;
        let pre_frw = leaky_relu(tape, z, slope);
        let (embedding, frw_weight) = match &self.frw {
            Some(frw) => {
                let w = tape.constant(frw.weight.value.clone());
                (crate::layers::frw_forward(tape, pre_frw, w)?, Some(w))
            }
            None => (pre_frw, None),
        };
        Ok(Forward {
            pre_frw,
            embedding,
            frw_weight,
        })
    }

    /// Evaluation-mode embeddings `[B, D]` (post-FRW when enabled), not
    /// normalised. Pure in the parameters and input.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.embed_both(images)?.1)
    }

    /// Evaluation-mode `(pre-FRW, final)` embeddings.
    pub fn embed_both(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(images.shape())?;
        let batch = images.shape()[0];
        let d = self.config.embedding_dim;
        let mut pre = Vec::with_capacity(batch * d);
        let mut post = Vec::with_capacity(batch * d);
        let mut start = 0;
        while start < batch {
            let end = (start + EMBED_CHUNK).min(batch);
            let idx: Vec<usize> = (start..end).collect();
            let chunk = images.select_rows(&idx)?;
            let tape = Tape::new();
            let x = tape.constant(chunk);
            let out = self.forward_eval(&tape, x)?;
            pre.extend_from_slice(tape.value(out.pre_frw).data());
            post.extend_from_slice(tape.value(out.embedding).data());
            start = end;
        }
        Ok((Tensor::new(&[batch, d], pre)?, Tensor::new(&[batch, d], post)?))
    }

    /// Every optimizer-visible parameter, in a fixed order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = Vec::new();
        for b in &self.blocks {
            out.extend(b.conv.params());
            out.extend(b.bn.params());
        }
        out.extend(self.fc.params());
        out.extend(self.fc_bn.params());
        if let Some(frw) = &self.frw {
            out.push(&frw.weight);
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.conv.params_mut());
            out.extend(b.bn.params_mut());
        }
        out.extend(self.fc.params_mut());
        out.extend(self.fc_bn.params_mut());
        if let Some(frw) = &mut self.frw {
            out.push(&mut frw.weight);
        }
        out.extend(self.head.params_mut());
        out
    }

    /// Every tensor that defines the model state, by name: parameters,
    /// batch-norm running statistics, and centers.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        let mut push_bn = |name: &str, bn: &BatchNormLayer<T>| {
            let c = bn.channels();
            out.push((
                format!("{name}.running_mean"),
                Tensor::new(&[c], bn.running_mean.clone()).expect("bn stats"),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::new(&[c], bn.running_var.clone()).expect("bn stats"),
            ));
        };
        for (i, b) in self.blocks.iter().enumerate() {
            push_bn(&format!("conv{i}.bn"), &b.bn);
        }
        push_bn("fc.bn", &self.fc_bn);
        out.push(("centers".into(), self.centers.centers().clone()));
        out
    }

    /// Overwrites one named state tensor; shapes must match exactly.
    pub fn set_state_tensor(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let shape_err = |expected: &[usize], found: &[usize]| Error::CheckpointShape {
            name: name.to_string(),
            found: found.to_vec(),
            expected: expected.to_vec(),
        };
        if name == "centers" {
            if value.shape() != self.centers.centers().shape() {
                return Err(shape_err(self.centers.centers().shape(), value.shape()));
            }
            self.centers = CenterTable::from_centers(value, self.centers.alpha())?;
            return Ok(());
        }
        if let Some(stem) = name
            .strip_suffix(".running_mean")
            .or_else(|| name.strip_suffix(".running_var"))
        {
            let bn = if stem == "fc.bn" {
                Some(&mut self.fc_bn)
            } else {
                stem.strip_prefix("conv")
                    .and_then(|s| s.strip_suffix(".bn"))
                    .and_then(|s| s.parse::<usize>().ok())
                    .and_then(|i| self.blocks.get_mut(i))
                    .map(|b| &mut b.bn)
            };
            let bn = bn.ok_or_else(|| Error::CheckpointConfig(format!("unknown tensor `{name}`")))?;
            if value.shape() != [bn.channels()] {
                return Err(shape_err(&[bn.channels()], value.shape()));
            }
            if name.ends_with("running_mean") {
                bn.running_mean = value.into_data();
            } else {
                bn.running_var = value.into_data();
            }
            return Ok(());
        }
        let param = self
            .params_mut()
            .into_iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::CheckpointConfig(format!("unknown tensor `{name}`")))?;
        if param.value.shape() != value.shape() {
            return Err(shape_err(param.value.shape(), value.shape()));
        }
        param.value = value;
        Ok(())
    }

    /// SHA-256 over names, shapes and values of the state tensors accepted
    /// by `filter`.
    pub fn checksum_where(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.state_tensors() {
            if !filter(&name) {
                continue;
            }
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }

    /// Checksum of everything except the softmax head and centers.
    pub fn backbone_checksum(&self) -> String {
        self.checksum_where(|n| !is_head_state(n))
    }

    /// Swaps in a freshly initialised head and zero centers for
    /// `num_classes` classes; everything else is left untouched.
    pub fn replace_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "replacement head needs at least 2 classes, got {num_classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.embedding_dim;
        self.head = SoftmaxHead::new(d, num_classes, &mut rng);
        self.centers = CenterTable::zeros(num_classes, d, self.config.center_alpha)?;
        self.config.num_classes = num_classes;
        Ok(())
    }

    /// `(name, shape)` for every parameter.
    pub fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        self.params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }
}

/// True for state owned by the softmax head or the center table.
pub fn is_head_state(name: &str) -> bool {
    name.starts_with("head.") || name == "centers"
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_size: (8, 4),
            conv_channels: vec![3, 4],
            pool_after: vec![0, 1],
            embedding_dim: 6,
            ..ModelConfig::desk(5)
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = EmbeddingModel::<f32>::build(&tiny(), 3).unwrap();
        let b = EmbeddingModel::<f32>::build(&tiny(), 3).unwrap();
        let c = EmbeddingModel::<f32>::build(&tiny(), 4).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn paper_inventory() {
        let cfg = ModelConfig::paper(100);
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_map_size(), (8, 3));
        let m = EmbeddingModel::<f32>::build(&cfg, 0).unwrap();
        let names: Vec<String> = m.inventory().into_iter().map(|(n, _)| n).collect();
        let convs = names
            .iter()
            .filter(|n| n.starts_with("conv") && n.ends_with(".weight"))
            .count();
        assert_eq!(convs, 9);
        assert_eq!(names.iter().filter(|n| *n == "fc.weight").count(), 1);
        assert_eq!(names.iter().filter(|n| *n == "frw.weight").count(), 1);
        assert_eq!(names.iter().filter(|n| *n == "head.weight").count(), 1);
        assert_eq!(m.head.dim(), 512);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = tiny();
        cfg.pool_after = vec![0, 2];
        assert!(matches!(
            EmbeddingModel::<f32>::build(&cfg, 0),
            Err(Error::Config(_))
        ));
        let mut cfg = ModelConfig::paper(10);
        cfg.conv_channels.pop();
        cfg.pool_after = vec![1, 3, 5, 7];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn frw_off_output_is_pre_frw() {
        let mut cfg = tiny();
        cfg.frw_enabled = false;
        let m = EmbeddingModel::<f64>::build(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 3, 8, 4], 1.0, &mut rng);
        let (pre, post) = m.embed_both(&x).unwrap();
        assert_eq!(pre, post);
    }

    #[test]
    fn frw_on_output_is_reweighted_pre_frw() {
        let mut m = EmbeddingModel::<f64>::build(&tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        m.frw.as_mut().unwrap().weight.value = Tensor::randn(&[6], 1.0, &mut rng);
        let x = Tensor::randn(&[3, 3, 8, 4], 1.0, &mut rng);
        let (pre, post) = m.embed_both(&x).unwrap();
        let w = m.frw.as_ref().unwrap().weight.value.clone();
        for i in 0..3 {
            for k in 0..6 {
                assert_eq!(post.row(i)[k], pre.row(i)[k] * w.data()[k]);
            }
        }
    }

    #[test]
    fn embed_shape_and_determinism() {
        let m = EmbeddingModel::<f32>::build(&tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for b in [1, 2, 70] {
            let x = Tensor::randn(&[b, 3, 8, 4], 1.0, &mut rng);
            let e1 = m.embed(&x).unwrap();
            assert_eq!(e1.shape(), &[b, 6]);
            assert_eq!(e1, m.embed(&x).unwrap());
        }
        let wrong = Tensor::<f32>::zeros(&[1, 3, 8, 5]);
        assert!(m.embed(&wrong).is_err());
    }

    #[test]
    fn replace_head_touches_only_head() {
        let mut m = EmbeddingModel::<f32>::build(&tiny(), 1).unwrap();
        let before = m.backbone_checksum();
        m.replace_head(7, 99).unwrap();
        assert_eq!(m.backbone_checksum(), before);
        assert_eq!(m.head.classes(), 7);
        assert_eq!(m.centers.classes(), 7);
        assert!(m.centers.centers().data().iter().all(|&v| v == 0.0));
        assert!(m.replace_head(1, 0).is_err());
    }

    #[test]
    fn config_pairs_round_trip() {
        let cfg = ModelConfig::paper(17);
        let pairs = cfg.to_pairs();
        let back =
            ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, cfg);
    }
}
