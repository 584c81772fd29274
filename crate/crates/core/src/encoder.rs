//! Small residual convolutional encoder with a contrastive projection head.
//!
//! Layout: a 3×3 stem convolution at input resolution, then one stage per
//! entry of `stage_widths`. Each stage opens with a stride-2 3×3 conv unit
//! and continues with `blocks_per_stage` residual blocks (two 3×3 convs,
//! identity shortcut). Units are named `conv{S}_{U}`: with three stages, `S`
//! runs 3..=5 and unit 1 is the downsampling conv, so a one-block-per-stage
//! encoder exposes `conv3_2`, `conv4_2` and `conv5_2` as its residual blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use crate::autodiff::FeatureTaps;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    #[default]
    Projection,
    #[serde(rename = "projection+classifier")]
    ProjectionClassifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_resolution: usize,
    pub input_channels: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub tap_names: Vec<String>,
    #[serde(default)]
    pub head_mode: HeadMode,
    #[serde(default)]
    pub class_count: usize,
}

fn default_embedding_dim() -> usize {
    128
}

impl EncoderConfig {
    /// res 32, widths [16, 32, 64], one block per stage, 128-d embeddings.
    pub fn tiny() -> Self {
        EncoderConfig {
            input_resolution: 32,
            input_channels: 3,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: 1,
            embedding_dim: 128,
            tap_names: vec!["conv3_2".into(), "conv4_2".into(), "conv5_2".into()],
            head_mode: HeadMode::Projection,
            class_count: 0,
        }
    }

    fn first_stage_number(&self) -> usize {
        6usize.saturating_sub(self.stage_widths.len()).max(2)
    }

    /// Name of unit `unit` (0 = downsampling conv) in stage `stage`.
    pub fn unit_name(&self, stage: usize, unit: usize) -> String {
        format!("conv{}_{}", self.first_stage_number() + stage, unit + 1)
    }

    /// Every tappable unit name, shallowest first.
    pub fn unit_names(&self) -> Vec<String> {
        (0..self.stage_widths.len())
            .flat_map(|s| (0..=self.blocks_per_stage).map(move |u| (s, u)))
            .map(|(s, u)| self.unit_name(s, u))
            .collect()
    }

    /// Spatial size of the feature maps in stage `stage`.
    pub fn stage_resolution(&self, stage: usize) -> usize {
        (0..=stage).fold(self.input_resolution, |r, _| r.div_ceil(2))
    }

    /// Spatial size at a named unit.
    pub fn unit_resolution(&self, name: &str) -> Option<usize> {
        let names = self.unit_names();
        let pos = names.iter().position(|n| n == name)?;
        Some(self.stage_resolution(pos / (self.blocks_per_stage + 1)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embedding_dim < 2 {
            return bad(format!("embedding-dim must be ≥ 2, got {}", self.embedding_dim));
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return bad("stage-widths must be a nonempty list of positive widths".into());
        }
        if self.input_channels == 0 || self.input_resolution < 2 {
            return bad("input must have ≥ 1 channel and resolution ≥ 2".into());
        }
        if self.stage_resolution(self.stage_widths.len() - 1) < 1 {
            return bad("too many stages for the input resolution".into());
        }
        let names = self.unit_names();
        for tap in &self.tap_names {
            if !names.contains(tap) {
                return Err(Error::UnknownTap(format!("{tap} (available: {})", names.join(", "))));
            }
        }
        if self.head_mode == HeadMode::ProjectionClassifier && self.class_count < 2 {
            return bad("a classifier head needs class-count ≥ 2".into());
        }
        Ok(())
    }

    pub fn has_classifier(&self) -> bool {
        self.head_mode == HeadMode::ProjectionClassifier
    }
}

/// Batch-norm layer state outside the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<F = f32> {
    pub name: String,
    pub scale: usize,
    pub shift: usize,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
}

#[derive(Clone, Debug)]
struct ConvUnit {
    weight: usize,
    bn: usize,
    stride: usize,
}

#[derive(Clone, Debug)]
struct Block {
    first: ConvUnit,
    second: ConvUnit,
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvUnit,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
struct DenseLayer {
    weight: usize,
    bias: usize,
}

/// How batch norm behaves during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics untouched.
    TrainFrozenStats,
    /// Running statistics.
    Eval,
}

/// Node handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// L2-normalized projections, `B×D`.
    pub embeddings: NodeId,
    /// Pooled backbone features, `B×C_last`.
    pub pooled: NodeId,
    pub logits: Option<NodeId>,
    /// Leaf node of each parameter slot.
    pub param_nodes: Vec<NodeId>,
}

/// Non-graph results of an eval-mode forward.
#[derive(Clone, Debug)]
pub struct Inference<F = f32> {
    pub embeddings: Tensor<F>,
    pub pooled: Tensor<F>,
    pub logits: Option<Tensor<F>>,
}

#[derive(Clone, Debug)]
pub struct Encoder<F: Real = f32> {
    config: EncoderConfig,
    params: ParamStore<F>,
    bns: Vec<BatchNormState<F>>,
    stem: ConvUnit,
    stages: Vec<Stage>,
    hidden: DenseLayer,
    projection: DenseLayer,
    classifier: Option<DenseLayer>,
}

struct Init<'a, F: Real> {
    rng: ChaCha8Rng,
    params: &'a mut ParamStore<F>,
    bns: &'a mut Vec<BatchNormState<F>>,
}

impl<F: Real> Init<'_, F> {
    fn he_uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::of(self.rng.random_range(-bound..bound))).collect();
        self.params.push(name, Tensor::new(shape, data).expect("shape"))
    }

    fn conv_unit(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> ConvUnit {
        let weight = self.he_uniform(format!("{name}.weight"), vec![cout, cin, 3, 3], cin * 9);
        let scale = self.params.push(format!("{name}.bn.scale"), Tensor::ones(vec![cout]));
        let shift = self.params.push(format!("{name}.bn.shift"), Tensor::zeros(vec![cout]));
        self.bns.push(BatchNormState {
            name: format!("{name}.bn"),
            scale,
            shift,
            running_mean: vec![F::zero(); cout],
            running_var: vec![F::one(); cout],
        });
        ConvUnit { weight, bn: self.bns.len() - 1, stride }
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> DenseLayer {
        let weight = self.he_uniform(format!("{name}.weight"), vec![fan_in, fan_out], fan_in);
        let bias = self.params.push(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        DenseLayer { weight, bias }
    }
}

impl<F: Real> Encoder<F> {
    /// He-uniform conv/dense weights, zero biases, unit/zero norm affine.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut bns = Vec::new();
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), params: &mut params, bns: &mut bns };
        let widths = &config.stage_widths;
        let stem = init.conv_unit("stem", config.input_channels, widths[0], 1);
        let mut stages = Vec::new();
        let mut cin = widths[0];
        for (s, &w) in widths.iter().enumerate() {
            let down = init.conv_unit(&config.unit_name(s, 0), cin, w, 2);
            let blocks = (1..=config.blocks_per_stage)
                .map(|b| {
                    let name = config.unit_name(s, b);
                    Block {
                        first: init.conv_unit(&format!("{name}.a"), w, w, 1),
                        second: init.conv_unit(&format!("{name}.b"), w, w, 1),
                    }
                })
                .collect();
            stages.push(Stage { down, blocks });
            cin = w;
        }
        let hidden = init.dense("head.hidden", cin, cin);
        let projection = init.dense("head.projection", cin, config.embedding_dim);
        let classifier = config.has_classifier().then(|| init.dense("head.classifier", cin, config.class_count));
        Ok(Encoder { config, params, bns, stem, stages, hidden, projection, classifier })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Same weights with a different set of tapped units.
    pub fn with_taps(&self, names: &[String]) -> Result<Self> {
        let mut config = self.config.clone();
        config.tap_names = names.to_vec();
        config.validate()?;
        Ok(Encoder { config, ..self.clone() })
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn batch_norms(&self) -> &[BatchNormState<F>] {
        &self.bns
    }

    pub fn batch_norms_mut(&mut self) -> &mut [BatchNormState<F>] {
        &mut self.bns
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Same architecture and state in another precision.
    pub fn cast<G: Real>(&self) -> Encoder<G> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
            bns: self
                .bns
                .iter()
                .map(|b| BatchNormState {
                    name: b.name.clone(),
                    scale: b.scale,
                    shift: b.shift,
                    running_mean: b.running_mean.iter().map(|v| G::of(v.to_f64_lossy())).collect(),
                    running_var: b.running_var.iter().map(|v| G::of(v.to_f64_lossy())).collect(),
                })
                .collect(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            hidden: self.hidden.clone(),
            projection: self.projection.clone(),
            classifier: self.classifier.clone(),
        }
    }

    fn check_images(&self, images: &Tensor<F>) -> Result<()> {
        let c = &self.config;
        let want = [c.input_channels, c.input_resolution, c.input_resolution];
        if images.shape().len() != 4 || images.shape()[1..] != want {
            return Err(Error::shape(
                "encoder",
                format!("expected N×{}×{}×{} images, got {:?}", want[0], want[1], want[2], images.shape()),
            ));
        }
        Ok(())
    }

    /// Forward pass recording into `graph`. Taps named in the config are
    /// registered on the graph. In [`Mode::Train`] the running statistics
    /// are updated from this batch.
    pub fn forward(&mut self, graph: &mut Graph<F>, images: &Tensor<F>, mode: Mode) -> Result<ForwardOutput> {
        let (out, stats) = self.forward_impl(graph, images, mode)?;
        if mode == Mode::Train {
            let m = F::of(BN_MOMENTUM);
            for (bn, node) in stats {
                let (mean, var) = graph.batch_stats(node).expect("train-mode batch norm");
                let state = &mut self.bns[bn];
                for (r, &b) in state.running_mean.iter_mut().zip(mean) {
                    *r = (F::one() - m) * *r + m * b;
                }
                for (r, &b) in state.running_var.iter_mut().zip(var) {
                    *r = (F::one() - m) * *r + m * b;
                }
            }
        }
        Ok(out)
    }

    /// Forward pass that leaves the encoder untouched.
    pub fn forward_frozen(&self, graph: &mut Graph<F>, images: &Tensor<F>, mode: Mode) -> Result<ForwardOutput> {
        if mode == Mode::Train {
            return Err(Error::invalid("forward_frozen cannot update running statistics"));
        }
        self.forward_impl(graph, images, mode).map(|(o, _)| o)
    }

    fn forward_impl(
        &self,
        graph: &mut Graph<F>,
        images: &Tensor<F>,
        mode: Mode,
    ) -> Result<(ForwardOutput, Vec<(usize, NodeId)>)> {
        self.check_images(images)?;
        let param_nodes: Vec<NodeId> =
            self.params.iter().enumerate().map(|(slot, p)| graph.param(slot, p.value.clone())).collect();
        let mut stats = Vec::new();
        let mut unit = |g: &mut Graph<F>, x: NodeId, u: &ConvUnit, relu: bool| -> Result<NodeId> {
            let y = g.conv2d(x, param_nodes[u.weight], None, u.stride, 1)?;
            let bn = &self.bns[u.bn];
            let (scale, shift) = (param_nodes[bn.scale], param_nodes[bn.shift]);
            let eps = F::of(BN_EPS);
            let y = match mode {
                Mode::Eval => g.batch_norm_eval(y, scale, shift, &bn.running_mean, &bn.running_var, eps)?,
                Mode::Train | Mode::TrainFrozenStats => {
                    let node = g.batch_norm_train(y, scale, shift, eps)?;
                    stats.push((u.bn, node));
                    node
                }
            };
            if relu {
                g.relu(y)
            } else {
                Ok(y)
            }
        };

        let x = graph.constant(images.clone());
        let mut h = unit(graph, x, &self.stem, true)?;
        for (s, stage) in self.stages.iter().enumerate() {
            h = unit(graph, h, &stage.down, true)?;
            let name = self.config.unit_name(s, 0);
            if self.config.tap_names.contains(&name) {
                graph.tap(name, h);
            }
            for (b, block) in stage.blocks.iter().enumerate() {
                let a = unit(graph, h, &block.first, true)?;
                let r = unit(graph, a, &block.second, false)?;
                let sum = graph.add(r, h)?;
                h = graph.relu(sum)?;
                let name = self.config.unit_name(s, b + 1);
                if self.config.tap_names.contains(&name) {
                    graph.tap(name, h);
                }
            }
        }
        let pooled = graph.global_avg_pool(h)?;
        let hid = graph.dense(pooled, param_nodes[self.hidden.weight], Some(param_nodes[self.hidden.bias]))?;
        let hid = graph.relu(hid)?;
        let proj = graph.dense(hid, param_nodes[self.projection.weight], Some(param_nodes[self.projection.bias]))?;
        let embeddings = graph.l2_normalize(proj)?;
        let logits = match &self.classifier {
            Some(c) => Some(graph.dense(pooled, param_nodes[c.weight], Some(param_nodes[c.bias]))?),
            None => None,
        };
        Ok((ForwardOutput { embeddings, pooled, logits, param_nodes }, stats))
    }

    /// Eval-mode forward in chunks of `chunk` images.
    pub fn infer(&self, images: &Tensor<F>, chunk: usize) -> Result<Inference<F>> {
        self.check_images(images)?;
        let n = images.shape()[0];
        let (mut emb, mut pooled, mut logits) = (Vec::new(), Vec::new(), Vec::new());
        for start in (0..n).step_by(chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + chunk.max(1)).min(n)).collect();
            let part = images.select_rows(&idx);
            let mut g = Graph::new();
            let out = self.forward_frozen(&mut g, &part, Mode::Eval)?;
            emb.push(g.value(out.embeddings).clone());
            pooled.push(g.value(out.pooled).clone());
            if let Some(l) = out.logits {
                logits.push(g.value(l).clone());
            }
        }
        let cat =
            |parts: Vec<Tensor<F>>| -> Result<Tensor<F>> { Tensor::concat_rows(&parts.iter().collect::<Vec<_>>()) };
        Ok(Inference {
            embeddings: cat(emb)?,
            pooled: cat(pooled)?,
            logits: if logits.is_empty() { None } else { Some(cat(logits)?) },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize, res: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * res * res).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(vec![n, 3, res, res], data).unwrap()
    }

    #[test]
    fn tiny_config_shapes() {
        let mut enc = Encoder::<f32>::new(EncoderConfig::tiny(), 1).unwrap();
        assert!(enc.param_count() > 0);
        let mut g = Graph::new();
        let out = enc.forward(&mut g, &images(4, 32, 0), Mode::Train).unwrap();
        assert_eq!(g.value(out.embeddings).shape(), &[4, 128]);
        for row in g.value(out.embeddings).data().chunks(128) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        let l = g.sum(out.embeddings).unwrap();
        g.backward(l).unwrap();
        let taps = g.tap_gradients(&enc.config().tap_names).unwrap();
        let sizes: Vec<usize> =
            ["conv3_2", "conv4_2", "conv5_2"].iter().map(|n| taps.activation(n).unwrap().shape()[2]).collect();
        assert_eq!(sizes, vec![16, 8, 4]);
        assert_eq!(taps.activation("conv4_2").unwrap().shape(), &[4, 32, 8, 8]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Encoder::<f32>::new(EncoderConfig::tiny(), 9).unwrap();
        let b = Encoder::<f32>::new(EncoderConfig::tiny(), 9).unwrap();
        let c = Encoder::<f32>::new(EncoderConfig::tiny(), 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn unknown_tap_is_an_error() {
        let mut cfg = EncoderConfig::tiny();
        cfg.tap_names = vec!["conv9_9".into()];
        assert!(matches!(Encoder::<f32>::new(cfg, 0), Err(Error::UnknownTap(_))));
    }

    #[test]
    fn wrong_image_shape() {
        let enc = Encoder::<f32>::new(EncoderConfig::tiny(), 0).unwrap();
        assert!(enc.infer(&images(2, 16, 0), 8).is_err());
    }

    #[test]
    fn identical_images_identical_rows_in_eval() {
        let enc = Encoder::<f32>::new(EncoderConfig::tiny(), 3).unwrap();
        let one = images(1, 32, 5);
        let batch = Tensor::concat_rows(&[&one, &images(1, 32, 6), &one]).unwrap();
        let inf = enc.infer(&batch, 8).unwrap();
        assert_eq!(inf.embeddings.row(0), inf.embeddings.row(2));
    }

    #[test]
    fn classifier_head_on_pooled_features() {
        let mut cfg = EncoderConfig::tiny();
        cfg.head_mode = HeadMode::ProjectionClassifier;
        cfg.class_count = 4;
        let enc = Encoder::<f32>::new(cfg, 0).unwrap();
        let inf = enc.infer(&images(3, 32, 1), 8).unwrap();
        assert_eq!(inf.logits.unwrap().shape(), &[3, 4]);
        assert_eq!(inf.pooled.shape(), &[3, 64]);
    }
}
