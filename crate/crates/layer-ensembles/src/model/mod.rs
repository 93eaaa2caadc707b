//! Multi-head encoder-decoder segmentation network: one segmentation head
//! after every encoder and decoder block, so a single forward pass yields an
//! ensemble of predictions from sub-networks of increasing depth.

use crate::autodiff::{Graph, NodeId};
use crate::error::{LeError, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    GeneralizedDice,
    WeightedCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of encoder stages.
    pub depth: usize,
    pub base_channels: usize,
    /// Output channels per head: 1 selects sigmoid, >=2 selects softmax.
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// When true the first encoder block also downsamples, mirroring the
    /// ten-head reference layout (depth 5 -> 10 heads). The default keeps
    /// the first block at full resolution (depth d -> 2d-1 heads).
    #[serde(default)]
    pub first_block_downsamples: bool,
    pub loss: LossKind,
    /// Cross-entropy class weights; length 2 for binary, num_classes otherwise.
    #[serde(default)]
    pub ce_class_weights: Option<Vec<f64>>,
}

impl ModelConfig {
    pub fn downsample_count(&self) -> usize {
        if self.first_block_downsamples {
            self.depth
        } else {
            self.depth - 1
        }
    }

    pub fn num_heads(&self) -> usize {
        self.depth + self.downsample_count()
    }

    /// Channels emitted by each head (K' in the head maps).
    pub fn head_channels(&self) -> usize {
        self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(LeError::InvalidConfig("model depth must be >= 2".into()));
        }
        if self.base_channels == 0 {
            return Err(LeError::InvalidConfig("base_channels must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(LeError::InvalidConfig("num_classes must be >= 1".into()));
        }
        let div = 1usize << self.downsample_count();
        if self.height % div != 0 || self.width % div != 0 {
            return Err(LeError::InvalidConfig(format!(
                "input {}x{} must be divisible by 2^{} = {}",
                self.height,
                self.width,
                self.downsample_count(),
                div
            )));
        }
        if let Some(w) = &self.ce_class_weights {
            let expect = if self.num_classes == 1 { 2 } else { self.num_classes };
            if w.len() != expect {
                return Err(LeError::InvalidConfig(format!(
                    "ce_class_weights must have length {expect}, got {}",
                    w.len()
                )));
            }
        }
        Ok(())
    }
}

/// Per-head class-probability maps for one image, ordered shallowest first.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    /// Each map is [K',H,W] at full input resolution.
    pub probs: Vec<Tensor>,
}

impl HeadOutputs {
    pub fn num_heads(&self) -> usize {
        self.probs.len()
    }

    pub fn spatial(&self) -> (usize, usize) {
        let sh = self.probs[0].shape();
        (sh[1], sh[2])
    }

    pub fn channels(&self) -> usize {
        self.probs[0].shape()[0]
    }
}

#[derive(Debug, Clone)]
struct ConvP {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct BnP {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    conv1: ConvP,
    bn1: BnP,
    conv2: ConvP,
    bn2: BnP,
    shortcut: Option<ConvP>,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    /// Encoder block index whose output is concatenated after upsampling.
    skip_from: Option<usize>,
    conv1: ConvP,
    bn1: BnP,
    conv2: ConvP,
    bn2: BnP,
}

#[derive(Debug, Clone)]
struct Head {
    upsample_factor: usize,
    conv: ConvP,
}

/// Named parameter storage. Running batchnorm statistics live here too, as
/// non-trainable entries, so checkpoints capture the full inference state.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamSet {
    fn add(&mut self, name: String, value: Tensor, trainable: bool) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        (0..self.len()).map(|i| (self.names[i].as_str(), &self.values[i], self.trainable[i]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone)]
pub struct Network {
    pub config: ModelConfig,
    params: ParamSet,
    encoders: Vec<EncoderBlock>,
    decoders: Vec<DecoderBlock>,
    heads: Vec<Head>,
}

/// Stable per-component seed stream derived from the run seed (splitmix64).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 step over seed ^ tag
    let mut z = seed ^ tag.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl Network {
    /// Builds the network with fan-in-scaled uniform init. Each head's
    /// parameters draw from an independent seed stream.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut backbone_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));

        let conv = |params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize, stride: usize| -> ConvP {
            let fan_in = (cin * k * k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let weight = Tensor::from_fn(&[cout, cin, k, k], |_| rng.gen_range(-bound..bound));
            ConvP {
                weight: params.add(format!("{name}.weight"), weight, true),
                bias: params.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true),
                stride,
                pad: k / 2,
            }
        };
        let bn = |params: &mut ParamSet, name: &str, c: usize| -> BnP {
            BnP {
                gamma: params.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0), true),
                beta: params.add(format!("{name}.beta"), Tensor::zeros(&[c]), true),
                running_mean: params.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), false),
                running_var: params.add(format!("{name}.running_var"), Tensor::full(&[c], 1.0), false),
            }
        };

        let depth = config.depth;
        let in_channels = 1usize;
        let mut encoders = Vec::with_capacity(depth);
        let mut enc_channels = Vec::with_capacity(depth);
        let mut enc_divisor = Vec::with_capacity(depth);
        let mut divisor = 1usize;
        let mut cin = in_channels;
        for i in 0..depth {
            let cout = config.base_channels << i;
            let stride = if i == 0 && !config.first_block_downsamples { 1 } else { 2 };
            divisor *= stride;
            let name = format!("enc{i}");
            let conv1 = conv(&mut params, &mut backbone_rng, &format!("{name}.conv1"), cin, cout, 3, stride);
            let bn1 = bn(&mut params, &format!("{name}.bn1"), cout);
            let conv2 = conv(&mut params, &mut backbone_rng, &format!("{name}.conv2"), cout, cout, 3, 1);
            let bn2 = bn(&mut params, &format!("{name}.bn2"), cout);
            let shortcut = if cin != cout || stride != 1 {
                Some(conv(&mut params, &mut backbone_rng, &format!("{name}.shortcut"), cin, cout, 1, stride))
            } else {
                None
            };
            encoders.push(EncoderBlock {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            });
            enc_channels.push(cout);
            enc_divisor.push(divisor);
            cin = cout;
        }

        let n_dec = config.downsample_count();
        let mut decoders = Vec::with_capacity(n_dec);
        let mut cur_channels = enc_channels[depth - 1];
        let mut cur_divisor = enc_divisor[depth - 1];
        let mut dec_channels = Vec::with_capacity(n_dec);
        let mut dec_divisor = Vec::with_capacity(n_dec);
        for j in 0..n_dec {
            let target_divisor = cur_divisor / 2;
            let skip_from = (0..depth - 1).find(|&i| enc_divisor[i] == target_divisor);
            let cout = skip_from.map(|i| enc_channels[i]).unwrap_or(config.base_channels);
            let concat_in = cur_channels + skip_from.map(|i| enc_channels[i]).unwrap_or(0);
            let name = format!("dec{j}");
            let conv1 = conv(&mut params, &mut backbone_rng, &format!("{name}.conv1"), concat_in, cout, 3, 1);
            let bn1 = bn(&mut params, &format!("{name}.bn1"), cout);
            let conv2 = conv(&mut params, &mut backbone_rng, &format!("{name}.conv2"), cout, cout, 3, 1);
            let bn2 = bn(&mut params, &format!("{name}.bn2"), cout);
            decoders.push(DecoderBlock {
                skip_from,
                conv1,
                bn1,
                conv2,
                bn2,
            });
            cur_channels = cout;
            cur_divisor = target_divisor;
            dec_channels.push(cout);
            dec_divisor.push(cur_divisor);
        }
        debug_assert_eq!(cur_divisor, 1);

        // Heads in network order: encoder taps shallowest-first, then decoder taps.
        let kprime = config.head_channels();
        let mut heads = Vec::with_capacity(config.num_heads());
        for i in 0..depth {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 100 + i as u64));
            heads.push(Head {
                upsample_factor: enc_divisor[i],
                conv: conv(&mut params, &mut rng, &format!("head{}", heads.len()), enc_channels[i], kprime, 1, 1),
            });
        }
        for j in 0..n_dec {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 200 + j as u64));
            heads.push(Head {
                upsample_factor: dec_divisor[j],
                conv: conv(&mut params, &mut rng, &format!("head{}", heads.len()), dec_channels[j], kprime, 1, 1),
            });
        }
        debug_assert_eq!(heads.len(), config.num_heads());

        Ok(Self {
            config,
            params,
            encoders,
            decoders,
            heads,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let sh = image.shape();
        if sh.len() != 4 || sh[1] != 1 || sh[2] != self.config.height || sh[3] != self.config.width {
            return Err(LeError::ShapeMismatch {
                context: "network input".into(),
                expected: vec![0, 1, self.config.height, self.config.width],
                got: sh.to_vec(),
            });
        }
        Ok(())
    }

    fn graph_param(&self, g: &mut Graph, pid: usize, mode: Mode) -> NodeId {
        match mode {
            Mode::Train if self.params.is_trainable(pid) => g.param(pid, self.params.value(pid).clone()),
            _ => g.constant(self.params.value(pid).clone()),
        }
    }

    // A strided convolution sampled at offset 0 equals a stride-1
    // convolution followed by nearest downsampling, and unlike the direct
    // strided form it keeps the output extent integral on even inputs.
    fn graph_conv(&self, g: &mut Graph, x: NodeId, c: &ConvP, mode: Mode) -> Result<NodeId> {
        let w = self.graph_param(g, c.weight, mode);
        let b = self.graph_param(g, c.bias, mode);
        let y = g.conv2d(x, w, b, 1, c.pad)?;
        if c.stride > 1 {
            g.downsample_nearest(y, c.stride)
        } else {
            Ok(y)
        }
    }

    fn graph_bn(&self, g: &mut Graph, x: NodeId, b: &BnP, mode: Mode, bn_nodes: &mut Vec<(usize, usize, NodeId)>) -> NodeId {
        let gamma = self.graph_param(g, b.gamma, mode);
        let beta = self.graph_param(g, b.beta, mode);
        match mode {
            Mode::Train => {
                let node = g.batchnorm_train(x, gamma, beta, BN_EPS);
                bn_nodes.push((b.running_mean, b.running_var, node));
                node
            }
            Mode::Eval => g.batchnorm_eval(
                x,
                gamma,
                beta,
                self.params.value(b.running_mean),
                self.params.value(b.running_var),
                BN_EPS,
            ),
        }
    }

    /// Builds the full forward pass on `g`. Returns one probability node per
    /// head plus the train-mode batchnorm nodes (for running-stat updates).
    /// `only_head` restricts computation to a single head's sub-network.
    pub fn forward_on_graph(
        &self,
        g: &mut Graph,
        image: &Tensor,
        mode: Mode,
        only_head: Option<usize>,
    ) -> Result<ForwardPass> {
        self.check_input(image)?;
        let mut bn_nodes = Vec::new();
        let x0 = g.constant(image.clone());
        let mut enc_outs: Vec<NodeId> = Vec::with_capacity(self.encoders.len());
        let mut taps: Vec<NodeId> = Vec::with_capacity(self.heads.len());

        let mut x = x0;
        for blk in &self.encoders {
            let mut main = self.graph_conv(g, x, &blk.conv1, mode)?;
            main = self.graph_bn(g, main, &blk.bn1, mode, &mut bn_nodes);
            main = g.relu(main);
            main = self.graph_conv(g, main, &blk.conv2, mode)?;
            main = self.graph_bn(g, main, &blk.bn2, mode, &mut bn_nodes);
            let short = match &blk.shortcut {
                Some(sc) => self.graph_conv(g, x, sc, mode)?,
                None => x,
            };
            let sum = g.add(main, short)?;
            x = g.relu(sum);
            enc_outs.push(x);
            taps.push(x);
        }
        for blk in &self.decoders {
            let mut up = g.upsample_nearest(x, 2);
            if let Some(i) = blk.skip_from {
                up = g.concat_channels(up, enc_outs[i])?;
            }
            let mut y = self.graph_conv(g, up, &blk.conv1, mode)?;
            y = self.graph_bn(g, y, &blk.bn1, mode, &mut bn_nodes);
            y = g.relu(y);
            y = self.graph_conv(g, y, &blk.conv2, mode)?;
            y = self.graph_bn(g, y, &blk.bn2, mode, &mut bn_nodes);
            x = g.relu(y);
            taps.push(x);
        }

        let mut head_nodes = Vec::with_capacity(self.heads.len());
        for (h, head) in self.heads.iter().enumerate() {
            if let Some(only) = only_head {
                if h != only {
                    continue;
                }
            }
            let up = g.upsample_nearest(taps[h], head.upsample_factor);
            let logits = self.graph_conv(g, up, &head.conv, mode)?;
            let probs = if self.config.head_channels() == 1 {
                g.sigmoid(logits)
            } else {
                g.softmax_channels(logits)
            };
            head_nodes.push(probs);
        }
        Ok(ForwardPass {
            head_nodes,
            bn_nodes,
        })
    }

    /// Single-pass inference: all head probability maps for a batch.
    pub fn forward_all_heads(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let pass = self.forward_on_graph(&mut g, image, Mode::Eval, None)?;
        Ok(pass.head_nodes.iter().map(|&n| g.value(n).clone()).collect())
    }

    /// Inference through one head only (the Plain-baseline path when
    /// `head = N-1`); used as the single-head timing reference.
    pub fn forward_single_head(&self, image: &Tensor, head: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let pass = self.forward_on_graph(&mut g, image, Mode::Eval, Some(head))?;
        Ok(g.value(pass.head_nodes[0]).clone())
    }

    /// Splits batched head maps into per-image `HeadOutputs`.
    pub fn split_outputs(batch_maps: &[Tensor]) -> Vec<HeadOutputs> {
        let b_n = batch_maps[0].shape()[0];
        let (k, h, w) = (
            batch_maps[0].shape()[1],
            batch_maps[0].shape()[2],
            batch_maps[0].shape()[3],
        );
        let plane = k * h * w;
        (0..b_n)
            .map(|b| HeadOutputs {
                probs: batch_maps
                    .iter()
                    .map(|m| {
                        Tensor::new(vec![k, h, w], m.data()[b * plane..(b + 1) * plane].to_vec())
                            .expect("split shape")
                    })
                    .collect(),
            })
            .collect()
    }

    /// Applies the running-statistic update after a train-mode forward.
    pub fn update_running_stats(&mut self, g: &Graph, pass: &ForwardPass) {
        for &(rmean_pid, rvar_pid, node) in &pass.bn_nodes {
            let (mean, var) = g.bn_batch_stats(node).expect("train bn node");
            let rm = self.params.value_mut(rmean_pid);
            for (r, &m) in rm.data_mut().iter_mut().zip(mean.data()) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            let rv = self.params.value_mut(rvar_pid);
            for (r, &v) in rv.data_mut().iter_mut().zip(var.data()) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }

    /// Builds the joint training loss: unweighted mean of per-head losses.
    pub fn multi_head_loss(&self, g: &mut Graph, head_nodes: &[NodeId], labels: &[u32]) -> Result<NodeId> {
        let per_head: Vec<NodeId> = head_nodes
            .iter()
            .map(|&h| self.head_loss(g, h, labels))
            .collect::<Result<_>>()?;
        let n = per_head.len() as f64;
        g.lincomb(&per_head, &vec![1.0 / n; per_head.len()])
    }

    pub fn head_loss(&self, g: &mut Graph, probs: NodeId, labels: &[u32]) -> Result<NodeId> {
        match self.config.loss {
            LossKind::GeneralizedDice => g.generalized_dice(probs, labels),
            LossKind::WeightedCrossEntropy => {
                let default_w = vec![1.0; if self.config.num_classes == 1 { 2 } else { self.config.num_classes }];
                let weights = self.config.ce_class_weights.clone().unwrap_or(default_w);
                g.weighted_ce(probs, labels, &weights)
            }
        }
    }
}

pub struct ForwardPass {
    pub head_nodes: Vec<NodeId>,
    pub bn_nodes: Vec<(usize, usize, NodeId)>,
}
