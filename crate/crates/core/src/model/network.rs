use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dense::{DenseBlock, Head, UpConv};
use super::gates::{ChannelGate, SpatialGate};
use super::{ModelConfig, ModelError};
use crate::nn::ops::MaxPool2;
use crate::nn::{Mode, Param, Real, Tensor};

/// Ownership groups for trainable parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    PetDecoder,
    AslDecoder,
    Gates,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Encoder,
        ParamGroup::PetDecoder,
        ParamGroup::AslDecoder,
        ParamGroup::Gates,
    ];
}

/// Which decoder heads a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branches {
    pub pet: bool,
    pub asl: bool,
}

impl Branches {
    pub const BOTH: Branches = Branches { pet: true, asl: true };
    pub const PET: Branches = Branches { pet: true, asl: false };
    pub const ASL: Branches = Branches { pet: false, asl: true };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Node {
    Input,
    Encoder(usize),
    Bottleneck,
    SkipGate(usize),
    PetDecoder(usize),
    AslDecoder(usize),
    PetHead,
    AslHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    /// Along the contracting or expanding path.
    Path,
    /// Encoder features bypassing the bottleneck.
    Skip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub from: Node,
    pub to: Node,
    pub kind: EdgeKind,
}

/// Outputs of a forward pass; spatial dims always equal the input dims.
#[derive(Clone, Debug)]
pub struct ForwardResult<T> {
    pub pet_pred: Option<Tensor<T>>,
    pub asl_recon: Option<Tensor<T>>,
    /// Residual attention mask derived from `asl_recon` (+RA networks only).
    pub residual_mask: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct Encoder<T> {
    blocks: Vec<DenseBlock<T>>,
    pools: Vec<MaxPool2<T>>,
    bottleneck: DenseBlock<T>,
}

impl<T: Real> Encoder<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Vec<Tensor<T>>, Tensor<T>) {
        let keep = mode.keeps_cache();
        let mut skips = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for (block, pool) in self.blocks.iter_mut().zip(&mut self.pools) {
            let f = block.forward(&h, mode);
            h = pool.forward(&f, keep);
            skips.push(f);
        }
        let b = self.bottleneck.forward(&h, mode);
        (skips, b)
    }

    /// `skip_grads[l]` may be absent when no skip consumer ran.
    fn backward(&mut self, g_bottleneck: &Tensor<T>, skip_grads: Vec<Option<Tensor<T>>>, need_input_grad: bool) -> Option<Tensor<T>> {
        let levels = self.blocks.len();
        let mut g = self.bottleneck.backward(g_bottleneck, true).expect("bottleneck input grad");
        for l in (0..levels).rev() {
            let mut g_feat = self.pools[l].backward(&g);
            if let Some(gs) = &skip_grads[l] {
                g_feat.add_assign(gs);
            }
            let need = l > 0 || need_input_grad;
            match self.blocks[l].backward(&g_feat, need) {
                Some(gi) => g = gi,
                None => return None,
            }
        }
        Some(g)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.blocks.iter().flat_map(|b| b.params()).collect();
        v.extend(self.bottleneck.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        v.extend(self.bottleneck.params_mut());
        v
    }
}

/// Expanding path. `ups[l]` and `blocks[l]` produce resolution level `l`.
#[derive(Clone, Debug)]
struct Decoder<T> {
    ups: Vec<UpConv<T>>,
    blocks: Vec<DenseBlock<T>>,
    head: Head<T>,
    with_skips: bool,
    skip_widths: Vec<usize>,
}

impl<T: Real> Decoder<T> {
    fn forward(&mut self, bottleneck: &Tensor<T>, skips: Option<&[Tensor<T>]>, mode: Mode) -> Tensor<T> {
        assert_eq!(self.with_skips, skips.is_some(), "decoder skip wiring");
        let mut h = bottleneck.clone();
        for l in (0..self.blocks.len()).rev() {
            let u = self.ups[l].forward(&h, mode);
            let input = match skips {
                Some(s) => Tensor::concat_channels(&[&u, &s[l]]),
                None => u,
            };
            h = self.blocks[l].forward(&input, mode);
        }
        self.head.forward(&h, mode)
    }

    /// Returns the bottleneck gradient and, for skip-connected decoders, per-level skip gradients.
    fn backward(&mut self, grad_out: &Tensor<T>) -> (Tensor<T>, Vec<Option<Tensor<T>>>) {
        let levels = self.blocks.len();
        let mut skip_grads = vec![None; levels];
        let mut g = self.head.backward(grad_out);
        for l in 0..levels {
            let g_in = self.blocks[l].backward(&g, true).expect("decoder block input grad");
            let g_up = if self.with_skips {
                let up_width = g_in.channels() - self.skip_widths[l];
                let mut parts = g_in.split_channels(&[up_width, self.skip_widths[l]]);
                skip_grads[l] = parts.pop();
                parts.pop().expect("upsampled grad")
            } else {
                g_in
            };
            g = self.ups[l].backward(&g_up);
        }
        (g, skip_grads)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = Vec::new();
        for (u, b) in self.ups.iter().zip(&self.blocks).rev() {
            v.extend(u.params());
            v.extend(b.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = Vec::new();
        for (u, b) in self.ups.iter_mut().zip(self.blocks.iter_mut()).rev() {
            v.extend(u.params_mut());
            v.extend(b.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}

/// Shared encoder, skip-connected PET decoder and (multi-task only) skip-free ASL decoder.
#[derive(Clone, Debug)]
pub struct Network<T> {
    config: ModelConfig,
    encoder: Encoder<T>,
    pet_decoder: Decoder<T>,
    asl_decoder: Option<Decoder<T>>,
    skip_gates: Vec<ChannelGate<T>>,
    spatial_gate: Option<SpatialGate<T>>,
    /// Branches evaluated by the last cached forward pass.
    cached_branches: Option<Branches>,
}

impl<T: Real> Network<T> {
    /// Deterministic construction: identical `(config, seed)` gives identical initial weights.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = config.levels();
        let layout = &config.dense_layout;
        let mut blocks = Vec::new();
        let mut in_ch = config.input_channels();
        for l in 0..levels - 1 {
            blocks.push(DenseBlock::new(
                &format!("encoder.level{l}"),
                in_ch,
                layout[l],
                config.growth(l),
                config.width(l),
                &mut rng,
            ));
            in_ch = config.width(l);
        }
        let bottleneck = DenseBlock::new(
            "encoder.bottleneck",
            in_ch,
            layout[levels - 1],
            config.growth(levels - 1),
            config.width(levels - 1),
            &mut rng,
        );
        let encoder = Encoder {
            pools: (0..levels - 1).map(|_| MaxPool2::default()).collect(),
            blocks,
            bottleneck,
        };
        let pet_decoder = Self::decoder("pet_decoder", config, true, &mut rng);
        let asl_decoder = config
            .multitask
            .then(|| Self::decoder("asl_decoder", config, false, &mut rng));
        let skip_gates = if config.use_disentanglement_attention {
            (0..levels - 1)
                .map(|l| ChannelGate::new(&format!("gates.skip{l}"), config.width(l), &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let spatial_gate = config
            .use_residual_attention
            .then(|| SpatialGate::new("gates.residual"));
        Ok(Self {
            config: config.clone(),
            encoder,
            pet_decoder,
            asl_decoder,
            skip_gates,
            spatial_gate,
            cached_branches: None,
        })
    }

    fn decoder(name: &str, config: &ModelConfig, with_skips: bool, rng: &mut ChaCha8Rng) -> Decoder<T> {
        let levels = config.levels();
        let layout = &config.dense_layout;
        let n = layout.len();
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        // built bottom-up so that initialisation order follows the data flow
        let mut built = Vec::new();
        for l in (0..levels - 1).rev() {
            let up = UpConv::new(&format!("{name}.level{l}.up"), config.width(l + 1), config.width(l), rng);
            let in_ch = config.width(l) * if with_skips { 2 } else { 1 };
            let block = DenseBlock::new(
                &format!("{name}.level{l}.block"),
                in_ch,
                layout[n - 1 - l],
                config.growth(l),
                config.width(l),
                rng,
            );
            built.push((up, block));
        }
        for (up, block) in built.into_iter().rev() {
            ups.push(up);
            blocks.push(block);
        }
        let head = Head::new(&format!("{name}.head"), config.width(0), rng);
        Decoder {
            ups,
            blocks,
            head,
            with_skips,
            skip_widths: (0..levels - 1).map(|l| config.width(l)).collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Check slice tensors against the network's expectations; returns `(n, h, w)`.
    fn check_inputs(
        &self,
        asl: &Tensor<T>,
        t1: Option<&Tensor<T>>,
        mask: Option<&Tensor<T>>,
    ) -> Result<(usize, usize, usize), ModelError> {
        let [n, c, h, w] = asl.shape();
        if c != 1 || n == 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "asl batch must be B x 1 x H x W with B > 0, got {:?}",
                asl.shape()
            )));
        }
        let m = self.config.spatial_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "spatial dims {h}x{w} must be positive multiples of {m}"
            )));
        }
        if self.config.use_t1 {
            match t1 {
                Some(t) if t.shape() == asl.shape() => {}
                Some(t) => {
                    return Err(ModelError::ShapeMismatch(format!(
                        "t1 shape {:?} differs from asl {:?}",
                        t.shape(),
                        asl.shape()
                    )))
                }
                None => return Err(ModelError::ShapeMismatch("+T1 network needs a T1 batch".into())),
            }
        }
        if let Some(mk) = mask {
            if mk.shape() != asl.shape() {
                return Err(ModelError::ShapeMismatch(format!(
                    "mask shape {:?} differs from asl {:?}",
                    mk.shape(),
                    asl.shape()
                )));
            }
            if mk.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
                return Err(ModelError::InvalidMask);
            }
        }
        Ok((n, h, w))
    }

    /// Channel-stacked network input: `[a, a*M]` then `[t, t*M]` when the switches ask for them.
    ///
    /// Without residual attention the mask is ignored. With it, a missing mask means the
    /// uniform all-ones mask.
    pub fn assemble_input(
        &self,
        asl: &Tensor<T>,
        t1: Option<&Tensor<T>>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>, ModelError> {
        self.check_inputs(asl, t1, mask)?;
        let mut parts: Vec<Tensor<T>> = Vec::with_capacity(4);
        let masked = |x: &Tensor<T>| match mask {
            Some(m) => x.zip_map(m, |a, b| a * b),
            None => x.clone(),
        };
        parts.push(asl.clone());
        if self.config.use_residual_attention {
            parts.push(masked(asl));
        }
        if self.config.use_t1 {
            let t = t1.expect("checked above");
            parts.push(t.clone());
            if self.config.use_residual_attention {
                parts.push(masked(t));
            }
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(Tensor::concat_channels(&refs))
    }

    /// Run the network on an assembled input. Returns `(pet_pred, asl_recon)` for the
    /// requested branches; in [`Mode::Train`] the activations are cached for [`Network::backward`].
    pub fn forward_input(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
        branches: Branches,
    ) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>), ModelError> {
        if input.channels() != self.config.input_channels() {
            return Err(ModelError::ShapeMismatch(format!(
                "network expects {} input channels, got {}",
                self.config.input_channels(),
                input.channels()
            )));
        }
        if branches.asl && self.asl_decoder.is_none() {
            return Err(ModelError::Config("single-task network has no ASL decoder".into()));
        }
        let keep = mode.keeps_cache();
        let (skips, bottleneck) = self.encoder.forward(input, mode);
        let pet = if branches.pet {
            let gated: Vec<Tensor<T>> = if self.skip_gates.is_empty() {
                skips
            } else {
                skips
                    .iter()
                    .zip(&mut self.skip_gates)
                    .map(|(s, g)| g.forward(s, keep))
                    .collect()
            };
            Some(self.pet_decoder.forward(&bottleneck, Some(&gated), mode))
        } else {
            None
        };
        let asl = match (&mut self.asl_decoder, branches.asl) {
            (Some(d), true) => Some(d.forward(&bottleneck, None, mode)),
            _ => None,
        };
        self.cached_branches = keep.then_some(branches);
        Ok((pet, asl))
    }

    /// Back-propagate output gradients through the branches of the last training forward.
    ///
    /// Parameter gradients accumulate; returns the gradient with respect to the assembled
    /// input when `need_input_grad`.
    pub fn backward(
        &mut self,
        grad_pet: Option<&Tensor<T>>,
        grad_asl: Option<&Tensor<T>>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let branches = self
            .cached_branches
            .take()
            .expect("backward without a cached training forward");
        assert_eq!(branches.pet, grad_pet.is_some(), "PET gradient must match forward branches");
        assert_eq!(branches.asl, grad_asl.is_some(), "ASL gradient must match forward branches");
        let levels = self.config.levels() - 1;
        let mut g_bottleneck: Option<Tensor<T>> = None;
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; levels];
        if let Some(g) = grad_pet {
            let (gb, gs) = self.pet_decoder.backward(g);
            g_bottleneck = Some(gb);
            skip_grads = if self.skip_gates.is_empty() {
                gs
            } else {
                gs.into_iter()
                    .zip(&mut self.skip_gates)
                    .map(|(g, gate)| g.map(|g| gate.backward(&g)))
                    .collect()
            };
        }
        if let Some(g) = grad_asl {
            let (gb, _) = self.asl_decoder.as_mut().expect("asl decoder").backward(g);
            match g_bottleneck.as_mut() {
                Some(acc) => acc.add_assign(&gb),
                None => g_bottleneck = Some(gb),
            }
        }
        let gb = g_bottleneck.expect("at least one branch");
        self.encoder.backward(&gb, skip_grads, need_input_grad)
    }

    /// Residual attention mask for a batch; gradient-free.
    pub fn residual_mask(&mut self, asl_in: &Tensor<T>, asl_recon: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        if asl_in.shape() != asl_recon.shape() {
            return Err(ModelError::ShapeMismatch(format!(
                "residual inputs {:?} vs {:?}",
                asl_in.shape(),
                asl_recon.shape()
            )));
        }
        let gate = self
            .spatial_gate
            .as_mut()
            .ok_or_else(|| ModelError::Config("network has no residual attention gate".into()))?;
        Ok(gate.forward(asl_in, asl_recon, false))
    }

    /// Full forward pass: encoder, every decoder the configuration has, and the residual mask
    /// when residual attention is enabled. `mask = None` means the uniform mask.
    pub fn forward(
        &mut self,
        asl: &Tensor<T>,
        t1: Option<&Tensor<T>>,
        mask: Option<&Tensor<T>>,
        mode: Mode,
    ) -> Result<ForwardResult<T>, ModelError> {
        let input = self.assemble_input(asl, t1, mask)?;
        let branches = if self.config.multitask { Branches::BOTH } else { Branches::PET };
        let (pet_pred, asl_recon) = self.forward_input(&input, mode, branches)?;
        let residual_mask = match (&asl_recon, self.config.use_residual_attention) {
            (Some(recon), true) => Some(self.residual_mask(asl, recon)?),
            _ => None,
        };
        Ok(ForwardResult {
            pet_pred,
            asl_recon,
            residual_mask,
        })
    }

    /// PET prediction for inference. With residual attention a first uniform-mask pass yields
    /// the residual mask, which then drives a second, refined pass.
    pub fn predict(&mut self, asl: &Tensor<T>, t1: Option<&Tensor<T>>) -> Result<Tensor<T>, ModelError> {
        let first = self.forward(asl, t1, None, Mode::Eval)?;
        let result = match first.residual_mask {
            Some(mask) => self.forward(asl, t1, Some(&mask), Mode::Eval)?,
            None => first,
        };
        Ok(result.pet_pred.expect("every network has a PET decoder"))
    }

    pub fn skip_gate(&mut self, level: usize) -> Option<&mut ChannelGate<T>> {
        self.skip_gates.get_mut(level)
    }

    pub fn spatial_gate(&mut self) -> Option<&mut SpatialGate<T>> {
        self.spatial_gate.as_mut()
    }

    /// All named arrays with their group, trainable or not, in a fixed order.
    pub fn named_params(&self) -> Vec<(ParamGroup, &Param<T>)> {
        let mut v: Vec<(ParamGroup, &Param<T>)> = Vec::new();
        v.extend(self.encoder.params().into_iter().map(|p| (ParamGroup::Encoder, p)));
        v.extend(self.pet_decoder.params().into_iter().map(|p| (ParamGroup::PetDecoder, p)));
        if let Some(d) = &self.asl_decoder {
            v.extend(d.params().into_iter().map(|p| (ParamGroup::AslDecoder, p)));
        }
        for g in &self.skip_gates {
            v.extend(g.params().into_iter().map(|p| (ParamGroup::Gates, p)));
        }
        if let Some(g) = &self.spatial_gate {
            v.extend(g.params().into_iter().map(|p| (ParamGroup::Gates, p)));
        }
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(ParamGroup, &mut Param<T>)> {
        let mut v: Vec<(ParamGroup, &mut Param<T>)> = Vec::new();
        v.extend(self.encoder.params_mut().into_iter().map(|p| (ParamGroup::Encoder, p)));
        v.extend(self.pet_decoder.params_mut().into_iter().map(|p| (ParamGroup::PetDecoder, p)));
        if let Some(d) = &mut self.asl_decoder {
            v.extend(d.params_mut().into_iter().map(|p| (ParamGroup::AslDecoder, p)));
        }
        for g in &mut self.skip_gates {
            v.extend(g.params_mut().into_iter().map(|p| (ParamGroup::Gates, p)));
        }
        if let Some(g) = &mut self.spatial_gate {
            v.extend(g.params_mut().into_iter().map(|p| (ParamGroup::Gates, p)));
        }
        v
    }

    /// Trainable parameter count of one group, or of all groups with `None`.
    pub fn count_parameters(&self, group: Option<ParamGroup>) -> usize {
        self.named_params()
            .into_iter()
            .filter(|(g, p)| p.trainable && group.is_none_or(|want| *g == want))
            .map(|(_, p)| p.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            if p.trainable {
                p.zero_grad();
            }
        }
    }

    /// Level-wise data-flow graph of the network.
    pub fn topology(&self) -> Vec<Edge> {
        let levels = self.config.levels() - 1;
        let mut edges = Vec::new();
        let path = |from, to| Edge { from, to, kind: EdgeKind::Path };
        edges.push(path(Node::Input, Node::Encoder(0)));
        for l in 1..levels {
            edges.push(path(Node::Encoder(l - 1), Node::Encoder(l)));
        }
        edges.push(path(Node::Encoder(levels - 1), Node::Bottleneck));
        let mut decoder = |mk: fn(usize) -> Node, head: Node, skips: bool| {
            edges.push(path(Node::Bottleneck, mk(levels - 1)));
            for l in (0..levels - 1).rev() {
                edges.push(path(mk(l + 1), mk(l)));
            }
            edges.push(path(mk(0), head));
            if skips {
                for l in 0..levels {
                    if self.skip_gates.is_empty() {
                        edges.push(Edge { from: Node::Encoder(l), to: mk(l), kind: EdgeKind::Skip });
                    } else {
                        edges.push(Edge { from: Node::Encoder(l), to: Node::SkipGate(l), kind: EdgeKind::Skip });
                        edges.push(Edge { from: Node::SkipGate(l), to: mk(l), kind: EdgeKind::Skip });
                    }
                }
            }
        };
        decoder(Node::PetDecoder, Node::PetHead, true);
        if self.asl_decoder.is_some() {
            decoder(Node::AslDecoder, Node::AslHead, self.asl_decoder.as_ref().is_some_and(|d| d.with_skips));
        }
        edges
    }
}
