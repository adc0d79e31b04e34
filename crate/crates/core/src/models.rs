//! The toy dual-encoder backbone, LoRA-adapted linear layers, and the
//! image-conditioned text-adjustment head.
//!
//! The backbone is a pair of 2-layer MLPs (image side and text side) trained
//! contrastively on a synthetic pretraining pool, then frozen. Adaptation
//! touches only the low-rank factors attached to each linear layer and the
//! AlignNet head; frozen weights are owned by the model structs themselves
//! and are never registered as trainable leaves, so they cannot receive
//! updates.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamSet, TapeBinding};
use crate::rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::{matmul_raw, Tensor};

/// Nonlinearity between encoder layers. Only relu is implemented; the choice
/// is recorded in configuration so it can be swapped later.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub d_in: usize,
    pub hidden: usize,
    pub d_embed: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        // Desk-scale defaults; full-scale 512-dim embeddings stay available
        // through configuration.
        EncoderDims {
            d_in: 32,
            hidden: 64,
            d_embed: 16,
        }
    }
}

/// Trainable low-rank attachment for a frozen linear layer. The factors live
/// in a [`ParamSet`] under `<prefix>.a` / `<prefix>.b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub a_name: String,
    pub b_name: String,
    pub rank: usize,
    pub gamma: f64,
    pub merged: bool,
}

/// A linear layer with a frozen weight (M×N) and optional frozen bias,
/// optionally carrying a LoRA adapter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraLinear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub adapter: Option<LoraAdapter>,
}

impl LoraLinear {
    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Create the low-rank factors: A ~ N(0, 0.02²), B = 0, so the adapted
    /// layer starts exactly equal to the frozen layer.
    pub fn attach_lora(
        &mut self,
        prefix: &str,
        rank: usize,
        gamma: f64,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let (m, n) = (self.out_dim(), self.in_dim());
        if rank == 0 || rank > m.min(n) / 2 {
            return Err(Error::Config(format!(
                "lora.rank must satisfy 1 <= r <= min({m}, {n})/2, got {rank}"
            )));
        }
        if self.adapter.is_some() {
            return Err(Error::Lifecycle(format!(
                "layer {prefix} already has a LoRA adapter"
            )));
        }
        let a_name = format!("{prefix}.a");
        let b_name = format!("{prefix}.b");
        let a: Vec<f64> = rng::gaussian_vec(rng, rank * n)
            .into_iter()
            .map(|x| 0.02 * x)
            .collect();
        params.insert(&a_name, Tensor::new(vec![rank, n], a)?)?;
        params.insert(&b_name, Tensor::zeros(vec![m, rank]))?;
        self.adapter = Some(LoraAdapter {
            a_name,
            b_name,
            rank,
            gamma,
            merged: false,
        });
        Ok(())
    }

    /// Frozen path: Wx (+ bias), no adapter contribution.
    pub fn forward_frozen(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let w = tape.constant(&self.weight)?;
        let wt = tape.transpose(w)?;
        let mut h = tape.matmul(x, wt)?;
        if let Some(bias) = &self.bias {
            let b = tape.constant(bias)?;
            h = tape.add_row(h, b)?;
        }
        Ok(h)
    }

    /// Adapted path: Wx + γ·B(Ax) (+ bias). Gradients flow only into the
    /// low-rank factors; the frozen weight enters the tape as a constant.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: Option<&TapeBinding>,
        x: NodeId,
    ) -> Result<NodeId> {
        let base = self.forward_frozen(tape, x)?;
        let adapter = match &self.adapter {
            Some(a) if !a.merged => a,
            _ => return Ok(base),
        };
        let binding = binding.ok_or_else(|| {
            Error::Contract("adapted forward requires a parameter binding".into())
        })?;
        let a = binding.node(&adapter.a_name)?;
        let b = binding.node(&adapter.b_name)?;
        let at = tape.transpose(a)?;
        let u = tape.matmul(x, at)?;
        let bt = tape.transpose(b)?;
        let v = tape.matmul(u, bt)?;
        let scaled = tape.scale(v, adapter.gamma)?;
        tape.add(base, scaled)
    }

    /// W + γ·B·A as a dense matrix, without mutating the layer.
    pub fn merged_weight(&self, params: &ParamSet) -> Result<Tensor> {
        let (m, n) = (self.out_dim(), self.in_dim());
        let mut w = self.weight.data().to_vec();
        if let Some(adapter) = &self.adapter {
            if adapter.merged {
                return Ok(self.weight.clone());
            }
            let a = params.get(&adapter.a_name)?;
            let b = params.get(&adapter.b_name)?;
            let ba = matmul_raw(b.data(), a.data(), m, adapter.rank, n);
            for (wi, di) in w.iter_mut().zip(&ba) {
                *wi += adapter.gamma * di;
            }
        }
        Tensor::new(vec![m, n], w)
    }

    /// Bake the residual into the frozen weight. Merging twice is rejected.
    pub fn merge(&mut self, params: &ParamSet) -> Result<()> {
        match &self.adapter {
            None => Err(Error::Lifecycle("merge: layer has no LoRA adapter".into())),
            Some(a) if a.merged => Err(Error::Lifecycle(
                "merge: adapter already merged into the frozen weight".into(),
            )),
            Some(_) => {
                self.weight = self.merged_weight(params)?;
                self.adapter.as_mut().unwrap().merged = true;
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Encoder {
    pub layers: Vec<LoraLinear>,
    pub activation: Activation,
}

impl Encoder {
    fn forward_impl(
        &self,
        tape: &mut Tape,
        binding: Option<&TapeBinding>,
        x: NodeId,
        frozen: bool,
    ) -> Result<NodeId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = if frozen {
                layer.forward_frozen(tape, h)?
            } else {
                layer.forward(tape, binding, h)?
            };
            if i < last {
                h = match self.activation {
                    Activation::Relu => tape.relu(h)?,
                };
            }
        }
        Ok(h)
    }

    /// Adapted forward followed by row normalization.
    pub fn encode(
        &self,
        tape: &mut Tape,
        binding: Option<&TapeBinding>,
        x: NodeId,
    ) -> Result<NodeId> {
        let h = self.forward_impl(tape, binding, x, false)?;
        tape.l2_normalize(h)
    }

    /// Frozen-backbone forward followed by row normalization.
    pub fn encode_frozen(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let h = self.forward_impl(tape, None, x, true)?;
        tape.l2_normalize(h)
    }

    pub fn frozen_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.as_ref().map_or(0, Tensor::numel))
            .sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualEncoder {
    pub image: Encoder,
    pub text: Encoder,
    pub temperature: f64,
    pub dims: EncoderDims,
}

impl DualEncoder {
    /// Randomly initialized frozen backbone (no pretraining); mainly for
    /// chance-level baselines and tests.
    pub fn random_frozen(dims: EncoderDims, temperature: f64, seed: u64) -> Self {
        let build = |tag: &str| {
            let mut rng = rng::stream(seed, tag);
            let mut layer = |m: usize, n: usize| LoraLinear {
                weight: Tensor::new(
                    vec![m, n],
                    rng::gaussian_vec(&mut rng, m * n)
                        .into_iter()
                        .map(|x| x / (n as f64).sqrt())
                        .collect(),
                )
                .unwrap(),
                bias: Some(Tensor::zeros(vec![m])),
                adapter: None,
            };
            let l0 = layer(dims.hidden, dims.d_in);
            let l1 = layer(dims.d_embed, dims.hidden);
            Encoder {
                layers: vec![l0, l1],
                activation: Activation::Relu,
            }
        };
        DualEncoder {
            image: build("backbone-img"),
            text: build("backbone-txt"),
            temperature,
            dims,
        }
    }

    pub fn encode_image(
        &self,
        tape: &mut Tape,
        binding: Option<&TapeBinding>,
        x: NodeId,
    ) -> Result<NodeId> {
        self.image.encode(tape, binding, x)
    }

    pub fn encode_text(
        &self,
        tape: &mut Tape,
        binding: Option<&TapeBinding>,
        t: NodeId,
    ) -> Result<NodeId> {
        self.text.encode(tape, binding, t)
    }

    pub fn frozen_param_count(&self) -> usize {
        self.image.frozen_param_count() + self.text.frozen_param_count()
    }

    /// Zero-shot logits of the frozen backbone: temperature-scaled cosine
    /// similarities, shape (b×c).
    pub fn frozen_logits(&self, images: &Tensor, class_texts: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images)?;
        let t = tape.constant(class_texts)?;
        let fi = self.image.encode_frozen(&mut tape, x)?;
        let ft = self.text.encode_frozen(&mut tape, t)?;
        let ftt = tape.transpose(ft)?;
        let sims = tape.matmul(fi, ftt)?;
        let logits = tape.scale(sims, self.temperature)?;
        tape.value_tensor(logits)
    }

    /// Argmax zero-shot predictions of the frozen backbone.
    pub fn predict_frozen(&self, images: &Tensor, class_texts: &Tensor) -> Result<Vec<usize>> {
        let logits = self.frozen_logits(images, class_texts)?;
        Ok(argmax_rows(&logits))
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.last();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// AlignNet
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignNetSettings {
    pub hidden1: usize,
    pub hidden2: usize,
    /// Re-normalize the adjusted text embedding after the residual addition
    /// so cosine-similarity logits stay on the unit sphere.
    pub renormalize: bool,
}

impl Default for AlignNetSettings {
    fn default() -> Self {
        // Proportional desk-scale analogue of a 1024→256→128→512 head.
        AlignNetSettings {
            hidden1: 8,
            hidden2: 4,
            renormalize: true,
        }
    }
}

/// MLP mapping a concatenated (image, text) pair of width 2d through two
/// hidden layers back to a d-dimensional additive bias π. Weights are stored
/// (in×out) in the ParamSet; the final layer is zero-initialized so π = 0 at
/// the start and the adjusted text equals the static text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignNet {
    pub layer_names: Vec<(String, String)>,
    pub dims: Vec<usize>,
    pub renormalize: bool,
}

impl AlignNet {
    pub fn build(
        prefix: &str,
        d_embed: usize,
        settings: &AlignNetSettings,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<AlignNet> {
        if settings.hidden1 == 0 || settings.hidden2 == 0 {
            return Err(Error::Config(
                "alignnet hidden dimensions must be positive".into(),
            ));
        }
        let dims = vec![2 * d_embed, settings.hidden1, settings.hidden2, d_embed];
        let mut layer_names = Vec::new();
        for i in 0..3 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let w_name = format!("{prefix}.{i}.w");
            let b_name = format!("{prefix}.{i}.b");
            let w = if i == 2 {
                Tensor::zeros(vec![fan_in, fan_out])
            } else {
                Tensor::new(
                    vec![fan_in, fan_out],
                    rng::gaussian_vec(rng, fan_in * fan_out)
                        .into_iter()
                        .map(|x| x / (fan_in as f64).sqrt())
                        .collect(),
                )?
            };
            params.insert(&w_name, w)?;
            params.insert(&b_name, Tensor::zeros(vec![fan_out]))?;
            layer_names.push((w_name, b_name));
        }
        Ok(AlignNet {
            layer_names,
            dims,
            renormalize: settings.renormalize,
        })
    }

    pub fn param_count(&self) -> usize {
        (0..3)
            .map(|i| self.dims[i] * self.dims[i + 1] + self.dims[i + 1])
            .sum()
    }

    /// Image-conditioned text adjustment. For every (image i, class k) pair,
    /// π = MLP([f_img[i]; f_txt[k]]) and the adjusted embedding is
    /// f_txt[k] + π, optionally re-normalized. Returns a (b×c×d) node whose
    /// rows are pair-major: row i·c + k is image i with class k.
    pub fn adjust(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        f_img: NodeId,
        f_txt: NodeId,
    ) -> Result<NodeId> {
        let (si, st) = (tape.shape(f_img)?.to_vec(), tape.shape(f_txt)?.to_vec());
        let d = self.dims[3];
        if si.len() != 2 || st.len() != 2 || si[1] != d || st[1] != d {
            return Err(Error::shape("alignnet_adjust", &si, &st));
        }
        let (b, c) = (si[0], st[0]);
        let rep_img = tape.repeat_rows(f_img, c)?;
        let rep_txt = tape.tile_rows(f_txt, b)?;
        let joint = tape.concat(rep_img, rep_txt)?;

        let mut h = joint;
        for (i, (w_name, b_name)) in self.layer_names.iter().enumerate() {
            let w = binding.node(w_name)?;
            let bias = binding.node(b_name)?;
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, bias)?;
            if i < 2 {
                h = tape.relu(h)?;
            }
        }

        let mut adjusted = tape.add(rep_txt, h)?;
        if self.renormalize {
            adjusted = tape.l2_normalize(adjusted)?;
        }
        tape.reshape(adjusted, vec![b, c, d])
    }
}

// ---------------------------------------------------------------------------
// Adapted model = frozen backbone + LoRA factors + optional AlignNet
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraSettings {
    pub rank: usize,
    /// Residual scale γ; the usual LoRA convention γ = α_lora / r with
    /// α_lora = 16 and r = 8 gives 2.
    pub gamma: f64,
}

impl Default for LoraSettings {
    fn default() -> Self {
        LoraSettings {
            rank: 8,
            gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptedModel {
    pub encoder: DualEncoder,
    pub alignnet: Option<AlignNet>,
}

impl AdaptedModel {
    /// Attach LoRA factors to every linear layer of both encoders and build
    /// the AlignNet head when requested. All created tensors are registered
    /// in `params`, which becomes the full trainable set.
    pub fn build(
        mut backbone: DualEncoder,
        lora: &LoraSettings,
        alignnet: Option<&AlignNetSettings>,
        params: &mut ParamSet,
        seed: u64,
    ) -> Result<AdaptedModel> {
        let mut lora_rng = rng::stream(seed, "lora-init");
        for (tag, encoder) in [("img", &mut backbone.image), ("txt", &mut backbone.text)] {
            for (i, layer) in encoder.layers.iter_mut().enumerate() {
                layer.attach_lora(
                    &format!("{tag}.{i}"),
                    lora.rank,
                    lora.gamma,
                    params,
                    &mut lora_rng,
                )?;
            }
        }
        let alignnet = match alignnet {
            Some(settings) => {
                let mut align_rng = rng::stream(seed, "alignnet-init");
                Some(AlignNet::build(
                    "align",
                    backbone.dims.d_embed,
                    settings,
                    params,
                    &mut align_rng,
                )?)
            }
            None => None,
        };
        Ok(AdaptedModel {
            encoder: backbone,
            alignnet,
        })
    }

    /// Tuned logits for a batch against per-class text descriptors. With
    /// AlignNet enabled the text embeddings are image-conditioned, so
    /// logits[i][k] pairs image i with its own adjusted class-k embedding.
    pub fn logits(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        images: &Tensor,
        class_texts: &Tensor,
        use_alignnet: bool,
    ) -> Result<NodeId> {
        let x = tape.constant(images)?;
        let t = tape.constant(class_texts)?;
        let f_img = self.encoder.encode_image(tape, Some(binding), x)?;
        let f_txt = self.encoder.encode_text(tape, Some(binding), t)?;
        let f_txt = match (&self.alignnet, use_alignnet) {
            (Some(net), true) => net.adjust(tape, binding, f_img, f_txt)?,
            _ => f_txt,
        };
        crate::objective::similarity_logits(tape, f_img, f_txt, self.encoder.temperature)
    }

    /// Argmax predictions under the current trainable parameters.
    pub fn predict(
        &self,
        params: &ParamSet,
        images: &Tensor,
        class_texts: &Tensor,
        use_alignnet: bool,
    ) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, params)?;
        let logits = self.logits(&mut tape, &binding, images, class_texts, use_alignnet)?;
        Ok(argmax_rows(&tape.value_tensor(logits)?))
    }

    /// Trainable scalar count divided by total (frozen + trainable).
    pub fn trainable_fraction(&self, params: &ParamSet) -> f64 {
        let trainable = params.flat_len() as f64;
        let total = trainable + self.encoder.frozen_param_count() as f64;
        trainable / total
    }
}

// ---------------------------------------------------------------------------
// Contrastive pretraining of the backbone
// ---------------------------------------------------------------------------

/// Pretraining corpus: images labeled into `class_texts` rows, plus a
/// held-out class pool used for the zero-shot sanity check.
pub struct PretrainData<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [usize],
    pub class_texts: &'a Tensor,
    pub holdout_images: &'a Tensor,
    pub holdout_labels: &'a [usize],
    pub holdout_class_texts: &'a Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    /// Distinct classes per contrastive batch.
    pub batch_classes: usize,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        // The contrastive loss plateaus long before this, but the zero-shot
        // alignment on held-out classes keeps improving; 400 epochs is still
        // well under a second at desk scale.
        PretrainSettings {
            epochs: 400,
            base_lr: 0.1,
            momentum: 0.9,
            batch_classes: 16,
        }
    }
}

/// Train the dual encoder with a symmetric in-batch contrastive loss, then
/// freeze it. Fails if the frozen backbone's zero-shot accuracy on the
/// held-out pool classes does not exceed chance by at least 2×.
pub fn pretrain_backbone(
    dims: EncoderDims,
    temperature: f64,
    data: &PretrainData,
    cfg: &PretrainSettings,
    seed: u64,
) -> Result<DualEncoder> {
    if cfg.batch_classes < 2 {
        return Err(Error::Config(
            "pretrain.batch_classes must be at least 2".into(),
        ));
    }
    let n_classes = data.class_texts.shape()[0];
    if cfg.batch_classes > n_classes {
        return Err(Error::Config(format!(
            "pretrain.batch_classes {} exceeds pool classes {}",
            cfg.batch_classes, n_classes
        )));
    }

    // Trainable backbone weights live in a dedicated ParamSet until frozen.
    let mut params = ParamSet::new();
    let mut init_rng = rng::stream(seed, "pretrain-init");
    for tag in ["img", "txt"] {
        let shapes = [(dims.hidden, dims.d_in), (dims.d_embed, dims.hidden)];
        for (i, &(m, n)) in shapes.iter().enumerate() {
            let w: Vec<f64> = rng::gaussian_vec(&mut init_rng, m * n)
                .into_iter()
                .map(|x| x / (n as f64).sqrt())
                .collect();
            params.insert(format!("{tag}.{i}.w"), Tensor::new(vec![m, n], w)?)?;
            params.insert(format!("{tag}.{i}.b"), Tensor::zeros(vec![m]))?;
        }
    }

    // Index samples by class for batch assembly.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in data.labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::Data(format!(
                "pretrain label {l} out of range for {n_classes} classes"
            )));
        }
        by_class[l].push(i);
    }
    if by_class.iter().any(Vec::is_empty) {
        return Err(Error::Data("pretraining pool has empty classes".into()));
    }

    let steps_per_epoch = n_classes / cfg.batch_classes;
    let total_steps = cfg.epochs * steps_per_epoch;
    let rule = crate::optim::UpdateRule {
        kind: crate::optim::UpdateKind::SgdMomentum,
        base_lr: cfg.base_lr,
        momentum: cfg.momentum,
        total_steps,
    };
    rule.validate()?;
    let mut updater = crate::optim::Updater::new(rule);
    let mut batch_rng = rng::stream(seed, "pretrain-batches");
    let d_in = dims.d_in;

    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_classes).collect();
        shuffle(&mut order, &mut batch_rng);
        for chunk in order.chunks(cfg.batch_classes) {
            if chunk.len() < cfg.batch_classes {
                break;
            }
            let k = chunk.len();
            let mut xs = Vec::with_capacity(k * d_in);
            let mut ts = Vec::with_capacity(k * d_in);
            for &class in chunk {
                let pick = by_class[class][uniform_index(&mut batch_rng, by_class[class].len())];
                xs.extend_from_slice(&data.images.data()[pick * d_in..(pick + 1) * d_in]);
                ts.extend_from_slice(&data.class_texts.data()[class * d_in..(class + 1) * d_in]);
            }
            let images = Tensor::new(vec![k, d_in], xs)?;
            let texts = Tensor::new(vec![k, d_in], ts)?;

            let mut tape = Tape::new();
            let binding = TapeBinding::bind(&mut tape, &params)?;
            let loss_node = contrastive_loss(&mut tape, &binding, &images, &texts, temperature)?;
            tape.backward(loss_node)?;
            let grad = binding.read_grads(&tape, &params)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    context: "pretraining gradient".into(),
                });
            }
            updater.apply(&mut params, &grad, step)?;
            step += 1;
        }
    }

    // Freeze: move the trained weights out of the ParamSet into the model.
    let build_encoder = |tag: &str| -> Result<Encoder> {
        let mut layers = Vec::new();
        for i in 0..2 {
            layers.push(LoraLinear {
                weight: params.get(&format!("{tag}.{i}.w"))?.clone(),
                bias: Some(params.get(&format!("{tag}.{i}.b"))?.clone()),
                adapter: None,
            });
        }
        Ok(Encoder {
            layers,
            activation: Activation::Relu,
        })
    };
    let model = DualEncoder {
        image: build_encoder("img")?,
        text: build_encoder("txt")?,
        temperature,
        dims,
    };

    // Zero-shot sanity check on held-out classes.
    let holdout_classes = data.holdout_class_texts.shape()[0];
    let preds = model.predict_frozen(data.holdout_images, data.holdout_class_texts)?;
    let correct = preds
        .iter()
        .zip(data.holdout_labels)
        .filter(|(p, l)| p == l)
        .count();
    let acc = correct as f64 / preds.len() as f64;
    let chance = 1.0 / holdout_classes as f64;
    if acc < 2.0 * chance {
        return Err(Error::Postcondition(format!(
            "pretrained backbone zero-shot accuracy {acc:.3} on held-out classes is below 2x chance ({:.3})",
            2.0 * chance
        )));
    }
    Ok(model)
}

/// Symmetric in-batch contrastive loss over k (image, text) pairs with the
/// diagonal as the positive match.
fn contrastive_loss(
    tape: &mut Tape,
    binding: &TapeBinding,
    images: &Tensor,
    texts: &Tensor,
    temperature: f64,
) -> Result<NodeId> {
    let k = images.shape()[0];
    let x = tape.constant(images)?;
    let t = tape.constant(texts)?;

    // During pretraining the backbone weights are the trainable leaves.
    let fwd = |tape: &mut Tape, tag: &str, input: NodeId| -> Result<NodeId> {
        let mut h = input;
        for i in 0..2 {
            let w = binding.node(&format!("{tag}.{i}.w"))?;
            let b = binding.node(&format!("{tag}.{i}.b"))?;
            let wt = tape.transpose(w)?;
            h = tape.matmul(h, wt)?;
            h = tape.add_row(h, b)?;
            if i == 0 {
                h = tape.relu(h)?;
            }
        }
        tape.l2_normalize(h)
    };

    let fi = fwd(tape, "img", x)?;
    let ft = fwd(tape, "txt", t)?;
    let ftt = tape.transpose(ft)?;
    let sims = tape.matmul(fi, ftt)?;
    let logits = tape.scale(sims, temperature)?;
    let labels: Vec<usize> = (0..k).collect();

    let lsm_rows = tape.log_softmax(logits)?;
    let picked = tape.pick_per_row(lsm_rows, &labels)?;
    let s1 = tape.sum(picked)?;

    let logits_t = tape.transpose(logits)?;
    let lsm_cols = tape.log_softmax(logits_t)?;
    let picked_t = tape.pick_per_row(lsm_cols, &labels)?;
    let s2 = tape.sum(picked_t)?;

    let total = tape.add(s1, s2)?;
    tape.scale(total, -0.5 / k as f64)
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

fn uniform_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    use rand::Rng;
    rng.gen_range(0..n)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Self-describing flat-JSON checkpoint: a manifest plus named tensors.
/// JSON doubles round-trip bit-exactly, so save/load is lossless.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub dims: EncoderDims,
    pub temperature: f64,
    pub lora: Option<LoraSettings>,
    pub alignnet: Option<AlignNetSettings>,
    /// Frozen backbone tensors by name (weights and biases).
    pub frozen: BTreeMap<String, Tensor>,
    /// Trainable tensors in ParamSet order (order is part of the contract).
    pub trainable: Vec<(String, Tensor)>,
}

pub fn save_backbone(path: &Path, model: &DualEncoder, seed: u64) -> Result<()> {
    let mut frozen = BTreeMap::new();
    for (tag, enc) in [("img", &model.image), ("txt", &model.text)] {
        for (i, layer) in enc.layers.iter().enumerate() {
            frozen.insert(format!("{tag}.{i}.w"), layer.weight.clone());
            if let Some(b) = &layer.bias {
                frozen.insert(format!("{tag}.{i}.b"), b.clone());
            }
        }
    }
    let ck = Checkpoint {
        format_version: 1,
        seed,
        dims: model.dims,
        temperature: model.temperature,
        lora: None,
        alignnet: None,
        frozen,
        trainable: Vec::new(),
    };
    std::fs::write(path, serde_json::to_vec_pretty(&ck)?)?;
    Ok(())
}

pub fn load_backbone(path: &Path) -> Result<(DualEncoder, u64)> {
    let bytes = std::fs::read(path)?;
    let ck: Checkpoint = serde_json::from_slice(&bytes)?;
    let build = |tag: &str| -> Result<Encoder> {
        let mut layers = Vec::new();
        for i in 0..2 {
            let w = ck
                .frozen
                .get(&format!("{tag}.{i}.w"))
                .ok_or_else(|| Error::Data(format!("checkpoint missing {tag}.{i}.w")))?;
            let b = ck.frozen.get(&format!("{tag}.{i}.b"));
            layers.push(LoraLinear {
                weight: w.clone(),
                bias: b.cloned(),
                adapter: None,
            });
        }
        Ok(Encoder {
            layers,
            activation: Activation::Relu,
        })
    };
    Ok((
        DualEncoder {
            image: build("img")?,
            text: build("txt")?,
            temperature: ck.temperature,
            dims: ck.dims,
        },
        ck.seed,
    ))
}
