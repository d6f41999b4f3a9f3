//! Encoders, feature gates, the fused binary classifier and the forward /
//! backward pass that feeds both training losses and the detector.
//!
//! All batched tensors are row-major `samples x features`. Dense weights are
//! stored `out x in`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, BCE_EPS};
use crate::par;
use crate::scenarios::{PairedSample, Payload};
use crate::similarity::{self, cosine_similarity, CosineCache, SimilarityMatrix, Vector};

/// RNG stream used for parameter initialization.
const INIT_STREAM: u64 = 2;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer `y = x Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    /// Uniform fan-in initialization: `U(-1/√in, 1/√in)` for weights and bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-bound..bound));
        let bias = Array1::from_shape_fn(outputs, |_| rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Array2::zeros((outputs, inputs)), bias: Array1::zeros(outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = par::matmul(x, self.weight.t());
        y += &self.bias;
        y
    }

    pub fn forward_one(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Returns parameter gradients and `dL/dx`.
    pub fn backward(&self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>) -> (Dense, Array2<f64>) {
        let weight = par::matmul(dy.t(), x);
        let bias = dy.sum_axis(Axis(0));
        let dx = par::matmul(dy, self.weight.view());
        (Dense { weight, bias }, dx)
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Single linear projection.
    Linear,
    /// Linear, tanh, linear.
    TwoLayer,
}

/// Architecture of a model; everything needed to rebuild it before loading weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub image_input_dim: usize,
    pub text_input_dim: usize,
    pub embedding_dim: usize,
    pub encoder: EncoderKind,
    pub encoder_hidden: usize,
    pub trainable_encoders: bool,
    pub head_hidden: Vec<usize>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.image_input_dim, self.text_input_dim, self.embedding_dim];
        if dims.contains(&0) || (self.encoder == EncoderKind::TwoLayer && self.encoder_hidden == 0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.head_hidden.contains(&0) {
            return Err(Error::invalid("classifier hidden sizes must be positive"));
        }
        Ok(())
    }
}

/// Toy encoder for synthetic feature payloads. The linear kind is a pure
/// projection: its bias stays at zero and receives no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub kind: EncoderKind,
    pub layers: Vec<Dense>,
}

struct EncoderCache {
    inputs: Vec<Array2<f64>>,
}

impl ToyEncoder {
    fn new(kind: EncoderKind, input: usize, hidden: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let layers = match kind {
            EncoderKind::Linear => {
                let mut proj = Dense::init(input, dim, rng);
                proj.bias.fill(0.0);
                vec![proj]
            }
            EncoderKind::TwoLayer => vec![Dense::init(input, hidden, rng), Dense::init(hidden, dim, rng)],
        };
        Self { kind, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn encode(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    fn forward_cached(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, EncoderCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(h.view());
            inputs.push(h);
            h = if i + 1 < self.layers.len() { z.mapv(f64::tanh) } else { z };
        }
        (h, EncoderCache { inputs })
    }

    fn backward(&self, cache: &EncoderCache, d_out: Array2<f64>) -> Vec<Dense> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d = d_out;
        for i in (0..self.layers.len()).rev() {
            let (g, dx) = self.layers[i].backward(cache.inputs[i].view(), d.view());
            grads.push(g);
            if i > 0 {
                // Input of layer i is tanh of the previous layer's output.
                d = dx * cache.inputs[i].mapv(|t| 1.0 - t * t);
            }
        }
        grads.reverse();
        if self.kind == EncoderKind::Linear {
            grads[0].bias.fill(0.0);
        }
        grads
    }
}

/// Image and text encoders sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBackend {
    pub name: String,
    pub dim: usize,
    pub trainable: bool,
    pub image: ToyEncoder,
    pub text: ToyEncoder,
}

/// Per-modality sigmoid gate: `activation = σ(W e + b)`, `gated = e ⊙ activation`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateProjection {
    pub proj: Dense,
}

impl GateProjection {
    pub fn dim(&self) -> usize {
        self.proj.inputs()
    }
}

/// `(gated, activation)` for one embedding.
pub fn gate_features(emb: &Vector, gate: &GateProjection) -> Result<(Vector, Vector)> {
    if emb.dim() != gate.dim() {
        return Err(Error::DimMismatch { expected: gate.dim(), found: emb.dim() });
    }
    let e = ArrayView1::from(emb.as_slice());
    let act = gate.proj.forward_one(e).mapv(sigmoid);
    let gated: Vec<f64> = e.iter().zip(act.iter()).map(|(x, a)| x * a).collect();
    Ok((Vector::new(gated)?, Vector::new(act.to_vec())?))
}

/// Concatenates image half then text half.
pub fn fuse(gated_img: &Vector, gated_txt: &Vector) -> Result<Vector> {
    if gated_img.dim() != gated_txt.dim() {
        return Err(Error::DimMismatch { expected: gated_img.dim(), found: gated_txt.dim() });
    }
    let mut out = gated_img.as_slice().to_vec();
    out.extend_from_slice(gated_txt.as_slice());
    Vector::new(out)
}

/// Contrastive ID score: cosine mapped affinely from `[-1, 1]` onto `[0, 1]`.
pub fn pair_score_cl(img_emb: &Vector, txt_emb: &Vector) -> Result<f64> {
    Ok((cosine_similarity(img_emb, txt_emb)? + 1.0) / 2.0)
}

/// ReLU MLP ending in one sigmoid unit; output is the probability of ID.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub layers: Vec<Dense>,
}

struct HeadCache {
    inputs: Vec<Array2<f64>>,
}

impl ClassifierHead {
    pub fn new(input: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input;
        for &h in hidden.iter().chain(std::iter::once(&1)) {
            layers.push(Dense::init(fan_in, h, rng));
            fan_in = h;
        }
        Self { layers }
    }

    pub fn zeroed(input: usize, hidden: &[usize]) -> Self {
        let mut layers = Vec::new();
        let mut fan_in = input;
        for &h in hidden.iter().chain(std::iter::once(&1)) {
            layers.push(Dense::zeros(fan_in, h));
            fan_in = h;
        }
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    /// Forward pass for a single fused vector.
    pub fn classify(&self, h: &Vector) -> Result<f64> {
        if h.dim() != self.input_dim() {
            return Err(Error::DimMismatch { expected: self.input_dim(), found: h.dim() });
        }
        let mut x = Array1::from(h.as_slice().to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward_one(x.view());
            if i < last {
                x.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(sigmoid(x[0]))
    }

    /// Returns `(probabilities, logits, cache)`.
    fn forward_cached(&self, x: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>, HeadCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(h.view());
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(h);
            h = z;
        }
        let logits = h.column(0).to_owned();
        (logits.mapv(sigmoid), logits, HeadCache { inputs })
    }

    fn backward(&self, cache: &HeadCache, d_logits: Array1<f64>) -> (Vec<Dense>, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d = d_logits.insert_axis(Axis(1));
        for i in (0..self.layers.len()).rev() {
            let (g, mut dx) = self.layers[i].backward(cache.inputs[i].view(), d.view());
            grads.push(g);
            if i > 0 {
                // Input of layer i is relu output; zero where it was clipped.
                ndarray::Zip::from(&mut dx).and(&cache.inputs[i]).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            d = dx;
        }
        grads.reverse();
        (grads, d)
    }
}

/// Which loss terms update trainable encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderObjective {
    /// Encoders follow the gradient of the full objective.
    #[default]
    Joint,
    /// Encoders see only the contrastive term; the classifier branch
    /// (gates and head) is trained on the full objective but does not
    /// backpropagate into the encoders.
    Contrastive,
}

/// Loss hyperparameters carried with a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub margin: f64,
    pub lambda: f64,
    pub gate_l1_weight: f64,
    #[serde(default)]
    pub encoder_objective: EncoderObjective,
}

impl Default for Objective {
    fn default() -> Self {
        Self { margin: 0.2, lambda: 0.8, gate_l1_weight: 1.0, encoder_objective: EncoderObjective::Joint }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WoodModel {
    pub spec: ModelSpec,
    pub backend: EncoderBackend,
    pub gate_img: GateProjection,
    pub gate_txt: GateProjection,
    pub head: ClassifierHead,
    pub objective: Objective,
}

/// Raw feature matrices of one batch plus its ID/OOD labels.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub images: Array2<f64>,
    pub texts: Array2<f64>,
    pub ood_flags: Vec<bool>,
}

impl BatchInputs {
    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks feature payloads; non-feature payloads fail with their sample index.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a PairedSample>) -> Result<Self> {
        let samples: Vec<&PairedSample> = samples.into_iter().collect();
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let feat = |index: usize, p: &'a Payload| -> Result<&'a [f64]> {
            match p {
                Payload::Features(v) => Ok(v),
                other => Err(Error::Encoder {
                    index,
                    reason: format!("toy encoders need feature payloads, got {}", other.kind()),
                }),
            }
        };
        let img_dim = feat(0, &samples[0].image)?.len();
        let txt_dim = feat(0, &samples[0].text)?.len();
        let mut images = Array2::zeros((samples.len(), img_dim));
        let mut texts = Array2::zeros((samples.len(), txt_dim));
        for (i, s) in samples.iter().enumerate() {
            let (img, txt) = (feat(i, &s.image)?, feat(i, &s.text)?);
            if img.len() != img_dim || txt.len() != txt_dim {
                return Err(Error::Encoder { index: i, reason: "feature dimension differs within batch".into() });
            }
            images.row_mut(i).assign(&ArrayView1::from(img));
            texts.row_mut(i).assign(&ArrayView1::from(txt));
        }
        let ood_flags = samples.iter().map(|s| s.ood_flag).collect();
        Ok(Self { images, texts, ood_flags })
    }

    /// Training targets: `1` for ID, `0` for OOD.
    pub fn targets(&self) -> Array1<f64> {
        self.ood_flags.iter().map(|&o| if o { 0.0 } else { 1.0 }).collect()
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub similarity: SimilarityMatrix,
    pub p_bc: Array1<f64>,
    pub p_cl: Array1<f64>,
    pub gate_img: Array2<f64>,
    pub gate_txt: Array2<f64>,
}

struct ForwardCache {
    img_enc: Option<EncoderCache>,
    txt_enc: Option<EncoderCache>,
    img_emb: Array2<f64>,
    txt_emb: Array2<f64>,
    cos: CosineCache,
    head: HeadCache,
}

/// Gradients for every layer, in [`WoodModel::layers`] order.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub layers: Vec<Dense>,
}

impl WoodModel {
    pub fn new(spec: ModelSpec, objective: Objective, seed: u64) -> Result<Self> {
        spec.validate()?;
        losses::validate_margin(objective.margin)?;
        if [objective.lambda, objective.gate_l1_weight].iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::invalid("lambda and gate L1 weight must be nonnegative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let d = spec.embedding_dim;
        let image = ToyEncoder::new(spec.encoder, spec.image_input_dim, spec.encoder_hidden, d, &mut rng);
        let text = ToyEncoder::new(spec.encoder, spec.text_input_dim, spec.encoder_hidden, d, &mut rng);
        let backend = EncoderBackend {
            name: format!("toy-{:?}", spec.encoder).to_lowercase(),
            dim: d,
            trainable: spec.trainable_encoders,
            image,
            text,
        };
        let gate_img = GateProjection { proj: Dense::init(d, d, &mut rng) };
        let gate_txt = GateProjection { proj: Dense::init(d, d, &mut rng) };
        let head = ClassifierHead::new(2 * d, &spec.head_hidden, &mut rng);
        Ok(Self { spec, backend, gate_img, gate_txt, head, objective })
    }

    pub fn dim(&self) -> usize {
        self.backend.dim
    }

    /// Named layers in canonical order: encoders, gates, head.
    pub fn layers(&self) -> Vec<(String, &Dense)> {
        let mut out = Vec::new();
        for (i, l) in self.backend.image.layers.iter().enumerate() {
            out.push((format!("encoder.image.{i}"), l));
        }
        for (i, l) in self.backend.text.layers.iter().enumerate() {
            out.push((format!("encoder.text.{i}"), l));
        }
        out.push(("gate.image".into(), &self.gate_img.proj));
        out.push(("gate.text".into(), &self.gate_txt.proj));
        for (i, l) in self.head.layers.iter().enumerate() {
            out.push((format!("head.{i}"), l));
        }
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut out: Vec<&mut Dense> = Vec::new();
        out.extend(self.backend.image.layers.iter_mut());
        out.extend(self.backend.text.layers.iter_mut());
        out.push(&mut self.gate_img.proj);
        out.push(&mut self.gate_txt.proj);
        out.extend(self.head.layers.iter_mut());
        out
    }

    /// Which layers an optimizer may update, aligned with [`Self::layers`].
    pub fn trainable_mask(&self) -> Vec<bool> {
        let enc = self.backend.image.layers.len() + self.backend.text.layers.len();
        let rest = 2 + self.head.layers.len();
        std::iter::repeat_n(self.backend.trainable, enc).chain(std::iter::repeat_n(true, rest)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.num_params()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers().iter().all(|(_, l)| l.is_finite())
    }

    /// Encodes raw feature matrices into `(image, text)` embeddings.
    pub fn encode(&self, inputs: &BatchInputs) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_inputs(inputs)?;
        Ok((self.backend.image.encode(inputs.images.view()), self.backend.text.encode(inputs.texts.view())))
    }

    fn check_inputs(&self, inputs: &BatchInputs) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if inputs.texts.nrows() != inputs.len() || inputs.ood_flags.len() != inputs.len() {
            return Err(Error::LengthMismatch { left: inputs.len(), right: inputs.texts.nrows() });
        }
        let expect = [
            (self.backend.image.input_dim(), inputs.images.ncols()),
            (self.backend.text.input_dim(), inputs.texts.ncols()),
        ];
        for (expected, found) in expect {
            if expected != found {
                return Err(Error::DimMismatch { expected, found });
            }
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &BatchInputs) -> Result<ForwardOutput> {
        Ok(self.forward_cached(inputs)?.0)
    }

    /// Forward pass starting from precomputed embeddings, e.g. from an
    /// [`EncoderAdapter`].
    pub fn forward_embeddings(
        &self,
        img_emb: Array2<f64>,
        txt_emb: Array2<f64>,
        ood_flags: &[bool],
    ) -> Result<ForwardOutput> {
        Ok(self.heads(img_emb, txt_emb, ood_flags, None, None)?.0)
    }

    fn forward_cached(&self, inputs: &BatchInputs) -> Result<(ForwardOutput, ForwardCache)> {
        self.check_inputs(inputs)?;
        let (img_emb, img_cache) = self.backend.image.forward_cached(inputs.images.view());
        let (txt_emb, txt_cache) = self.backend.text.forward_cached(inputs.texts.view());
        self.heads(img_emb, txt_emb, &inputs.ood_flags, Some(img_cache), Some(txt_cache))
    }

    fn heads(
        &self,
        img_emb: Array2<f64>,
        txt_emb: Array2<f64>,
        ood_flags: &[bool],
        img_enc: Option<EncoderCache>,
        txt_enc: Option<EncoderCache>,
    ) -> Result<(ForwardOutput, ForwardCache)> {
        let d = self.dim();
        for m in [&img_emb, &txt_emb] {
            if m.ncols() != d {
                return Err(Error::DimMismatch { expected: d, found: m.ncols() });
            }
        }
        if img_emb.nrows() != txt_emb.nrows() || ood_flags.len() != img_emb.nrows() {
            return Err(Error::LengthMismatch { left: img_emb.nrows(), right: txt_emb.nrows() });
        }
        if img_emb.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if img_emb.iter().chain(txt_emb.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        let (sim, cos) = similarity::cosine_matrix(img_emb.view(), txt_emb.view())?;
        let p_cl = sim.diag().mapv(|c| (c + 1.0) / 2.0);
        let similarity = SimilarityMatrix::with_flags(sim, ood_flags)?;

        let gate_img = self.gate_img.proj.forward(img_emb.view()).mapv(sigmoid);
        let gate_txt = self.gate_txt.proj.forward(txt_emb.view()).mapv(sigmoid);
        let fused = concatenate(Axis(1), &[(&img_emb * &gate_img).view(), (&txt_emb * &gate_txt).view()])
            .expect("gated halves share row count");
        let (p_bc, _, head) = self.head.forward_cached(fused.view());

        let out = ForwardOutput { similarity, p_bc, p_cl, gate_img, gate_txt };
        let cache = ForwardCache { img_enc, txt_enc, img_emb, txt_emb, cos, head };
        Ok((out, cache))
    }

    /// Joint objective of one batch, without gradients.
    pub fn loss(&self, inputs: &BatchInputs) -> Result<LossBreakdown> {
        let out = self.forward(inputs)?;
        self.breakdown(&out, inputs)
    }

    fn breakdown(&self, out: &ForwardOutput, inputs: &BatchInputs) -> Result<LossBreakdown> {
        Ok(self.loss_parts(out, inputs)?.0)
    }

    fn loss_parts(
        &self,
        out: &ForwardOutput,
        inputs: &BatchInputs,
    ) -> Result<(LossBreakdown, losses::ContrastiveGrad, losses::ClassifierLossGrad)> {
        let Objective { margin, lambda, gate_l1_weight, .. } = self.objective;
        let cg = losses::contrastive_grad(&out.similarity, margin)?;
        let targets = inputs.targets();
        let bc = losses::classifier_loss_grad(
            out.p_bc.view(),
            targets.view(),
            out.gate_img.view(),
            out.gate_txt.view(),
            gate_l1_weight,
        )?;
        let breakdown = LossBreakdown {
            l_id: cg.l_id,
            l_ood: cg.l_ood,
            l_cl: cg.value,
            l_bce: bc.bce,
            l_gate_l1: bc.gate_l1,
            l_bc: bc.value,
            total: losses::joint_objective(cg.value, bc.value, lambda),
            margin,
            lambda,
        };
        Ok((breakdown, cg, bc))
    }

    /// Joint objective and its gradient w.r.t. every layer.
    pub fn loss_and_grads(&self, inputs: &BatchInputs) -> Result<(LossBreakdown, ModelGrads, ForwardOutput)> {
        let (out, cache) = self.forward_cached(inputs)?;
        let (breakdown, cg, bc) = self.loss_parts(&out, inputs)?;
        let lambda = self.objective.lambda;
        let d = self.dim();

        // Head: dL/dlogit = λ dL_bc/dp · p (1 - p).
        let d_logits = Array1::from_iter(
            bc.d_pred.iter().zip(out.p_bc.iter()).map(|(&g, &p)| lambda * g * p * (1.0 - p)),
        );
        let (head_grads, d_fused) = self.head.backward(&cache.head, d_logits);

        let d_gate_l1 = lambda * bc.d_gate;
        let (g_img, d_img_gate) = gate_backward(
            &self.gate_img,
            cache.img_emb.view(),
            out.gate_img.view(),
            d_fused.slice(s![.., ..d]),
            d_gate_l1,
        );
        let (g_txt, d_txt_gate) = gate_backward(
            &self.gate_txt,
            cache.txt_emb.view(),
            out.gate_txt.view(),
            d_fused.slice(s![.., d..]),
            d_gate_l1,
        );

        let (d_img_cos, d_txt_cos) =
            similarity::cosine_matrix_backward(cg.d_sim.view(), out.similarity.entries().view(), &cache.cos);
        let (d_img_emb, d_txt_emb) = match self.objective.encoder_objective {
            EncoderObjective::Joint => (d_img_gate + d_img_cos, d_txt_gate + d_txt_cos),
            EncoderObjective::Contrastive => (d_img_cos, d_txt_cos),
        };

        let enc_grads = |enc: &ToyEncoder, c: &Option<EncoderCache>, d_emb: Array2<f64>| -> Vec<Dense> {
            match c {
                Some(c) if self.backend.trainable => enc.backward(c, d_emb),
                _ => enc.layers.iter().map(|l| Dense::zeros(l.inputs(), l.outputs())).collect(),
            }
        };
        let mut layers = enc_grads(&self.backend.image, &cache.img_enc, d_img_emb);
        layers.extend(enc_grads(&self.backend.text, &cache.txt_enc, d_txt_emb));
        layers.push(g_img);
        layers.push(g_txt);
        layers.extend(head_grads);
        Ok((breakdown, ModelGrads { layers }, out))
    }

    /// Signs of every piecewise-linear switch the objective passes through:
    /// ReLU units, hinge terms and the BCE clamp. Two parameter settings with
    /// the same signature lie on the same smooth piece of the loss.
    pub fn kink_signature(&self, inputs: &BatchInputs) -> Result<Vec<bool>> {
        let (out, cache) = self.forward_cached(inputs)?;
        let mut sig = Vec::new();
        for x in cache.head.inputs.iter().skip(1) {
            sig.extend(x.iter().map(|&v| v > 0.0));
        }
        let s = &out.similarity;
        let m = self.objective.margin;
        for &row in s.id_indices() {
            for col in (0..s.n()).filter(|&c| c != row) {
                sig.push(m - s.get(row, row) + s.get(row, col) > 0.0);
            }
        }
        for &row in s.ood_indices() {
            for col in 0..s.n() {
                sig.push(s.get(row, col) - m > 0.0);
            }
        }
        for &p in out.p_bc.iter() {
            sig.push((BCE_EPS..=1.0 - BCE_EPS).contains(&p));
        }
        Ok(sig)
    }

    /// Per-sample `(p_bc, p_cl)` for a batch.
    pub fn score(&self, inputs: &BatchInputs) -> Result<(Array1<f64>, Array1<f64>)> {
        let out = self.forward(inputs)?;
        Ok((out.p_bc, out.p_cl))
    }
}

fn gate_backward(
    gate: &GateProjection,
    emb: ArrayView2<'_, f64>,
    act: ArrayView2<'_, f64>,
    d_gated: ArrayView2<'_, f64>,
    d_l1: f64,
) -> (Dense, Array2<f64>) {
    // gated = e ⊙ a, a = σ(z): da = dg ⊙ e + d_l1, dz = da ⊙ a (1 - a).
    let d_act = &d_gated * &emb + d_l1;
    let d_z = d_act * act.mapv(|a| a * (1.0 - a));
    let (g, d_emb_via_gate) = gate.proj.backward(emb, d_z.view());
    (g, d_emb_via_gate + &d_gated * &act)
}

/// Input modality of an encoder adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

/// Declares what an external encoder produces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterManifest {
    pub name: String,
    pub dim: usize,
    pub modality: Modality,
}

/// Boundary for external (e.g. pretrained) encoders. Adapters are frozen;
/// their embeddings enter the model through [`WoodModel::forward_embeddings`].
pub trait EncoderAdapter: Send + Sync {
    fn manifest(&self) -> &AdapterManifest;
    fn encode(&self, payload: &Payload) -> Result<Vector>;
}

/// Runs a pair of adapters over samples, attaching the failing sample index to errors.
pub fn encode_with_adapters(
    image: &dyn EncoderAdapter,
    text: &dyn EncoderAdapter,
    samples: &[PairedSample],
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (mi, mt) = (image.manifest(), text.manifest());
    if mi.modality != Modality::Image || mt.modality != Modality::Text {
        return Err(Error::invalid("adapter modalities must be (image, text)"));
    }
    if mi.dim != mt.dim {
        return Err(Error::DimMismatch { expected: mi.dim, found: mt.dim });
    }
    let encode_all = |adapter: &dyn EncoderAdapter, pick: fn(&PairedSample) -> &Payload| -> Result<Array2<f64>> {
        let dim = adapter.manifest().dim;
        let rows = par::map_indexed(samples.len(), |i| {
            let v = adapter
                .encode(pick(&samples[i]))
                .map_err(|e| Error::Encoder { index: i, reason: e.to_string() })?;
            if v.dim() != dim {
                return Err(Error::Encoder { index: i, reason: format!("adapter emitted dim {}", v.dim()) });
            }
            Ok(v)
        });
        let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(similarity::stack(&rows))
    };
    Ok((encode_all(image, |s| &s.image)?, encode_all(text, |s| &s.text)?))
}
