//! The learned functions: two-view image encoder, decoder, sequence
//! encoder with prediction head, and the actor-critic agent networks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::{AgentConfig, NetConfig};
use crate::error::{contract_err, dim_err, param_err, Result};
use crate::tensor::{
    conv2d_out_size, lstm_step, BatchNorm, Conv2d, ConvTranspose2d, Graph, Linear, LstmCell, Mode,
    Module, Param, Scalar, Tensor, Var,
};
use crate::vision::{rgb_to_lab, Frame, LabSequence, LabViews};
use crate::Rng;

/// Spatial extents of the stride-2 stack, starting with the input size.
pub fn encoder_sizes(cfg: &NetConfig) -> Result<Vec<usize>> {
    let mut sizes = vec![cfg.frame_size];
    while *sizes.last().expect("non-empty") > 1 && sizes.len() <= cfg.conv_filters.len() {
        let next = conv2d_out_size(*sizes.last().expect("non-empty"), cfg.kernel, 2, 0)?;
        sizes.push(next);
    }
    if *sizes.last().expect("non-empty") != 1 {
        return Err(param_err!(
            "frame size {} does not reduce to 1x1 with {} layers of kernel {}",
            cfg.frame_size,
            cfg.conv_filters.len(),
            cfg.kernel
        ));
    }
    Ok(sizes)
}

/// Convolutional encoder for one view.
#[derive(Debug, Clone)]
pub struct ImageEncoder<T: Scalar = f32> {
    pub convs: Vec<Conv2d<T>>,
    pub norms: Vec<BatchNorm<T>>,
    pub bottleneck: Conv2d<T>,
    pub bottleneck_norm: BatchNorm<T>,
    pub head: Conv2d<T>,
    leak: f64,
}

impl<T: Scalar> ImageEncoder<T> {
    pub fn new(name: &str, channels: usize, out: usize, cfg: &NetConfig, rng: &mut Rng) -> Result<Self> {
        let layers = encoder_sizes(cfg)?.len() - 1;
        let mut convs = Vec::with_capacity(layers);
        let mut norms = Vec::with_capacity(layers);
        let mut cin = channels;
        for i in 0..layers {
            let f = cfg.scaled(cfg.conv_filters[i]);
            convs.push(Conv2d::new(&format!("{name}.conv{i}"), cin, f, cfg.kernel, 2, 0, rng)?);
            norms.push(BatchNorm::new(&format!("{name}.bn{i}"), f, cfg.bn_momentum, cfg.bn_eps));
            cin = f;
        }
        let b = cfg.scaled(cfg.bottleneck_filters);
        Ok(Self {
            convs,
            norms,
            bottleneck: Conv2d::new(&format!("{name}.conv{layers}"), cin, b, 1, 1, 0, rng)?,
            bottleneck_norm: BatchNorm::new(&format!("{name}.bn{layers}"), b, cfg.bn_momentum, cfg.bn_eps),
            head: Conv2d::new(&format!("{name}.head"), b, out, 1, 1, 0, rng)?,
            leak: cfg.leak,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].weight.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.head.out_channels()
    }

    /// `[N, C, H, W]` -> `[N, out]`.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let leak = T::lit(self.leak);
        let mut h = x;
        for (conv, bn) in self.convs.iter().zip(self.norms.iter_mut()) {
            h = conv.forward(g, h)?;
            h = bn.forward(g, h, mode)?;
            h = g.leaky_relu(h, leak);
        }
        h = self.bottleneck.forward(g, h)?;
        h = self.bottleneck_norm.forward(g, h, mode)?;
        h = g.leaky_relu(h, leak);
        h = self.head.forward(g, h)?;
        let n = g.shape(h)[0];
        if g.shape(h)[2..] != [1, 1] {
            return Err(dim_err!("encoder output is not 1x1: {:?}", g.shape(h)));
        }
        g.reshape(h, &[n, self.out_dim()])
    }
}

impl<T: Scalar> Module<T> for ImageEncoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for (c, b) in self.convs.iter().zip(&self.norms) {
            c.visit(f);
            b.visit(f);
        }
        self.bottleneck.visit(f);
        self.bottleneck_norm.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for (c, b) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            c.visit_mut(f);
            b.visit_mut(f);
        }
        self.bottleneck.visit_mut(f);
        self.bottleneck_norm.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Mirror of the encoder: two 1x1 convolutions, then transposed convolutions
/// whose output paddings restore the encoder's spatial sizes exactly.
#[derive(Debug, Clone)]
pub struct ImageDecoder<T: Scalar = f32> {
    pub expand: Conv2d<T>,
    pub mix: Conv2d<T>,
    pub mix_norm: BatchNorm<T>,
    pub tconvs: Vec<ConvTranspose2d<T>>,
    pub norms: Vec<BatchNorm<T>>,
    leak: f64,
}

impl<T: Scalar> ImageDecoder<T> {
    pub fn new(name: &str, cfg: &NetConfig, rng: &mut Rng) -> Result<Self> {
        let sizes = encoder_sizes(cfg)?;
        let layers = sizes.len() - 1;
        let b = cfg.scaled(cfg.bottleneck_filters);
        let filters: Vec<usize> = cfg.conv_filters[..layers].iter().map(|&f| cfg.scaled(f)).collect();
        let mut tconvs = Vec::with_capacity(layers);
        let mut norms = Vec::new();
        let mut cin = b;
        for i in 0..layers {
            let (from, to) = (sizes[layers - i], sizes[layers - i - 1]);
            let base = (from - 1) * 2 + cfg.kernel;
            if to < base || to - base >= 2 {
                return Err(param_err!("no output padding maps {} to {}", from, to));
            }
            let cout = if i + 1 == layers {
                3
            } else {
                filters[layers - i - 2]
            };
            tconvs.push(ConvTranspose2d::new(
                &format!("{name}.tconv{i}"),
                cin,
                cout,
                cfg.kernel,
                2,
                to - base,
                rng,
            )?);
            if i + 1 < layers {
                norms.push(BatchNorm::new(&format!("{name}.bn{}", i + 1), cout, cfg.bn_momentum, cfg.bn_eps));
            }
            cin = cout;
        }
        Ok(Self {
            expand: Conv2d::new(&format!("{name}.conv0"), cfg.state_dim, b, 1, 1, 0, rng)?,
            mix: Conv2d::new(&format!("{name}.conv1"), b, b, 1, 1, 0, rng)?,
            mix_norm: BatchNorm::new(&format!("{name}.bn0"), b, cfg.bn_momentum, cfg.bn_eps),
            tconvs,
            norms,
            leak: cfg.leak,
        })
    }

    /// `[N, state_dim]` -> `[N, 3, H, W]`.
    pub fn forward(&mut self, g: &mut Graph<T>, s: Var, mode: Mode) -> Result<Var> {
        let leak = T::lit(self.leak);
        let (n, d) = (g.shape(s)[0], g.shape(s)[1]);
        let mut h = g.reshape(s, &[n, d, 1, 1])?;
        h = self.expand.forward(g, h)?;
        h = g.leaky_relu(h, leak);
        h = self.mix.forward(g, h)?;
        h = self.mix_norm.forward(g, h, mode)?;
        h = g.leaky_relu(h, leak);
        let last = self.tconvs.len() - 1;
        for (i, tc) in self.tconvs.iter().enumerate() {
            h = tc.forward(g, h)?;
            if i < last {
                h = self.norms[i].forward(g, h, mode)?;
                h = g.leaky_relu(h, leak);
            }
        }
        Ok(h)
    }
}

impl<T: Scalar> Module<T> for ImageDecoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.expand.visit(f);
        self.mix.visit(f);
        self.mix_norm.visit(f);
        for (i, tc) in self.tconvs.iter().enumerate() {
            tc.visit(f);
            if let Some(bn) = self.norms.get(i) {
                bn.visit(f);
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.expand.visit_mut(f);
        self.mix.visit_mut(f);
        self.mix_norm.visit_mut(f);
        for (i, tc) in self.tconvs.iter_mut().enumerate() {
            tc.visit_mut(f);
            if let Some(bn) = self.norms.get_mut(i) {
                bn.visit_mut(f);
            }
        }
    }
}

/// Recurrent state of every layer, as graph values.
#[derive(Debug, Clone)]
pub struct GraphCarry {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
    pub steps: usize,
}

/// Detached recurrent state for incremental encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceCarry<T: Scalar = f32> {
    pub h: Vec<Tensor<T>>,
    pub c: Vec<Tensor<T>>,
    pub steps: usize,
}

/// Stacked LSTM followed by a linear map to the embedding.
#[derive(Debug, Clone)]
pub struct SequenceEncoder<T: Scalar = f32> {
    pub layers: Vec<LstmCell<T>>,
    pub head: Linear<T>,
}

impl<T: Scalar> SequenceEncoder<T> {
    pub fn new(name: &str, cfg: &NetConfig, rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(cfg.lstm_layers);
        for i in 0..cfg.lstm_layers {
            let input = if i == 0 { cfg.state_dim } else { cfg.lstm_hidden };
            layers.push(LstmCell::new(&format!("{name}.lstm{i}"), input, cfg.lstm_hidden, rng));
        }
        Self {
            layers,
            head: Linear::new(&format!("{name}.head"), cfg.lstm_hidden, cfg.embed_dim, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    pub fn zero_carry(&self, g: &mut Graph<T>, batch: usize) -> GraphCarry {
        let n = self.layers.len();
        let mut h = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(n);
        for _ in 0..n {
            h.push(g.constant(Tensor::zeros(&[batch, self.hidden()])));
            c.push(g.constant(Tensor::zeros(&[batch, self.hidden()])));
        }
        GraphCarry { h, c, steps: 0 }
    }

    pub fn load_carry(&self, g: &mut Graph<T>, carry: &SequenceCarry<T>) -> GraphCarry {
        GraphCarry {
            h: carry.h.iter().map(|t| g.constant(t.clone())).collect(),
            c: carry.c.iter().map(|t| g.constant(t.clone())).collect(),
            steps: carry.steps,
        }
    }

    pub fn store_carry(&self, g: &Graph<T>, carry: &GraphCarry) -> SequenceCarry<T> {
        SequenceCarry {
            h: carry.h.iter().map(|&v| g.value(v).clone()).collect(),
            c: carry.c.iter().map(|&v| g.value(v).clone()).collect(),
            steps: carry.steps,
        }
    }

    /// Feeds one state `[B, state_dim]`; returns `z [B, embed_dim]`.
    pub fn step(&self, g: &mut Graph<T>, carry: &mut GraphCarry, s: Var) -> Result<Var> {
        let mut x = s;
        for (i, cell) in self.layers.iter().enumerate() {
            let (h, c) = lstm_step(g, cell, x, carry.h[i], carry.c[i])?;
            carry.h[i] = h;
            carry.c[i] = c;
            x = h;
        }
        carry.steps += 1;
        self.head.forward(g, x)
    }
}

impl<T: Scalar> Module<T> for SequenceEncoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.iter().for_each(|l| l.visit(f));
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
        self.head.visit_mut(f);
    }
}

/// Two-layer perceptron from `z_t` to the predicted next state.
#[derive(Debug, Clone)]
pub struct Predictor<T: Scalar = f32> {
    pub fc0: Linear<T>,
    pub fc1: Linear<T>,
    leak: f64,
}

impl<T: Scalar> Predictor<T> {
    pub fn new(name: &str, cfg: &NetConfig, rng: &mut Rng) -> Self {
        Self {
            fc0: Linear::new(&format!("{name}.fc0"), cfg.embed_dim, cfg.predictor_hidden, rng),
            fc1: Linear::new(&format!("{name}.fc1"), cfg.predictor_hidden, cfg.state_dim, rng),
            leak: cfg.leak,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let h = self.fc0.forward(g, z)?;
        let h = g.leaky_relu(h, T::lit(self.leak));
        self.fc1.forward(g, h)
    }
}

impl<T: Scalar> Module<T> for Predictor<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.fc0.visit(f);
        self.fc1.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fc0.visit_mut(f);
        self.fc1.visit_mut(f);
    }
}

/// Frames converted to encoder inputs: `l [N,1,H,W]` and `ab [N,2,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch<T: Scalar = f32> {
    pub l: Tensor<T>,
    pub ab: Tensor<T>,
}

impl<T: Scalar> ViewBatch<T> {
    pub fn from_views(views: &[&LabViews]) -> Result<Self> {
        let Some(first) = views.first() else {
            return Err(contract_err!("empty frame batch"));
        };
        let (h, w) = (first.height, first.width);
        let mut l = Vec::with_capacity(views.len() * h * w);
        let mut ab = Vec::with_capacity(2 * views.len() * h * w);
        for v in views {
            if v.height != h || v.width != w {
                return Err(dim_err!("mixed frame sizes in one batch"));
            }
            l.extend(v.l_view.iter().map(|&x| T::lit(x as f64)));
            ab.extend(v.ab_view.iter().map(|&x| T::lit(x as f64)));
        }
        Ok(Self {
            l: Tensor::new(&[views.len(), 1, h, w], l)?,
            ab: Tensor::new(&[views.len(), 2, h, w], ab)?,
        })
    }

    /// All frames of the given sequences, sequence-major.
    pub fn from_sequences(seqs: &[&LabSequence]) -> Result<Self> {
        let Some(first) = seqs.first() else {
            return Err(contract_err!("empty sequence batch"));
        };
        let (h, w) = (first.height, first.width);
        let n: usize = seqs.iter().map(|s| s.frames).sum();
        let mut l = Vec::with_capacity(n * h * w);
        let mut ab = Vec::with_capacity(2 * n * h * w);
        for s in seqs {
            if s.height != h || s.width != w {
                return Err(dim_err!("mixed frame sizes in one batch"));
            }
            l.extend(s.l.iter().map(|&x| T::lit(x as f64)));
            ab.extend(s.ab.iter().map(|&x| T::lit(x as f64)));
        }
        Ok(Self {
            l: Tensor::new(&[n, 1, h, w], l)?,
            ab: Tensor::new(&[n, 2, h, w], ab)?,
        })
    }

    pub fn from_frames(frames: &[&Frame]) -> Result<Self> {
        let views: Vec<LabViews> = frames.iter().map(|f| rgb_to_lab(f)).collect();
        Self::from_views(&views.iter().collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.l.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The three-channel target `[N, 3, H, W]` for reconstruction.
    pub fn stacked(&self, rows: &[usize]) -> Tensor<T> {
        let (h, w) = (self.l.shape()[2], self.l.shape()[3]);
        let plane = h * w;
        let mut data = Vec::with_capacity(rows.len() * 3 * plane);
        for &r in rows {
            data.extend_from_slice(&self.l.data()[r * plane..(r + 1) * plane]);
            data.extend_from_slice(&self.ab.data()[2 * r * plane..2 * (r + 1) * plane]);
        }
        Tensor::new(&[rows.len(), 3, h, w], data).expect("sized by rows")
    }
}

/// Encodings of a frame batch, per view and concatenated.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub l: Var,
    pub ab: Var,
    pub s: Var,
}

/// Parameters of g (two views), q, f and d.
#[derive(Debug, Clone)]
pub struct EncoderBundle<T: Scalar = f32> {
    pub cfg: NetConfig,
    pub g1: ImageEncoder<T>,
    pub g2: ImageEncoder<T>,
    pub q: ImageDecoder<T>,
    pub f: SequenceEncoder<T>,
    pub d: Predictor<T>,
}

impl<T: Scalar> EncoderBundle<T> {
    pub fn new(cfg: &NetConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let half = cfg.state_dim / 2;
        Ok(Self {
            cfg: cfg.clone(),
            g1: ImageEncoder::new("g1", 1, half, cfg, rng)?,
            g2: ImageEncoder::new("g2", 2, half, cfg, rng)?,
            q: ImageDecoder::new("q", cfg, rng)?,
            f: SequenceEncoder::new("f", cfg, rng),
            d: Predictor::new("d", cfg, rng),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.cfg.state_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let n = self.cfg.frame_size;
        if h != n || w != n {
            return Err(dim_err!("frame is {}x{}, the encoder expects {}x{}", h, w, n, n));
        }
        Ok(())
    }

    /// `s = [g1(L), g2(ab)]` for a batch.
    pub fn encode_views(&mut self, g: &mut Graph<T>, batch: &ViewBatch<T>, mode: Mode) -> Result<Encoded> {
        self.check_size(batch.l.shape()[2], batch.l.shape()[3])?;
        let l_in = g.constant(batch.l.clone());
        let ab_in = g.constant(batch.ab.clone());
        let l = self.g1.forward(g, l_in, mode)?;
        let ab = self.g2.forward(g, ab_in, mode)?;
        let s = g.concat_cols(&[l, ab])?;
        Ok(Encoded { l, ab, s })
    }

    /// Eval-mode state encoding of a single frame.
    pub fn encode_frame(&mut self, frame: &Frame) -> Result<Vec<T>> {
        self.check_size(frame.height, frame.width)?;
        Ok(self.encode_frames(&[frame])?.remove(0))
    }

    /// Eval-mode state encodings, one vector per frame.
    pub fn encode_frames(&mut self, frames: &[&Frame]) -> Result<Vec<Vec<T>>> {
        let batch = ViewBatch::from_frames(frames)?;
        let mut g = Graph::inference();
        let enc = self.encode_views(&mut g, &batch, Mode::Eval)?;
        let d = self.state_dim();
        Ok(g.data(enc.s).chunks(d).map(|c| c.to_vec()).collect())
    }

    pub fn decode_state(&mut self, g: &mut Graph<T>, s: Var, mode: Mode) -> Result<Var> {
        if g.shape(s).len() != 2 || g.shape(s)[1] != self.state_dim() {
            return Err(dim_err!("state has shape {:?}, expected [N, {}]", g.shape(s), self.state_dim()));
        }
        self.q.forward(g, s, mode)
    }

    /// Runs f over `states[t]`, each `[B, state_dim]`; returns every `z_t`.
    pub fn encode_sequence_graph(
        &self,
        g: &mut Graph<T>,
        carry: &mut GraphCarry,
        states: &[Var],
    ) -> Result<Vec<Var>> {
        states.iter().map(|&s| self.f.step(g, carry, s)).collect()
    }

    /// Eval-mode encoding of a state sequence; the carry continues it.
    pub fn encode_sequence(&self, states: &[Vec<T>]) -> Result<(Vec<T>, SequenceCarry<T>)> {
        if states.is_empty() {
            return Err(contract_err!("encode_sequence needs at least one state"));
        }
        let mut g = Graph::inference();
        let mut carry = self.f.zero_carry(&mut g, 1);
        let mut z = None;
        for s in states {
            z = Some(self.extend_graph(&mut g, &mut carry, s)?);
        }
        let z = g.data(z.expect("non-empty")).to_vec();
        Ok((z, self.f.store_carry(&g, &carry)))
    }

    /// Empty carry for a single sequence.
    pub fn empty_carry(&self) -> SequenceCarry<T> {
        let zero = Tensor::zeros(&[1, self.f.hidden()]);
        SequenceCarry {
            h: vec![zero.clone(); self.f.layers.len()],
            c: vec![zero; self.f.layers.len()],
            steps: 0,
        }
    }

    /// Extends `carry` by one state and returns the new `z`.
    pub fn extend_sequence(&self, carry: &mut SequenceCarry<T>, s: &[T]) -> Result<Vec<T>> {
        let mut g = Graph::inference();
        let mut gc = self.f.load_carry(&mut g, carry);
        let z = self.extend_graph(&mut g, &mut gc, s)?;
        *carry = self.f.store_carry(&g, &gc);
        Ok(g.data(z).to_vec())
    }

    fn extend_graph(&self, g: &mut Graph<T>, carry: &mut GraphCarry, s: &[T]) -> Result<Var> {
        if s.len() != self.state_dim() {
            return Err(dim_err!("state has {} entries, expected {}", s.len(), self.state_dim()));
        }
        let x = g.constant(Tensor::new(&[1, s.len()], s.to_vec())?);
        self.f.step(g, carry, x)
    }

    /// `ŝ_{t+1} = d(z_t)`.
    pub fn predict_next(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        if g.shape(z).len() != 2 || g.shape(z)[1] != self.embed_dim() {
            return Err(dim_err!("embedding has shape {:?}", g.shape(z)));
        }
        self.d.forward(g, z)
    }

    /// K-step rollout from a carry that has consumed the context: the
    /// first prediction comes from `z`, each later one from the sequence
    /// extended by the previous predictions.
    pub fn rollout(&self, g: &mut Graph<T>, carry: &mut GraphCarry, z: Var, k: usize) -> Result<Vec<Var>> {
        let mut preds = Vec::with_capacity(k);
        let mut z = z;
        for i in 0..k {
            let s_hat = self.predict_next(g, z)?;
            preds.push(s_hat);
            if i + 1 < k {
                z = self.f.step(g, carry, s_hat)?;
            }
        }
        Ok(preds)
    }

    /// Eval-mode embedding of whole trajectories, one `z` per trajectory.
    pub fn embed_trajectory(&mut self, frames: &[Frame]) -> Result<Vec<T>> {
        let refs: Vec<&Frame> = frames.iter().collect();
        let states = self.encode_frames(&refs)?;
        Ok(self.encode_sequence(&states)?.0)
    }

    /// Eval-mode per-frame states and final `z` of a precomputed sequence.
    pub fn embed_views(&mut self, seq: &LabSequence) -> Result<(Vec<Vec<T>>, Vec<T>)> {
        let batch = ViewBatch::from_sequences(&[seq])?;
        let mut g = Graph::inference();
        let enc = self.encode_views(&mut g, &batch, Mode::Eval)?;
        let d = self.state_dim();
        let states: Vec<Vec<T>> = g.data(enc.s).chunks(d).map(|c| c.to_vec()).collect();
        let (z, _) = self.encode_sequence(&states)?;
        Ok((states, z))
    }

    pub fn cast<U: Scalar>(&self) -> EncoderBundle<U> {
        let mut rng = crate::rng_from_seed(0);
        let mut out = EncoderBundle::<U>::new(&self.cfg, &mut rng).expect("same config");
        let mut src: Vec<Tensor<U>> = Vec::new();
        self.visit(&mut |p| src.push(p.value.cast()));
        let mut it = src.into_iter();
        out.visit_mut(&mut |p| {
            p.set_value(it.next().expect("same layout")).expect("same shapes");
        });
        out
    }
}

impl<T: Scalar> Module<T> for EncoderBundle<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.g1.visit(f);
        self.g2.visit(f);
        self.q.visit(f);
        self.f.visit(f);
        self.d.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.g1.visit_mut(f);
        self.g2.visit_mut(f);
        self.q.visit_mut(f);
        self.f.visit_mut(f);
        self.d.visit_mut(f);
    }
}

/// Convolutional trunk `E` over stacked RGB frames. The last feature map
/// goes through a spatial softmax: each channel yields the expected image
/// coordinates of its activation, which a linear layer maps to the feature.
#[derive(Debug, Clone)]
pub struct FrameEncoder<T: Scalar = f32> {
    pub conv0: Conv2d<T>,
    pub conv1: Conv2d<T>,
    pub fc: Linear<T>,
    /// `[H * W, 2]` pixel-centre coordinates in `[-1, 1]`.
    coords: Tensor<T>,
}

impl<T: Scalar> FrameEncoder<T> {
    pub fn new(frame_size: usize, cfg: &AgentConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.conv_filters;
        let s = conv2d_out_size(conv2d_out_size(frame_size, 3, 2, 0)?, 3, 1, 0)?;
        let axis = |i: usize| if s == 1 { 0.0 } else { 2.0 * i as f64 / (s - 1) as f64 - 1.0 };
        let coords = (0..s * s).flat_map(|p| [T::lit(axis(p % s)), T::lit(axis(p / s))]).collect();
        Ok(Self {
            conv0: Conv2d::new("policy.encoder.conv0", 3 * cfg.frame_stack, c, 3, 2, 0, rng)?,
            conv1: Conv2d::new("policy.encoder.conv1", c, c, 3, 1, 0, rng)?,
            fc: Linear::new("policy.encoder.fc", 2 * c, cfg.feature_dim, rng),
            coords: Tensor::new(&[s * s, 2], coords)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, obs: Var) -> Result<Var> {
        let h = self.conv0.forward(g, obs)?;
        let h = g.relu(h);
        let h = self.conv1.forward(g, h)?;
        let (n, c) = (g.shape(h)[0], g.shape(h)[1]);
        let maps = g.reshape(h, &[n * c, self.coords.shape()[0]])?;
        let attention = g.log_softmax_rows(maps)?;
        let attention = g.exp(attention);
        let coords = g.constant(self.coords.clone());
        let points = g.matmul(attention, coords)?;
        let points = g.reshape(points, &[n, 2 * c])?;
        let h = self.fc.forward(g, points)?;
        Ok(g.tanh(h))
    }
}

impl<T: Scalar> Module<T> for FrameEncoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv0.visit(f);
        self.conv1.visit(f);
        self.fc.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv0.visit_mut(f);
        self.conv1.visit_mut(f);
        self.fc.visit_mut(f);
    }
}

/// Fully connected stack with ReLU between layers.
#[derive(Debug, Clone)]
pub struct Mlp<T: Scalar = f32> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(name: &str, sizes: &[usize], rng: &mut Rng) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.fc{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

impl<T: Scalar> Module<T> for Mlp<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

/// Deterministic policy: `tanh(actor(E(o)))`.
#[derive(Debug, Clone)]
pub struct Policy<T: Scalar = f32> {
    pub encoder: FrameEncoder<T>,
    pub actor: Mlp<T>,
}

impl<T: Scalar> Module<T> for Policy<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.encoder.visit(f);
        self.actor.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.encoder.visit_mut(f);
        self.actor.visit_mut(f);
    }
}

/// Twin Q heads over `[E(o), a]`.
#[derive(Debug, Clone)]
pub struct Critic<T: Scalar = f32> {
    pub q1: Mlp<T>,
    pub q2: Mlp<T>,
}

impl<T: Scalar> Critic<T> {
    fn new(name: &str, cfg: &AgentConfig, action_dim: usize, rng: &mut Rng) -> Self {
        let sizes = [cfg.feature_dim + action_dim, cfg.hidden, cfg.hidden, 1];
        Self {
            q1: Mlp::new(&format!("{name}.q1"), &sizes, rng),
            q2: Mlp::new(&format!("{name}.q2"), &sizes, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, h: Var, a: Var) -> Result<(Var, Var)> {
        let x = g.concat_cols(&[h, a])?;
        Ok((self.q1.forward(g, x)?, self.q2.forward(g, x)?))
    }

    fn rename(&mut self, from: &str, to: &str) {
        self.visit_mut(&mut |p| {
            if let Some(rest) = p.name.strip_prefix(from) {
                p.name = String::from(to) + rest;
            }
        });
    }
}

impl<T: Scalar> Module<T> for Critic<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.q1.visit(f);
        self.q2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.q1.visit_mut(f);
        self.q2.visit_mut(f);
    }
}

/// Policy, critic and target critic. The frame encoder lives in the
/// policy and is shared by the critic.
#[derive(Debug, Clone)]
pub struct AgentNets<T: Scalar = f32> {
    pub policy: Policy<T>,
    pub critic: Critic<T>,
    pub critic_target: Critic<T>,
    pub action_dim: usize,
}

impl<T: Scalar> AgentNets<T> {
    pub fn new(frame_size: usize, action_dim: usize, cfg: &AgentConfig, rng: &mut Rng) -> Result<Self> {
        let encoder = FrameEncoder::new(frame_size, cfg, rng)?;
        let actor = Mlp::new("policy.actor", &[cfg.feature_dim, cfg.hidden, cfg.hidden, action_dim], rng);
        let critic = Critic::new("critic", cfg, action_dim, rng);
        let mut critic_target = critic.clone();
        critic_target.rename("critic", "critic_target");
        Ok(Self {
            policy: Policy { encoder, actor },
            critic,
            critic_target,
            action_dim,
        })
    }

    pub fn features(&self, g: &mut Graph<T>, obs: Var) -> Result<Var> {
        self.policy.encoder.forward(g, obs)
    }

    /// `tanh(actor(h))`.
    pub fn act(&self, g: &mut Graph<T>, h: Var) -> Result<Var> {
        let a = self.policy.actor.forward(g, h)?;
        Ok(g.tanh(a))
    }
}

impl<T: Scalar> Module<T> for AgentNets<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.policy.visit(f);
        self.critic.visit(f);
        self.critic_target.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.policy.visit_mut(f);
        self.critic.visit_mut(f);
        self.critic_target.visit_mut(f);
    }
}

/// Copies every parameter value of `src` into `dst` (same layout).
pub fn copy_params<T: Scalar>(dst: &mut dyn Module<T>, src: &dyn Module<T>) -> Result<()> {
    let mut values = Vec::new();
    src.visit(&mut |p| values.push(p.value.clone()));
    let mut it = values.into_iter();
    let mut err = None;
    dst.visit_mut(&mut |p| match it.next() {
        Some(v) if v.shape() == p.value.shape() => p.value = v,
        _ => err = Some(dim_err!("parameter layouts differ at {}", p.name)),
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
