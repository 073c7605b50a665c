use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, PosInit};
use super::real::Real;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product::<usize>())
                .map(|_| T::lit(dist.sample(rng)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.shape[1];
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    /// `[d, 3d]`: query, key and value projections side by side.
    pub w_qkv: Tensor<T>,
    pub b_qkv: Tensor<T>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w_fc1: Tensor<T>,
    pub b_fc1: Tensor<T>,
    pub w_fc2: Tensor<T>,
    pub b_fc2: Tensor<T>,
}

/// All trainable tensors of a model. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub config: ModelConfig,
    /// `[semantic vocab, d]`
    pub token_embed: Tensor<T>,
    /// `K x [group vocab, d / K]`
    pub group_embed: Vec<Tensor<T>>,
    /// `[context, d]`
    pub pos_embed: Tensor<T>,
    pub layers: Vec<Layer<T>>,
    pub lnf_gain: Tensor<T>,
    pub lnf_bias: Tensor<T>,
    /// per head `[d, head vocab]`
    pub head_w: Vec<Tensor<T>>,
    pub head_b: Vec<Tensor<T>>,
}

impl<T: Real> Params<T> {
    /// Zero-filled tensors with layer-norm gains at one.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let ff = config.d_ff;
        let hv = config.head_vocab();
        let layer = || Layer {
            ln1_gain: Tensor::filled(&[d], T::one()),
            ln1_bias: Tensor::zeros(&[d]),
            w_qkv: Tensor::zeros(&[d, 3 * d]),
            b_qkv: Tensor::zeros(&[3 * d]),
            w_out: Tensor::zeros(&[d, d]),
            b_out: Tensor::zeros(&[d]),
            ln2_gain: Tensor::filled(&[d], T::one()),
            ln2_bias: Tensor::zeros(&[d]),
            w_fc1: Tensor::zeros(&[d, ff]),
            b_fc1: Tensor::zeros(&[ff]),
            w_fc2: Tensor::zeros(&[ff, d]),
            b_fc2: Tensor::zeros(&[d]),
        };
        let group_vocab = config.group_codebook + 1;
        Params {
            config: config.clone(),
            token_embed: Tensor::zeros(&[config.semantic_vocab.size(), d]),
            group_embed: (0..config.acoustic_groups)
                .map(|_| Tensor::zeros(&[group_vocab, config.group_embed_dim()]))
                .collect(),
            pos_embed: Tensor::zeros(&[config.context_len, d]),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            lnf_gain: Tensor::filled(&[d], T::one()),
            lnf_bias: Tensor::zeros(&[d]),
            head_w: (0..config.n_output_heads)
                .map(|_| Tensor::zeros(&[d, hv]))
                .collect(),
            head_b: (0..config.n_output_heads)
                .map(|_| Tensor::zeros(&[hv]))
                .collect(),
        }
    }

    /// Normal initialization of all matrices and embeddings; biases zero.
    /// With [`PosInit::Sinusoidal`] the (still learned) position table
    /// starts from sinusoids of the same per-coordinate variance.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut p = Params::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = config.init_std;
        for (_, t) in p.tensors_mut() {
            if t.shape.len() == 2 {
                *t = Tensor::normal(&t.shape.clone(), std, &mut rng);
            }
        }
        if config.pos_init == PosInit::Sinusoidal {
            let d = config.d_model;
            let amp = std * std::f64::consts::SQRT_2;
            for pos in 0..config.context_len {
                let row = p.pos_embed.row_mut(pos);
                for i in 0..d / 2 {
                    let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
                    row[2 * i] = T::lit(amp * angle.sin());
                    row[2 * i + 1] = T::lit(amp * angle.cos());
                }
            }
        }
        p
    }

    /// A gradient accumulator: every tensor zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = T::zero());
        }
        z
    }

    /// Named tensors in a fixed order shared by every traversal.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![("token_embed".into(), &self.token_embed)];
        for (g, t) in self.group_embed.iter().enumerate() {
            out.push((format!("group_embed.{g}"), t));
        }
        out.push(("pos_embed".into(), &self.pos_embed));
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.extend([
                (p("ln1_gain"), &layer.ln1_gain),
                (p("ln1_bias"), &layer.ln1_bias),
                (p("w_qkv"), &layer.w_qkv),
                (p("b_qkv"), &layer.b_qkv),
                (p("w_out"), &layer.w_out),
                (p("b_out"), &layer.b_out),
                (p("ln2_gain"), &layer.ln2_gain),
                (p("ln2_bias"), &layer.ln2_bias),
                (p("w_fc1"), &layer.w_fc1),
                (p("b_fc1"), &layer.b_fc1),
                (p("w_fc2"), &layer.w_fc2),
                (p("b_fc2"), &layer.b_fc2),
            ]);
        }
        out.push(("lnf_gain".into(), &self.lnf_gain));
        out.push(("lnf_bias".into(), &self.lnf_bias));
        for (h, (w, b)) in self.head_w.iter().zip(&self.head_b).enumerate() {
            out.push((format!("heads.{h}.weight"), w));
            out.push((format!("heads.{h}.bias"), b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> =
            vec![("token_embed".into(), &mut self.token_embed)];
        for (g, t) in self.group_embed.iter_mut().enumerate() {
            out.push((format!("group_embed.{g}"), t));
        }
        out.push(("pos_embed".into(), &mut self.pos_embed));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.extend([
                (p("ln1_gain"), &mut layer.ln1_gain),
                (p("ln1_bias"), &mut layer.ln1_bias),
                (p("w_qkv"), &mut layer.w_qkv),
                (p("b_qkv"), &mut layer.b_qkv),
                (p("w_out"), &mut layer.w_out),
                (p("b_out"), &mut layer.b_out),
                (p("ln2_gain"), &mut layer.ln2_gain),
                (p("ln2_bias"), &mut layer.ln2_bias),
                (p("w_fc1"), &mut layer.w_fc1),
                (p("b_fc1"), &mut layer.b_fc1),
                (p("w_fc2"), &mut layer.w_fc2),
                (p("b_fc2"), &mut layer.b_fc2),
            ]);
        }
        out.push(("lnf_gain".into(), &mut self.lnf_gain));
        out.push(("lnf_bias".into(), &mut self.lnf_bias));
        for (h, (w, b)) in self.head_w.iter_mut().zip(self.head_b.iter_mut()).enumerate() {
            out.push((format!("heads.{h}.weight"), w));
            out.push((format!("heads.{h}.bias"), b));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            config: self.config.clone(),
            token_embed: self.token_embed.cast(),
            group_embed: self.group_embed.iter().map(Tensor::cast).collect(),
            pos_embed: self.pos_embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    w_qkv: l.w_qkv.cast(),
                    b_qkv: l.b_qkv.cast(),
                    w_out: l.w_out.cast(),
                    b_out: l.b_out.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                    w_fc1: l.w_fc1.cast(),
                    b_fc1: l.b_fc1.cast(),
                    w_fc2: l.w_fc2.cast(),
                    b_fc2: l.b_fc2.cast(),
                })
                .collect(),
            lnf_gain: self.lnf_gain.cast(),
            lnf_bias: self.lnf_bias.cast(),
            head_w: self.head_w.iter().map(Tensor::cast).collect(),
            head_b: self.head_b.iter().map(Tensor::cast).collect(),
        }
    }

    /// Sum of squares over every tensor.
    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|x| {
                let v = x.to_f64().unwrap();
                v * v
            })
            .sum()
    }
}
