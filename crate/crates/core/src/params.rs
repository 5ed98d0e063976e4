//! Parameter containers, generic over what each slot holds.
//!
//! The same layout carries owned tensors ([`ModelParams`]), graph handles
//! during a forward pass, and gradients or optimizer moments. Slot names
//! follow `encoder.{n}.self_attn.w_q` and are visited in one fixed order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Per-layer attention projections, heads stacked along rows (`w_q`, `w_k`,
/// `w_v`: `[d_x, d]`) or columns (`w_o`: `[d, d_v]`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
}

/// `W_2 · ReLU(W_1 x + b_1) + b_2`, stored as `[d_hidden, d]`, `[d_hidden]`,
/// `[d, d_hidden]`, `[d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub self_attn: AttentionParams<T>,
    pub norm1: NormParams<T>,
    pub ffn: FfnParams<T>,
    pub norm2: NormParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_attn: AttentionParams<T>,
    pub norm1: NormParams<T>,
    pub cross_attn: AttentionParams<T>,
    pub norm2: NormParams<T>,
    pub ffn: FfnParams<T>,
    pub norm3: NormParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub src_embed: T,
    pub tgt_embed: T,
    pub encoder: Vec<EncoderLayer<T>>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub out_proj: T,
}

pub type ModelParams = Params<Tensor>;

impl<T> AttentionParams<T> {
    fn map<U>(&self, p: &str, f: &mut impl FnMut(&str, &T) -> U) -> AttentionParams<U> {
        AttentionParams {
            w_q: f(&format!("{p}.w_q"), &self.w_q),
            w_k: f(&format!("{p}.w_k"), &self.w_k),
            w_v: f(&format!("{p}.w_v"), &self.w_v),
            w_o: f(&format!("{p}.w_o"), &self.w_o),
        }
    }

    fn slots<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{p}.w_q"), &self.w_q));
        out.push((format!("{p}.w_k"), &self.w_k));
        out.push((format!("{p}.w_v"), &self.w_v));
        out.push((format!("{p}.w_o"), &self.w_o));
    }

    fn slots_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{p}.w_q"), &mut self.w_q));
        out.push((format!("{p}.w_k"), &mut self.w_k));
        out.push((format!("{p}.w_v"), &mut self.w_v));
        out.push((format!("{p}.w_o"), &mut self.w_o));
    }
}

impl<T> FfnParams<T> {
    fn map<U>(&self, p: &str, f: &mut impl FnMut(&str, &T) -> U) -> FfnParams<U> {
        FfnParams {
            w1: f(&format!("{p}.w1"), &self.w1),
            b1: f(&format!("{p}.b1"), &self.b1),
            w2: f(&format!("{p}.w2"), &self.w2),
            b2: f(&format!("{p}.b2"), &self.b2),
        }
    }

    fn slots<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{p}.w1"), &self.w1));
        out.push((format!("{p}.b1"), &self.b1));
        out.push((format!("{p}.w2"), &self.w2));
        out.push((format!("{p}.b2"), &self.b2));
    }

    fn slots_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{p}.w1"), &mut self.w1));
        out.push((format!("{p}.b1"), &mut self.b1));
        out.push((format!("{p}.w2"), &mut self.w2));
        out.push((format!("{p}.b2"), &mut self.b2));
    }
}

impl<T> NormParams<T> {
    fn map<U>(&self, p: &str, f: &mut impl FnMut(&str, &T) -> U) -> NormParams<U> {
        NormParams {
            gain: f(&format!("{p}.gain"), &self.gain),
            bias: f(&format!("{p}.bias"), &self.bias),
        }
    }

    fn slots<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{p}.gain"), &self.gain));
        out.push((format!("{p}.bias"), &self.bias));
    }

    fn slots_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{p}.gain"), &mut self.gain));
        out.push((format!("{p}.bias"), &mut self.bias));
    }
}

impl<T> Params<T> {
    /// Applies `f` to every slot in canonical order, keeping the layout.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        let f = &mut f;
        let src_embed = f("src_embed", &self.src_embed);
        let tgt_embed = f("tgt_embed", &self.tgt_embed);
        let encoder = self
            .encoder
            .iter()
            .enumerate()
            .map(|(n, l)| {
                let p = format!("encoder.{n}");
                EncoderLayer {
                    self_attn: l.self_attn.map(&format!("{p}.self_attn"), f),
                    norm1: l.norm1.map(&format!("{p}.norm1"), f),
                    ffn: l.ffn.map(&format!("{p}.ffn"), f),
                    norm2: l.norm2.map(&format!("{p}.norm2"), f),
                }
            })
            .collect();
        let decoder = self
            .decoder
            .iter()
            .enumerate()
            .map(|(n, l)| {
                let p = format!("decoder.{n}");
                DecoderLayer {
                    self_attn: l.self_attn.map(&format!("{p}.self_attn"), f),
                    norm1: l.norm1.map(&format!("{p}.norm1"), f),
                    cross_attn: l.cross_attn.map(&format!("{p}.cross_attn"), f),
                    norm2: l.norm2.map(&format!("{p}.norm2"), f),
                    ffn: l.ffn.map(&format!("{p}.ffn"), f),
                    norm3: l.norm3.map(&format!("{p}.norm3"), f),
                }
            })
            .collect();
        let out_proj = f("out_proj", &self.out_proj);
        Params {
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            out_proj,
        }
    }

    /// Every slot with its name, in the same order as [`Params::map`].
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        out.push(("src_embed".to_string(), &self.src_embed));
        out.push(("tgt_embed".to_string(), &self.tgt_embed));
        for (n, l) in self.encoder.iter().enumerate() {
            let p = format!("encoder.{n}");
            l.self_attn.slots(&format!("{p}.self_attn"), &mut out);
            l.norm1.slots(&format!("{p}.norm1"), &mut out);
            l.ffn.slots(&format!("{p}.ffn"), &mut out);
            l.norm2.slots(&format!("{p}.norm2"), &mut out);
        }
        for (n, l) in self.decoder.iter().enumerate() {
            let p = format!("decoder.{n}");
            l.self_attn.slots(&format!("{p}.self_attn"), &mut out);
            l.norm1.slots(&format!("{p}.norm1"), &mut out);
            l.cross_attn.slots(&format!("{p}.cross_attn"), &mut out);
            l.norm2.slots(&format!("{p}.norm2"), &mut out);
            l.ffn.slots(&format!("{p}.ffn"), &mut out);
            l.norm3.slots(&format!("{p}.norm3"), &mut out);
        }
        out.push(("out_proj".to_string(), &self.out_proj));
        out
    }

    /// Rebuilds a container with this layout from slots in canonical order.
    pub fn rebuild<U>(&self, values: Vec<U>) -> Result<Params<U>> {
        let expected = self.named().len();
        if values.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} parameter slots, got {}",
                values.len()
            )));
        }
        let mut it = values.into_iter();
        Ok(self.map(|_, _| it.next().expect("length checked")))
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        out.push(("src_embed".to_string(), &mut self.src_embed));
        out.push(("tgt_embed".to_string(), &mut self.tgt_embed));
        for (n, l) in self.encoder.iter_mut().enumerate() {
            let p = format!("encoder.{n}");
            l.self_attn.slots_mut(&format!("{p}.self_attn"), &mut out);
            l.norm1.slots_mut(&format!("{p}.norm1"), &mut out);
            l.ffn.slots_mut(&format!("{p}.ffn"), &mut out);
            l.norm2.slots_mut(&format!("{p}.norm2"), &mut out);
        }
        for (n, l) in self.decoder.iter_mut().enumerate() {
            let p = format!("decoder.{n}");
            l.self_attn.slots_mut(&format!("{p}.self_attn"), &mut out);
            l.norm1.slots_mut(&format!("{p}.norm1"), &mut out);
            l.cross_attn.slots_mut(&format!("{p}.cross_attn"), &mut out);
            l.norm2.slots_mut(&format!("{p}.norm2"), &mut out);
            l.ffn.slots_mut(&format!("{p}.ffn"), &mut out);
            l.norm3.slots_mut(&format!("{p}.norm3"), &mut out);
        }
        out.push(("out_proj".to_string(), &mut self.out_proj));
        out
    }
}

impl Params<Vec<usize>> {
    /// The shape of every slot for `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> Self {
        let d = cfg.d;
        let attn = || AttentionParams {
            w_q: vec![cfg.d_q, d],
            w_k: vec![cfg.d_k, d],
            w_v: vec![cfg.d_v, d],
            w_o: vec![d, cfg.d_v],
        };
        let norm = || NormParams {
            gain: vec![d],
            bias: vec![d],
        };
        let ffn = || FfnParams {
            w1: vec![cfg.d_hidden, d],
            b1: vec![cfg.d_hidden],
            w2: vec![d, cfg.d_hidden],
            b2: vec![d],
        };
        Params {
            src_embed: vec![cfg.src_vocab, d],
            tgt_embed: vec![cfg.tgt_vocab, d],
            encoder: (0..cfg.enc_layers)
                .map(|_| EncoderLayer {
                    self_attn: attn(),
                    norm1: norm(),
                    ffn: ffn(),
                    norm2: norm(),
                })
                .collect(),
            decoder: (0..cfg.dec_layers)
                .map(|_| DecoderLayer {
                    self_attn: attn(),
                    norm1: norm(),
                    cross_attn: attn(),
                    norm2: norm(),
                    ffn: ffn(),
                    norm3: norm(),
                })
                .collect(),
            out_proj: vec![cfg.tgt_vocab, d],
        }
    }
}

impl ModelParams {
    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero,
    /// normalization gains one. Slots are drawn in canonical order from a
    /// single ChaCha8 stream seeded with `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Params::shapes(cfg).map(|name, shape| {
            if name.ends_with(".gain") {
                Tensor::full(shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::uniform(shape, bound, &mut rng)
            }
        }))
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks every slot against the shapes `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Params::shapes(cfg);
        let (ours, theirs) = (self.named(), expected.named());
        if ours.len() != theirs.len() {
            return Err(Error::invalid(format!(
                "parameter layout has {} slots, config implies {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((name, t), (_, shape)) in ours.iter().zip(theirs) {
            if t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind<'g>(&self, g: &'g Graph) -> Params<Var<'g>> {
        self.map(|_, t| g.param(t.clone()))
    }

    /// Registers every tensor as a constant of `g` (no gradients).
    pub fn bind_frozen<'g>(&self, g: &'g Graph) -> Params<Var<'g>> {
        self.map(|_, t| g.constant(t.clone()))
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }
}

impl<'g> Params<Var<'g>> {
    /// Gradients accumulated on the bound leaves (zeros where none arrived).
    pub fn grads(&self) -> ModelParams {
        self.map(|_, v| {
            v.graph()
                .grad(*v)
                .unwrap_or_else(|| Tensor::zeros(&v.shape()))
        })
    }
}
