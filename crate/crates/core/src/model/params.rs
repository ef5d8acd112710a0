use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{InitScheme, ModelConfig};
use super::tensor::Tensor;

/// Walks every tensor with its canonical dotted name.
pub trait Visit {
    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, name: &str, f: &mut dyn FnMut(String, &'a mut Tensor));
}

fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_owned()
    } else {
        format!("{prefix}.{field}")
    }
}

impl Visit for Tensor {
    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(name.to_owned(), self)
    }
    fn visit_mut<'a>(&'a mut self, name: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(name.to_owned(), self)
    }
}

impl<T: Visit> Visit for Vec<T> {
    fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(name, &i.to_string()), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, name: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(name, &i.to_string()), f);
        }
    }
}

macro_rules! impl_visit {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl Visit for $ty {
            fn visit<'a>(&'a self, name: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
                $( self.$field.visit(&join(name, stringify!($field)), f); )*
            }
            fn visit_mut<'a>(&'a mut self, name: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
                $( self.$field.visit_mut(&join(name, stringify!($field)), f); )*
            }
        }
    };
}

/// `y = x · weight + bias`, weight stored `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub expand: Linear,
    pub contract: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub self_attn: Attention,
    pub self_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

/// One layer of the decoder stack. The same storage serves the
/// bidirectional decode path and the causal review path.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub self_norm: LayerNorm,
    pub cross_attn: Attention,
    pub cross_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderPath {
    Decode,
    Review,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    /// Shared source/target input embedding `[V × d]`.
    pub embedding: Tensor,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    /// W1, `[d × V]`.
    pub token_head: Tensor,
    /// W2, `[d × 1]`.
    pub review_head: Tensor,
    /// `[d × N]`; class `i` is target length `i + 1`.
    pub length_head: Tensor,
}

impl_visit!(Linear { weight, bias });
impl_visit!(LayerNorm { gain, shift });
impl_visit!(Attention { query, key, value, output });
impl_visit!(FeedForward { expand, contract });
impl_visit!(EncoderLayer { self_attn, self_norm, ffn, ffn_norm });
impl_visit!(DecoderLayer { self_attn, self_norm, cross_attn, cross_norm, ffn, ffn_norm });
impl_visit!(Parameters { embedding, encoder, decoder, token_head, review_head, length_head });

struct Init {
    rng: ChaCha8Rng,
    scheme: InitScheme,
    scale: f64,
}

impl Init {
    fn weight(&mut self, rows: usize, cols: usize) -> Tensor {
        let data = match self.scheme {
            InitScheme::Normal => {
                let normal = Normal::new(0.0, self.scale).expect("positive scale");
                (0..rows * cols).map(|_| normal.sample(&mut self.rng)).collect()
            }
            InitScheme::Uniform => (0..rows * cols)
                .map(|_| self.rng.random_range(-self.scale..self.scale))
                .collect(),
        };
        Tensor::from_vec(rows, cols, data)
    }

    fn linear(&mut self, input: usize, output: usize) -> Linear {
        Linear {
            weight: self.weight(input, output),
            bias: Tensor::zeros(1, output),
        }
    }

    fn norm(d: usize) -> LayerNorm {
        LayerNorm {
            gain: Tensor::from_vec(1, d, vec![1.0; d]),
            shift: Tensor::zeros(1, d),
        }
    }

    fn attention(&mut self, d: usize) -> Attention {
        Attention {
            query: self.linear(d, d),
            key: self.linear(d, d),
            value: self.linear(d, d),
            output: self.linear(d, d),
        }
    }

    fn ffn(&mut self, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            expand: self.linear(d, hidden),
            contract: self.linear(hidden, d),
        }
    }
}

impl Parameters {
    /// Random weights, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let d = config.model_dim;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            scheme: config.init,
            scale: config.init_scale,
        };
        let embedding = init.weight(config.vocab_size, d);
        let encoder = (0..config.layers)
            .map(|_| EncoderLayer {
                self_attn: init.attention(d),
                self_norm: Init::norm(d),
                ffn: init.ffn(d, config.ffn_dim),
                ffn_norm: Init::norm(d),
            })
            .collect();
        let decoder = (0..config.layers)
            .map(|_| DecoderLayer {
                self_attn: init.attention(d),
                self_norm: Init::norm(d),
                cross_attn: init.attention(d),
                cross_norm: Init::norm(d),
                ffn: init.ffn(d, config.ffn_dim),
                ffn_norm: Init::norm(d),
            })
            .collect();
        Self {
            embedding,
            encoder,
            decoder,
            token_head: init.weight(d, config.vocab_size),
            review_head: init.weight(d, 1),
            length_head: init.weight(d, config.max_target_len),
        }
    }

    /// The decoder layer stack used by `path`. Both paths resolve to the
    /// same storage.
    pub fn decoder_layers(&self, path: DecoderPath) -> &[DecoderLayer] {
        match path {
            DecoderPath::Decode | DecoderPath::Review => &self.decoder,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, t| t.fill(0.0));
        z
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, t| out.push((n, t)));
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.named_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Parameters) {
        let theirs = other.named();
        for ((_, mine), (_, t)) in self.named_mut().into_iter().zip(theirs) {
            mine.add_assign(t);
        }
    }
}
