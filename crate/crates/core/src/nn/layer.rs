//! Layer kinds of the decoder and adapter, usable standalone (for
//! verification) and as composite functions on parameter slices (used by the
//! model so both go through the same arithmetic).

use super::kernels::{self, Segment};
use super::params::{GradTable, ParamSet};
use super::tensor::{Float, Tensor};
use crate::error::{ElmError, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Affine,
    RmsNorm,
    CausalAttention { heads: usize },
    MlpGelu,
    EmbeddingLookup,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Affine => "affine",
            LayerKind::RmsNorm => "rmsnorm",
            LayerKind::CausalAttention { .. } => "causal_attention",
            LayerKind::MlpGelu => "mlp_gelu",
            LayerKind::EmbeddingLookup => "embedding_lookup",
        }
    }
}

/// Intermediates of a two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    pub pre: Vec<T>,
    pub act: Vec<T>,
}

pub struct MlpShape {
    pub din: usize,
    pub hidden: usize,
    pub dout: usize,
}

pub struct MlpParams<'a, T> {
    pub w1: &'a [T],
    pub b1: &'a [T],
    pub w2: &'a [T],
    pub b2: &'a [T],
}

pub struct MlpGrads<'a, T> {
    pub w1: Option<&'a mut [T]>,
    pub b1: Option<&'a mut [T]>,
    pub w2: Option<&'a mut [T]>,
    pub b2: Option<&'a mut [T]>,
}

pub fn mlp_forward<T: Float>(
    x: &[T],
    n: usize,
    s: &MlpShape,
    p: &MlpParams<'_, T>,
    y: &mut [T],
) -> MlpCache<T> {
    let mut pre = vec![T::zero(); n * s.hidden];
    kernels::affine_forward(x, n, s.din, p.w1, s.hidden, Some(p.b1), &mut pre);
    let mut act = vec![T::zero(); n * s.hidden];
    kernels::gelu_forward(&pre, &mut act);
    kernels::affine_forward(&act, n, s.hidden, p.w2, s.dout, Some(p.b2), y);
    MlpCache { pre, act }
}

#[allow(clippy::too_many_arguments)]
pub fn mlp_backward<T: Float>(
    x: &[T],
    n: usize,
    s: &MlpShape,
    p: &MlpParams<'_, T>,
    cache: &MlpCache<T>,
    dy: &[T],
    dx: Option<&mut [T]>,
    g: MlpGrads<'_, T>,
) {
    let mut dact = vec![T::zero(); n * s.hidden];
    kernels::affine_backward(
        &cache.act,
        n,
        s.hidden,
        p.w2,
        s.dout,
        dy,
        Some(&mut dact),
        g.w2,
        g.b2,
    );
    let mut dpre = vec![T::zero(); n * s.hidden];
    kernels::gelu_backward(&cache.pre, &dact, &mut dpre);
    kernels::affine_backward(x, n, s.din, p.w1, s.hidden, &dpre, dx, g.w1, g.b1);
}

/// Intermediates of a causal attention layer. The query/key/value
/// projection carries no bias: a key bias cancels inside the softmax.
#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    pub qkv: Vec<T>,
    pub probs: Vec<T>,
    pub mix: Vec<T>,
}

pub struct AttnParams<'a, T> {
    pub wqkv: &'a [T],
    pub wo: &'a [T],
    pub bo: &'a [T],
}

pub struct AttnGrads<'a, T> {
    pub wqkv: Option<&'a mut [T]>,
    pub wo: Option<&'a mut [T]>,
    pub bo: Option<&'a mut [T]>,
}

pub fn attn_forward<T: Float>(
    x: &[T],
    segments: &[Segment],
    d: usize,
    heads: usize,
    p: &AttnParams<'_, T>,
    y: &mut [T],
) -> AttnCache<T> {
    let n = x.len() / d;
    let mut qkv = vec![T::zero(); n * 3 * d];
    kernels::affine_forward(x, n, d, p.wqkv, 3 * d, None, &mut qkv);
    let mut probs = vec![T::zero(); kernels::attention_probs_len(segments, heads)];
    let mut mix = vec![T::zero(); n * d];
    kernels::attention_forward(&qkv, segments, d, heads, &mut mix, &mut probs);
    kernels::affine_forward(&mix, n, d, p.wo, d, Some(p.bo), y);
    AttnCache { qkv, probs, mix }
}

#[allow(clippy::too_many_arguments)]
pub fn attn_backward<T: Float>(
    x: &[T],
    segments: &[Segment],
    d: usize,
    heads: usize,
    p: &AttnParams<'_, T>,
    cache: &AttnCache<T>,
    dy: &[T],
    dx: &mut [T],
    g: AttnGrads<'_, T>,
) {
    let n = x.len() / d;
    let mut dmix = vec![T::zero(); n * d];
    kernels::affine_backward(&cache.mix, n, d, p.wo, d, dy, Some(&mut dmix), g.wo, g.bo);
    let mut dqkv = vec![T::zero(); n * 3 * d];
    kernels::attention_backward(
        &cache.qkv,
        segments,
        d,
        heads,
        &cache.probs,
        &dmix,
        &mut dqkv,
    );
    kernels::affine_backward(x, n, d, p.wqkv, 3 * d, &dqkv, Some(dx), g.wqkv, None);
}

/// Input of a standalone layer.
#[derive(Debug, Clone, Copy)]
pub enum LayerInput<'a, T> {
    Rows(&'a Tensor<T>),
    Ids(&'a [usize]),
}

#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    None,
    Norm { rstd: Vec<T> },
    Mlp(MlpCache<T>),
    Attn(AttnCache<T>),
}

/// A single layer with its own parameters, named `<name>.<param>`.
#[derive(Debug, Clone)]
pub struct Layer<T> {
    pub kind: LayerKind,
    pub name: String,
    pub params: ParamSet<T>,
    /// Context length bound for attention inputs.
    pub max_positions: usize,
}

fn gaussian<T: Float>(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::cast_from(std * rng.normal())).collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

fn constant<T: Float>(shape: &[usize], v: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, vec![T::cast_from(v); n]).expect("shape product matches")
}

impl<T: Float> Layer<T> {
    fn with(kind: LayerKind, name: &str, params: Vec<(&str, Tensor<T>)>) -> Self {
        let mut set = ParamSet::new();
        for (p, t) in params {
            set.push(format!("{name}.{p}"), t)
                .expect("unique layer param names");
        }
        Layer {
            kind,
            name: name.to_string(),
            params: set,
            max_positions: usize::MAX,
        }
    }

    pub fn affine(name: &str, din: usize, dout: usize, std: f64, rng: &mut SplitMix64) -> Self {
        Self::with(
            LayerKind::Affine,
            name,
            vec![
                ("w", gaussian(&[din, dout], std, rng)),
                ("b", gaussian(&[dout], std, rng)),
            ],
        )
    }

    /// Affine layer with explicit weight (`din × dout`) and bias.
    pub fn affine_from(name: &str, w: Tensor<T>, b: Tensor<T>) -> Self {
        Self::with(LayerKind::Affine, name, vec![("w", w), ("b", b)])
    }

    pub fn rmsnorm(name: &str, d: usize, gain_jitter: f64, rng: &mut SplitMix64) -> Self {
        let mut g = constant::<T>(&[d], 1.0);
        for v in g.data_mut() {
            *v += T::cast_from(gain_jitter * rng.normal());
        }
        Self::with(LayerKind::RmsNorm, name, vec![("g", g)])
    }

    pub fn attention(
        name: &str,
        d: usize,
        heads: usize,
        max_positions: usize,
        std: f64,
        rng: &mut SplitMix64,
    ) -> Self {
        let mut l = Self::with(
            LayerKind::CausalAttention { heads },
            name,
            vec![
                ("wqkv", gaussian(&[d, 3 * d], std, rng)),
                ("wo", gaussian(&[d, d], std, rng)),
                ("bo", gaussian(&[d], std, rng)),
            ],
        );
        l.max_positions = max_positions;
        l
    }

    pub fn mlp(
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
        std: f64,
        rng: &mut SplitMix64,
    ) -> Self {
        Self::with(
            LayerKind::MlpGelu,
            name,
            vec![
                ("w1", gaussian(&[din, hidden], std, rng)),
                ("b1", gaussian(&[hidden], std, rng)),
                ("w2", gaussian(&[hidden, dout], std, rng)),
                ("b2", gaussian(&[dout], std, rng)),
            ],
        )
    }

    pub fn embedding(name: &str, vocab: usize, d: usize, std: f64, rng: &mut SplitMix64) -> Self {
        Self::with(
            LayerKind::EmbeddingLookup,
            name,
            vec![("table", gaussian(&[vocab, d], std, rng))],
        )
    }

    fn p(&self, i: usize) -> &[T] {
        self.params.value(i)
    }

    fn shape(&self, i: usize) -> &[usize] {
        self.params.by_index(i).value.shape()
    }

    fn rows<'a>(&self, input: LayerInput<'a, T>, width: usize) -> Result<&'a Tensor<T>> {
        match input {
            LayerInput::Rows(t) if t.cols() == width => Ok(t),
            LayerInput::Rows(t) => Err(ElmError::config(format!(
                "{} ({}) expects width {width}, got shape {:?}",
                self.name,
                self.kind.name(),
                t.shape()
            ))),
            LayerInput::Ids(_) => Err(ElmError::config(format!(
                "{} ({}) expects real-valued rows, got token ids",
                self.name,
                self.kind.name()
            ))),
        }
    }

    /// Input width and output width.
    pub fn dims(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Affine => (self.shape(0)[0], self.shape(0)[1]),
            LayerKind::RmsNorm => (self.shape(0)[0], self.shape(0)[0]),
            LayerKind::CausalAttention { .. } => (self.shape(1)[0], self.shape(1)[0]),
            LayerKind::MlpGelu => (self.shape(0)[0], self.shape(2)[1]),
            LayerKind::EmbeddingLookup => (self.shape(0)[0], self.shape(0)[1]),
        }
    }

    pub fn forward(&self, input: LayerInput<'_, T>) -> Result<(Tensor<T>, LayerCache<T>)> {
        let (din, dout) = self.dims();
        let (out, cache) = match self.kind {
            LayerKind::Affine => {
                let x = self.rows(input, din)?;
                let n = x.rows();
                let mut y = vec![T::zero(); n * dout];
                kernels::affine_forward(x.data(), n, din, self.p(0), dout, Some(self.p(1)), &mut y);
                (Tensor::from_vec(&[n, dout], y)?, LayerCache::None)
            }
            LayerKind::RmsNorm => {
                let x = self.rows(input, din)?;
                let n = x.rows();
                let mut y = vec![T::zero(); n * din];
                let mut rstd = vec![T::zero(); n];
                kernels::rmsnorm_forward(x.data(), n, din, self.p(0), &mut y, &mut rstd);
                (Tensor::from_vec(&[n, din], y)?, LayerCache::Norm { rstd })
            }
            LayerKind::MlpGelu => {
                let x = self.rows(input, din)?;
                let n = x.rows();
                let mut y = vec![T::zero(); n * dout];
                let cache = mlp_forward(x.data(), n, &self.mlp_shape(), &self.mlp_params(), &mut y);
                (Tensor::from_vec(&[n, dout], y)?, LayerCache::Mlp(cache))
            }
            LayerKind::CausalAttention { heads } => {
                let x = self.rows(input, din)?;
                let n = x.rows();
                if n > self.max_positions {
                    return Err(ElmError::config(format!(
                        "{}: {n} positions exceed context length {}",
                        self.name, self.max_positions
                    )));
                }
                if din % heads != 0 {
                    return Err(ElmError::config(format!(
                        "{}: width {din} not divisible by {heads} heads",
                        self.name
                    )));
                }
                let mut y = vec![T::zero(); n * din];
                let seg = [Segment { start: 0, len: n }];
                let cache = attn_forward(x.data(), &seg, din, heads, &self.attn_params(), &mut y);
                (Tensor::from_vec(&[n, din], y)?, LayerCache::Attn(cache))
            }
            LayerKind::EmbeddingLookup => {
                let ids = match input {
                    LayerInput::Ids(ids) => ids,
                    LayerInput::Rows(_) => {
                        return Err(ElmError::config(format!(
                            "{} (embedding_lookup) expects token ids",
                            self.name
                        )))
                    }
                };
                let table = &self.params.by_index(0).value;
                let mut y = Vec::with_capacity(ids.len() * dout);
                for &id in ids {
                    if id >= din {
                        return Err(ElmError::data(format!(
                            "{}: token id {id} outside table of {din} rows",
                            self.name
                        )));
                    }
                    y.extend_from_slice(table.row(id));
                }
                (Tensor::from_vec(&[ids.len(), dout], y)?, LayerCache::None)
            }
        };
        out.check_finite(&self.name)?;
        Ok((out, cache))
    }

    fn mlp_shape(&self) -> MlpShape {
        MlpShape {
            din: self.shape(0)[0],
            hidden: self.shape(0)[1],
            dout: self.shape(2)[1],
        }
    }

    fn mlp_params(&self) -> MlpParams<'_, T> {
        MlpParams {
            w1: self.p(0),
            b1: self.p(1),
            w2: self.p(2),
            b2: self.p(3),
        }
    }

    fn attn_params(&self) -> AttnParams<'_, T> {
        AttnParams {
            wqkv: self.p(0),
            wo: self.p(1),
            bo: self.p(2),
        }
    }

    /// Gradients of `sum(dy ⊙ output)` with respect to the input rows (when
    /// the input is real-valued) and every trainable parameter.
    pub fn backward(
        &self,
        input: LayerInput<'_, T>,
        cache: &LayerCache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Option<Tensor<T>>, GradTable<T>)> {
        let (din, dout) = self.dims();
        let mut grads: Vec<Tensor<T>> = self
            .params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        let train: Vec<bool> = self.params.iter().map(|p| p.trainable).collect();
        let dx = match (self.kind, cache) {
            (LayerKind::Affine, _) => {
                let x = self.rows(input, din)?;
                let n = x.rows();
                let mut dx = vec![T::zero(); n * din];
                let (gw, rest) = grads.split_at_mut(1);
                kernels::affine_backward(
                    x.data(),
                    n,
                    din,
                    self.p(0),
                    dout,
                    dy.data(),
                    Some(&mut dx),
                    train[0].then(|| gw[0].data_mut()),
                    train[1].then(|| rest[0].data_mut()),
                );
                Some(Tensor::from_vec(&[n, din], dx)?)
            }
            (LayerKind::RmsNorm, LayerCache::Norm { rstd }) => {
                let x = self.rows(input, din)?;
                let n = x.rows();
                let mut dx = vec![T::zero(); n * din];
                kernels::rmsnorm_backward(
                    x.data(),
                    n,
                    din,
                    self.p(0),
                    rstd,
                    dy.data(),
                    &mut dx,
                    train[0].then(|| grads[0].data_mut()),
                );
                Some(Tensor::from_vec(&[n, din], dx)?)
            }
            (LayerKind::MlpGelu, LayerCache::Mlp(c)) => {
                let x = self.rows(input, din)?;
                let n = x.rows();
                let mut dx = vec![T::zero(); n * din];
                let [g0, g1, g2, g3] = four(&mut grads);
                mlp_backward(
                    x.data(),
                    n,
                    &self.mlp_shape(),
                    &self.mlp_params(),
                    c,
                    dy.data(),
                    Some(&mut dx),
                    MlpGrads {
                        w1: train[0].then(|| g0.data_mut()),
                        b1: train[1].then(|| g1.data_mut()),
                        w2: train[2].then(|| g2.data_mut()),
                        b2: train[3].then(|| g3.data_mut()),
                    },
                );
                Some(Tensor::from_vec(&[n, din], dx)?)
            }
            (LayerKind::CausalAttention { heads }, LayerCache::Attn(c)) => {
                let x = self.rows(input, din)?;
                let n = x.rows();
                let mut dx = vec![T::zero(); n * din];
                let seg = [Segment { start: 0, len: n }];
                let [g0, g1, g2] = three(&mut grads);
                attn_backward(
                    x.data(),
                    &seg,
                    din,
                    heads,
                    &self.attn_params(),
                    c,
                    dy.data(),
                    &mut dx,
                    AttnGrads {
                        wqkv: train[0].then(|| g0.data_mut()),
                        wo: train[1].then(|| g1.data_mut()),
                        bo: train[2].then(|| g2.data_mut()),
                    },
                );
                Some(Tensor::from_vec(&[n, din], dx)?)
            }
            (LayerKind::EmbeddingLookup, _) => {
                if let LayerInput::Ids(ids) = input {
                    if train[0] {
                        for (r, &id) in ids.iter().enumerate() {
                            let row = &dy.data()[r * dout..(r + 1) * dout];
                            for (g, &v) in grads[0].row_mut(id).iter_mut().zip(row) {
                                *g += v;
                            }
                        }
                    }
                }
                None
            }
            _ => {
                return Err(ElmError::config(format!(
                    "{}: cache does not match layer",
                    self.name
                )))
            }
        };
        Ok((dx, GradTable::from_aligned(&self.params, grads)))
    }
}

fn three<T>(v: &mut [Tensor<T>]) -> [&mut Tensor<T>; 3] {
    let (a, rest) = v.split_at_mut(1);
    let (b, c) = rest.split_at_mut(1);
    [&mut a[0], &mut b[0], &mut c[0]]
}

fn four<T>(v: &mut [Tensor<T>]) -> [&mut Tensor<T>; 4] {
    let (a, rest) = v.split_at_mut(1);
    let (b, rest) = rest.split_at_mut(1);
    let (c, d) = rest.split_at_mut(1);
    [&mut a[0], &mut b[0], &mut c[0], &mut d[0]]
}

/// Applies a layer of `kind` held in `layer` to `input`.
pub fn apply_layer<T: Float>(layer: &Layer<T>, input: LayerInput<'_, T>) -> Result<Tensor<T>> {
    layer.forward(input).map(|(y, _)| y)
}
