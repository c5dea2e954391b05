use serde::{Deserialize, Serialize};

use super::mixed::{Element, MixedSequence};
use crate::embed::SpaceKind;
use crate::error::{ElmError, Result};
use crate::nn::kernels::{self, Segment};
use crate::nn::layer::{
    attn_backward, attn_forward, mlp_backward, mlp_forward, AttnCache, AttnGrads, AttnParams,
    MlpCache, MlpGrads, MlpParams, MlpShape,
};
use crate::nn::{Float, GradTable, ParamSet, Tensor};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub space: SpaceKind,
    pub input_dim: usize,
    pub output_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Maximum sequence length.
    pub context: usize,
    pub ff_hidden: usize,
    pub adapter_hidden: usize,
    pub adapters: Vec<AdapterConfig>,
}

impl ElmConfig {
    /// Default desk-scale shape with a semantic (64-d) and a behavioral
    /// (16-d) adapter.
    pub fn desk(vocab_size: usize) -> Self {
        ElmConfig {
            vocab_size,
            d_model: 64,
            layers: 2,
            heads: 4,
            context: 128,
            ff_hidden: 128,
            adapter_hidden: 128,
            adapters: vec![
                AdapterConfig {
                    space: SpaceKind::Semantic,
                    input_dim: 64,
                    output_dim: 64,
                },
                AdapterConfig {
                    space: SpaceKind::Behavioral,
                    input_dim: 16,
                    output_dim: 64,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("context", self.context),
            ("ff_hidden", self.ff_hidden),
            ("adapter_hidden", self.adapter_hidden),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ElmError::config(format!("model {k} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ElmError::config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        for (i, a) in self.adapters.iter().enumerate() {
            if a.output_dim != self.d_model {
                return Err(ElmError::config(format!(
                    "{} adapter emits {} dims but token embeddings have {}",
                    a.space, a.output_dim, self.d_model
                )));
            }
            if a.input_dim == 0 {
                return Err(ElmError::config("adapter input_dim must be positive"));
            }
            if self.adapters[..i].iter().any(|b| b.space == a.space) {
                return Err(ElmError::config(format!(
                    "two adapters for space {}",
                    a.space
                )));
            }
        }
        Ok(())
    }

    fn same_base_shape(&self, other: &ElmConfig) -> bool {
        (
            self.vocab_size,
            self.d_model,
            self.layers,
            self.heads,
            self.context,
            self.ff_hidden,
        ) == (
            other.vocab_size,
            other.d_model,
            other.layers,
            other.heads,
            other.context,
            other.ff_hidden,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIdx {
    norm1: usize,
    wqkv: usize,
    wo: usize,
    bo: usize,
    norm2: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct ParamIdx {
    tok: usize,
    adapters: Vec<[usize; 4]>,
    pos: usize,
    blocks: Vec<BlockIdx>,
    norm_f: usize,
    head_w: usize,
    head_b: usize,
}

/// Token embeddings `e0.*`, one adapter MLP per space `adapter.<space>.*`,
/// and the causal decoder with its output head `m0.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElmModel<T> {
    config: ElmConfig,
    params: ParamSet<T>,
    idx: ParamIdx,
}

pub const TOKEN_PREFIX: &str = "e0.";
pub const ADAPTER_PREFIX: &str = "adapter.";
pub const DECODER_PREFIX: &str = "m0.";

fn param_shapes(c: &ElmConfig) -> Vec<(String, Vec<usize>)> {
    let (d, v) = (c.d_model, c.vocab_size);
    let mut out = vec![("e0.tok".to_string(), vec![v, d])];
    for a in &c.adapters {
        let p = format!("adapter.{}", a.space);
        out.push((format!("{p}.w1"), vec![a.input_dim, c.adapter_hidden]));
        out.push((format!("{p}.b1"), vec![c.adapter_hidden]));
        out.push((format!("{p}.w2"), vec![c.adapter_hidden, a.output_dim]));
        out.push((format!("{p}.b2"), vec![a.output_dim]));
    }
    out.push(("m0.pos".into(), vec![c.context, d]));
    for l in 0..c.layers {
        let p = format!("m0.block{l}");
        out.push((format!("{p}.norm1.g"), vec![d]));
        out.push((format!("{p}.attn.wqkv"), vec![d, 3 * d]));
        out.push((format!("{p}.attn.wo"), vec![d, d]));
        out.push((format!("{p}.attn.bo"), vec![d]));
        out.push((format!("{p}.norm2.g"), vec![d]));
        out.push((format!("{p}.mlp.w1"), vec![d, c.ff_hidden]));
        out.push((format!("{p}.mlp.b1"), vec![c.ff_hidden]));
        out.push((format!("{p}.mlp.w2"), vec![c.ff_hidden, d]));
        out.push((format!("{p}.mlp.b2"), vec![d]));
    }
    out.push(("m0.norm_f.g".into(), vec![d]));
    out.push(("m0.head.w".into(), vec![d, v]));
    out.push(("m0.head.b".into(), vec![v]));
    out
}

/// Initial value of a parameter by name: gains 1, biases 0, embeddings and
/// adapter weights `N(0, 0.02²)`, other weights `N(0, 1/fan_in)` with the
/// residual output projections scaled down by `sqrt(2·layers)`.
fn init_value(name: &str, shape: &[usize], layers: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let std = if name.ends_with(".g") {
        return vec![1.0; n];
    } else if shape.len() == 1 {
        return vec![0.0; n];
    } else if name.starts_with(ADAPTER_PREFIX) || name == "e0.tok" || name == "m0.pos" {
        0.02
    } else {
        let s = 1.0 / (shape[0] as f64).sqrt();
        if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
            s / ((2 * layers) as f64).sqrt()
        } else {
            s
        }
    };
    (0..n).map(|_| std * rng.normal()).collect()
}

/// Intermediates of one decoder block.
#[derive(Debug, Clone)]
struct BlockCache<T> {
    x: Vec<T>,
    n1: Vec<T>,
    rstd1: Vec<T>,
    attn: AttnCache<T>,
    h: Vec<T>,
    n2: Vec<T>,
    rstd2: Vec<T>,
    mlp: MlpCache<T>,
}

#[derive(Debug, Clone)]
struct AdapterBatch<T> {
    rows: Vec<usize>,
    inputs: Vec<T>,
    cache: MlpCache<T>,
}

/// Everything [`ElmModel::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    segments: Vec<Segment>,
    positions: Vec<usize>,
    token_rows: Vec<(usize, usize)>,
    adapters: Vec<AdapterBatch<T>>,
    blocks: Vec<BlockCache<T>>,
    x_final: Vec<T>,
    nf: Vec<T>,
    rstd_f: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }
}

/// Mutable views of the gradient buffers at `ids`, in that order.
fn slots<'a, T, const N: usize>(
    grads: &'a mut [Option<Vec<T>>],
    ids: [usize; N],
) -> [Option<&'a mut [T]>; N] {
    let mut out: [Option<&'a mut [T]>; N] = std::array::from_fn(|_| None);
    for (i, g) in grads.iter_mut().enumerate() {
        if let Some(k) = ids.iter().position(|&j| j == i) {
            out[k] = g.as_deref_mut();
        }
    }
    out
}

fn add_into<T: Float>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

impl<T: Float> ElmModel<T> {
    /// Fresh model. With `base`, token embeddings and decoder are copied
    /// from it and only the adapters are newly drawn.
    pub fn init(config: ElmConfig, seed: u64, base: Option<&ElmModel<T>>) -> Result<Self> {
        config.validate()?;
        if let Some(b) = base {
            if !config.same_base_shape(&b.config) {
                return Err(ElmError::config(
                    "base model shape differs from the requested configuration",
                ));
            }
        }
        let mut params = ParamSet::new();
        let mut e0_rng = SplitMix64::stream(seed, "elm/e0");
        let mut m0_rng = SplitMix64::stream(seed, "elm/m0");
        for (name, shape) in param_shapes(&config) {
            let copied = base
                .filter(|_| !name.starts_with(ADAPTER_PREFIX))
                .and_then(|b| b.params.get(&name))
                .map(|p| p.value.clone());
            let value = match copied {
                Some(v) => v,
                None => {
                    let mut adapter_rng;
                    let rng = if name.starts_with(ADAPTER_PREFIX) {
                        adapter_rng = SplitMix64::stream(seed, &format!("elm/{name}"));
                        &mut adapter_rng
                    } else if name.starts_with(TOKEN_PREFIX) {
                        &mut e0_rng
                    } else {
                        &mut m0_rng
                    };
                    Tensor::from_f64(&shape, &init_value(&name, &shape, config.layers, rng))?
                }
            };
            params.push(name, value)?;
        }
        Self::from_parts(config, params)
    }

    /// Assembles a model from a parameter set, checking names and shapes.
    pub fn from_parts(config: ElmConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if shapes.len() != params.len() {
            return Err(ElmError::format(format!(
                "expected {} parameters, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(params.iter()) {
            if name != &p.name || shape.as_slice() != p.value.shape() {
                return Err(ElmError::format(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    shape
                )));
            }
        }
        let at = |n: &str| params.index_of(n).expect("checked above");
        let idx = ParamIdx {
            tok: at("e0.tok"),
            adapters: config
                .adapters
                .iter()
                .map(|a| {
                    let p = format!("adapter.{}", a.space);
                    ["w1", "b1", "w2", "b2"].map(|s| at(&format!("{p}.{s}")))
                })
                .collect(),
            pos: at("m0.pos"),
            blocks: (0..config.layers)
                .map(|l| {
                    let p = format!("m0.block{l}");
                    BlockIdx {
                        norm1: at(&format!("{p}.norm1.g")),
                        wqkv: at(&format!("{p}.attn.wqkv")),
                        wo: at(&format!("{p}.attn.wo")),
                        bo: at(&format!("{p}.attn.bo")),
                        norm2: at(&format!("{p}.norm2.g")),
                        w1: at(&format!("{p}.mlp.w1")),
                        b1: at(&format!("{p}.mlp.b1")),
                        w2: at(&format!("{p}.mlp.w2")),
                        b2: at(&format!("{p}.mlp.b2")),
                    }
                })
                .collect(),
            norm_f: at("m0.norm_f.g"),
            head_w: at("m0.head.w"),
            head_b: at("m0.head.b"),
        };
        Ok(ElmModel {
            config,
            params,
            idx,
        })
    }

    pub fn config(&self) -> &ElmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn cast<U: Float>(&self) -> ElmModel<U> {
        ElmModel {
            config: self.config.clone(),
            params: self.params.cast(),
            idx: self.idx.clone(),
        }
    }

    fn adapter_index(&self, space: SpaceKind) -> Result<usize> {
        self.config
            .adapters
            .iter()
            .position(|a| a.space == space)
            .ok_or_else(|| ElmError::config(format!("model has no {space} adapter")))
    }

    fn mlp_shape(&self, a: usize) -> MlpShape {
        let c = &self.config.adapters[a];
        MlpShape {
            din: c.input_dim,
            hidden: self.config.adapter_hidden,
            dout: c.output_dim,
        }
    }

    fn mlp_params(&self, ids: [usize; 4]) -> MlpParams<'_, T> {
        let p = &self.params;
        MlpParams {
            w1: p.value(ids[0]),
            b1: p.value(ids[1]),
            w2: p.value(ids[2]),
            b2: p.value(ids[3]),
        }
    }

    fn embed_packed(&self, seqs: &[MixedSequence]) -> Result<(Vec<T>, ForwardCache<T>)> {
        let d = self.config.d_model;
        let n: usize = seqs.iter().map(MixedSequence::len).sum();
        let mut x = vec![T::zero(); n * d];
        let mut segments = Vec::with_capacity(seqs.len());
        let mut positions = Vec::with_capacity(n);
        let mut token_rows = Vec::new();
        let mut adapters: Vec<AdapterBatch<T>> = self
            .config
            .adapters
            .iter()
            .map(|_| AdapterBatch {
                rows: Vec::new(),
                inputs: Vec::new(),
                cache: MlpCache {
                    pre: Vec::new(),
                    act: Vec::new(),
                },
            })
            .collect();
        let tok = self.params.value(self.idx.tok);
        let mut row = 0;
        for seq in seqs {
            if seq.is_empty() {
                return Err(ElmError::config("empty input sequence"));
            }
            if seq.len() > self.config.context {
                return Err(ElmError::config(format!(
                    "sequence of {} positions exceeds context {}",
                    seq.len(),
                    self.config.context
                )));
            }
            segments.push(Segment {
                start: row,
                len: seq.len(),
            });
            for (p, el) in seq.elements.iter().enumerate() {
                positions.push(p);
                match el {
                    Element::Token(id) => {
                        if *id >= self.config.vocab_size {
                            return Err(ElmError::data(format!(
                                "token id {id} outside vocab of {}",
                                self.config.vocab_size
                            )));
                        }
                        x[row * d..(row + 1) * d].copy_from_slice(&tok[id * d..(id + 1) * d]);
                        token_rows.push((row, *id));
                    }
                    Element::Embed { vector, space } => {
                        let a = self.adapter_index(*space)?;
                        let want = self.config.adapters[a].input_dim;
                        if vector.len() != want {
                            return Err(ElmError::config(format!(
                                "{space} embedding has {} dims, adapter expects {want}",
                                vector.len()
                            )));
                        }
                        adapters[a].rows.push(row);
                        adapters[a]
                            .inputs
                            .extend(vector.iter().map(|&v| T::cast_from(v)));
                    }
                }
                row += 1;
            }
        }
        for (a, batch) in adapters.iter_mut().enumerate() {
            let m = batch.rows.len();
            if m == 0 {
                continue;
            }
            let mut y = vec![T::zero(); m * d];
            let shape = self.mlp_shape(a);
            batch.cache = mlp_forward(
                &batch.inputs,
                m,
                &shape,
                &self.mlp_params(self.idx.adapters[a]),
                &mut y,
            );
            for (k, &r) in batch.rows.iter().enumerate() {
                x[r * d..(r + 1) * d].copy_from_slice(&y[k * d..(k + 1) * d]);
            }
        }
        let cache = ForwardCache {
            segments,
            positions,
            token_rows,
            adapters,
            blocks: Vec::new(),
            x_final: Vec::new(),
            nf: Vec::new(),
            rstd_f: Vec::new(),
        };
        Ok((x, cache))
    }

    /// Input rows (`positions × d`) of one sequence: token rows are E0
    /// lookups, embedding rows are adapter outputs. Position embeddings are
    /// added later, inside the decoder.
    pub fn embed_mixed(&self, seq: &MixedSequence) -> Result<Tensor<T>> {
        let (x, _) = self.embed_packed(std::slice::from_ref(seq))?;
        let d = self.config.d_model;
        Tensor::from_vec(&[seq.len(), d], x)
    }

    /// Logits (`total positions × vocab`) for a packed batch of sequences,
    /// rows in sequence order.
    pub fn forward(&self, seqs: &[MixedSequence]) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let c = &self.config;
        let (d, v) = (c.d_model, c.vocab_size);
        let (mut x, mut cache) = self.embed_packed(seqs)?;
        let n = cache.positions.len();
        let p = &self.params;
        let pos = p.value(self.idx.pos);
        for (r, &q) in cache.positions.iter().enumerate() {
            add_into(&mut x[r * d..(r + 1) * d], &pos[q * d..(q + 1) * d]);
        }
        for (l, b) in self.idx.blocks.iter().enumerate() {
            let mut n1 = vec![T::zero(); n * d];
            let mut rstd1 = vec![T::zero(); n];
            kernels::rmsnorm_forward(&x, n, d, p.value(b.norm1), &mut n1, &mut rstd1);
            let mut a = vec![T::zero(); n * d];
            let ap = AttnParams {
                wqkv: p.value(b.wqkv),
                wo: p.value(b.wo),
                bo: p.value(b.bo),
            };
            let attn = attn_forward(&n1, &cache.segments, d, c.heads, &ap, &mut a);
            let mut h = x.clone();
            add_into(&mut h, &a);
            let mut n2 = vec![T::zero(); n * d];
            let mut rstd2 = vec![T::zero(); n];
            kernels::rmsnorm_forward(&h, n, d, p.value(b.norm2), &mut n2, &mut rstd2);
            let mut m = vec![T::zero(); n * d];
            let shape = MlpShape {
                din: d,
                hidden: c.ff_hidden,
                dout: d,
            };
            let mlp = mlp_forward(
                &n2,
                n,
                &shape,
                &self.mlp_params([b.w1, b.b1, b.w2, b.b2]),
                &mut m,
            );
            let mut out = h.clone();
            add_into(&mut out, &m);
            if out.iter().any(|z| !z.is_finite()) {
                return Err(ElmError::numeric(
                    format!("m0.block{l}"),
                    "non-finite activation",
                ));
            }
            cache.blocks.push(BlockCache {
                x,
                n1,
                rstd1,
                attn,
                h,
                n2,
                rstd2,
                mlp,
            });
            x = out;
        }
        let mut nf = vec![T::zero(); n * d];
        let mut rstd_f = vec![T::zero(); n];
        kernels::rmsnorm_forward(&x, n, d, p.value(self.idx.norm_f), &mut nf, &mut rstd_f);
        let mut logits = vec![T::zero(); n * v];
        kernels::affine_forward(
            &nf,
            n,
            d,
            p.value(self.idx.head_w),
            v,
            Some(p.value(self.idx.head_b)),
            &mut logits,
        );
        let logits = Tensor::from_vec(&[n, v], logits)?;
        logits.check_finite("m0.head")?;
        cache.x_final = x;
        cache.nf = nf;
        cache.rstd_f = rstd_f;
        Ok((logits, cache))
    }

    pub fn forward_logits(&self, seq: &MixedSequence) -> Result<Tensor<T>> {
        self.forward(std::slice::from_ref(seq)).map(|(l, _)| l)
    }

    /// Gradients of every trainable parameter given `dlogits`, the gradient
    /// of the loss with respect to the logits of the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T]) -> Result<GradTable<T>> {
        let c = &self.config;
        let (d, v) = (c.d_model, c.vocab_size);
        let n = cache.positions.len();
        if dlogits.len() != n * v {
            return Err(ElmError::config(format!(
                "dlogits has {} entries, expected {}",
                dlogits.len(),
                n * v
            )));
        }
        let p = &self.params;
        let mut grads: Vec<Option<Vec<T>>> = p
            .iter()
            .map(|q| q.trainable.then(|| vec![T::zero(); q.value.len()]))
            .collect();

        let mut dnf = vec![T::zero(); n * d];
        {
            let [gw, gb] = slots(&mut grads, [self.idx.head_w, self.idx.head_b]);
            kernels::affine_backward(
                &cache.nf,
                n,
                d,
                p.value(self.idx.head_w),
                v,
                dlogits,
                Some(&mut dnf),
                gw,
                gb,
            );
        }
        let mut dx = vec![T::zero(); n * d];
        {
            let [gg] = slots(&mut grads, [self.idx.norm_f]);
            kernels::rmsnorm_backward(
                &cache.x_final,
                n,
                d,
                p.value(self.idx.norm_f),
                &cache.rstd_f,
                &dnf,
                &mut dx,
                gg,
            );
        }
        let shape = MlpShape {
            din: d,
            hidden: c.ff_hidden,
            dout: d,
        };
        let mut tmp = vec![T::zero(); n * d];
        let mut dn = vec![T::zero(); n * d];
        for (b, bc) in self.idx.blocks.iter().zip(&cache.blocks).rev() {
            // dx holds the gradient at the block output.
            {
                let [w1, b1, w2, b2] = slots(&mut grads, [b.w1, b.b1, b.w2, b.b2]);
                mlp_backward(
                    &bc.n2,
                    n,
                    &shape,
                    &self.mlp_params([b.w1, b.b1, b.w2, b.b2]),
                    &bc.mlp,
                    &dx,
                    Some(&mut dn),
                    MlpGrads { w1, b1, w2, b2 },
                );
            }
            {
                let [gg] = slots(&mut grads, [b.norm2]);
                kernels::rmsnorm_backward(
                    &bc.h,
                    n,
                    d,
                    p.value(b.norm2),
                    &bc.rstd2,
                    &dn,
                    &mut tmp,
                    gg,
                );
            }
            add_into(&mut dx, &tmp);
            {
                let [wqkv, wo, bo] = slots(&mut grads, [b.wqkv, b.wo, b.bo]);
                let ap = AttnParams {
                    wqkv: p.value(b.wqkv),
                    wo: p.value(b.wo),
                    bo: p.value(b.bo),
                };
                attn_backward(
                    &bc.n1,
                    &cache.segments,
                    d,
                    c.heads,
                    &ap,
                    &bc.attn,
                    &dx,
                    &mut dn,
                    AttnGrads { wqkv, wo, bo },
                );
            }
            {
                let [gg] = slots(&mut grads, [b.norm1]);
                kernels::rmsnorm_backward(
                    &bc.x,
                    n,
                    d,
                    p.value(b.norm1),
                    &bc.rstd1,
                    &dn,
                    &mut tmp,
                    gg,
                );
            }
            add_into(&mut dx, &tmp);
        }

        if let Some(gpos) = grads[self.idx.pos].as_mut() {
            for (r, &q) in cache.positions.iter().enumerate() {
                add_into(&mut gpos[q * d..(q + 1) * d], &dx[r * d..(r + 1) * d]);
            }
        }
        if let Some(gtok) = grads[self.idx.tok].as_mut() {
            for &(r, id) in &cache.token_rows {
                add_into(&mut gtok[id * d..(id + 1) * d], &dx[r * d..(r + 1) * d]);
            }
        }
        for (a, batch) in cache.adapters.iter().enumerate() {
            let m = batch.rows.len();
            let ids = self.idx.adapters[a];
            if m == 0 || ids.iter().all(|&i| grads[i].is_none()) {
                continue;
            }
            let mut dy = vec![T::zero(); m * d];
            for (k, &r) in batch.rows.iter().enumerate() {
                dy[k * d..(k + 1) * d].copy_from_slice(&dx[r * d..(r + 1) * d]);
            }
            let [w1, b1, w2, b2] = slots(&mut grads, ids);
            mlp_backward(
                &batch.inputs,
                m,
                &self.mlp_shape(a),
                &self.mlp_params(ids),
                &batch.cache,
                &dy,
                None,
                MlpGrads { w1, b1, w2, b2 },
            );
        }

        let tensors = p
            .iter()
            .zip(grads)
            .map(|(q, g)| match g {
                Some(g) => Tensor::from_vec(q.value.shape(), g),
                None => Ok(Tensor::zeros(&[0])),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GradTable::from_aligned(p, tensors))
    }

    /// Mean masked cross-entropy of a batch and its gradients.
    pub fn loss_and_grads(
        &self,
        seqs: &[MixedSequence],
        targets: &[usize],
        mask: &[T],
    ) -> Result<(f64, GradTable<T>)> {
        let (logits, cache) = self.forward(seqs)?;
        let (loss, dlogits) = kernels::softmax_xent(logits.data(), logits.cols(), targets, mask)?;
        let grads = self.backward(&cache, &dlogits)?;
        Ok((loss, grads))
    }

    pub fn loss(&self, seqs: &[MixedSequence], targets: &[usize], mask: &[T]) -> Result<f64> {
        let (logits, _) = self.forward(seqs)?;
        crate::nn::loss_xent(&logits, targets, mask)
    }
}
