//! Central finite-difference verification of analytic gradients.

use super::layer::{Layer, LayerCache, LayerInput};
use super::params::{GradTable, ParamSet};
use super::tensor::Tensor;
use crate::error::Result;

/// A scalar-valued function of a parameter set with an analytic gradient.
pub trait GradCheckable {
    fn params(&self) -> &ParamSet<f64>;
    fn params_mut(&mut self) -> &mut ParamSet<f64>;
    fn loss(&self) -> Result<f64>;
    fn loss_and_grads(&self) -> Result<(f64, GradTable<f64>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Largest `|analytic − cd| / max(|analytic|, |cd|, 1e-6)` over every
/// trainable scalar, with `cd` the central difference at step `eps`. The
/// floor keeps entries whose true gradient is near zero from being judged
/// on finite-difference roundoff (about 1e-11 at `eps = 1e-5`).
pub fn grad_check<F: GradCheckable>(fragment: &mut F, eps: f64) -> Result<GradCheckReport> {
    let (_, grads) = fragment.loss_and_grads()?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    let names: Vec<String> = fragment
        .params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        let idx = fragment.params().index_of(&name).expect("name from set");
        let analytic = grads
            .get(&name)
            .expect("trainable param has gradient")
            .clone();
        for k in 0..analytic.len() {
            let orig = fragment.params().value(idx)[k];
            fragment.params_mut().by_index_mut(idx).value.data_mut()[k] = orig + eps;
            let plus = fragment.loss()?;
            fragment.params_mut().by_index_mut(idx).value.data_mut()[k] = orig - eps;
            let minus = fragment.loss()?;
            fragment.params_mut().by_index_mut(idx).value.data_mut()[k] = orig;
            let cd = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[k];
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = format!("{name}[{k}]");
            }
        }
    }
    Ok(report)
}

/// Standalone layer scored by `sum(output ⊙ probe)` for a fixed probe.
pub struct LayerProbe {
    pub layer: Layer<f64>,
    pub rows: Option<Tensor<f64>>,
    pub ids: Vec<usize>,
    pub probe: Tensor<f64>,
}

impl LayerProbe {
    fn input(&self) -> LayerInput<'_, f64> {
        match &self.rows {
            Some(t) => LayerInput::Rows(t),
            None => LayerInput::Ids(&self.ids),
        }
    }

    fn score(&self, y: &Tensor<f64>) -> f64 {
        y.data()
            .iter()
            .zip(self.probe.data())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn forward(&self) -> Result<(Tensor<f64>, LayerCache<f64>)> {
        self.layer.forward(self.input())
    }
}

impl GradCheckable for LayerProbe {
    fn params(&self) -> &ParamSet<f64> {
        &self.layer.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<f64> {
        &mut self.layer.params
    }

    fn loss(&self) -> Result<f64> {
        let (y, _) = self.forward()?;
        Ok(self.score(&y))
    }

    fn loss_and_grads(&self) -> Result<(f64, GradTable<f64>)> {
        let (y, cache) = self.forward()?;
        let (_, g) = self.layer.backward(self.input(), &cache, &self.probe)?;
        Ok((self.score(&y), g))
    }
}

/// Builds a verification probe for `kind` with random parameters, inputs
/// and output weights drawn from `seed`.
pub fn layer_probe(kind: super::LayerKind, seed: u64) -> LayerProbe {
    use super::LayerKind;
    use crate::rng::SplitMix64;

    let mut rng = SplitMix64::stream(seed, &format!("gradcheck/{}", kind.name()));
    let random = |shape: &[usize], rng: &mut SplitMix64| {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).expect("shape")
    };
    let rows_n = 5;
    let (layer, rows, ids, out_w) = match kind {
        LayerKind::Affine => (
            Layer::affine("affine", 6, 4, 0.5, &mut rng),
            Some(6),
            vec![],
            4,
        ),
        LayerKind::RmsNorm => (
            Layer::rmsnorm("rmsnorm", 6, 0.3, &mut rng),
            Some(6),
            vec![],
            6,
        ),
        LayerKind::CausalAttention { heads } => (
            Layer::attention("attention", 8, heads, 16, 0.5, &mut rng),
            Some(8),
            vec![],
            8,
        ),
        LayerKind::MlpGelu => (
            Layer::mlp("adapter", 4, 7, 6, 0.5, &mut rng),
            Some(4),
            vec![],
            6,
        ),
        LayerKind::EmbeddingLookup => {
            let ids = (0..rows_n).map(|_| rng.below(7)).collect();
            (
                Layer::embedding("embedding", 7, 5, 1.0, &mut rng),
                None,
                ids,
                5,
            )
        }
    };
    let rows = rows.map(|w| random(&[rows_n, w], &mut rng));
    let probe = random(&[rows_n, out_w], &mut rng);
    LayerProbe {
        layer,
        rows,
        ids,
        probe,
    }
}
