//! Classifier prototypes `f = g ∘ h`: a ReLU feature extractor `h` followed by
//! a single linear classification head `g`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{mlp_forward_backward, Activation, Dense, LossKind, Matrix, Mlp};
use crate::scalar::Scalar;
use crate::seed::rng_for;

/// Architecture descriptor shared by all clients mapped to it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelPrototype {
    pub id: String,
    pub input_dim: usize,
    /// Hidden widths of the extractor before its final `feature_dim` layer.
    #[serde(default)]
    pub hidden_layers: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl ModelPrototype {
    pub fn new(
        id: impl Into<String>,
        input_dim: usize,
        hidden_layers: Vec<usize>,
        feature_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let p = Self {
            id: id.into(),
            input_dim,
            hidden_layers,
            feature_dim,
            num_classes,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::param("input_dim", "must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::param("feature_dim", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::param("num_classes", "at least two classes required"));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::param("hidden_layers", "widths must be positive"));
        }
        Ok(())
    }

    /// `[input_dim, hidden..., feature_dim]`.
    pub fn extractor_widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_layers.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_layers);
        w.push(self.feature_dim);
        w
    }

    pub fn extractor_param_count(&self) -> usize {
        self.extractor_widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.feature_dim * self.num_classes + self.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.extractor_param_count() + self.head_param_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Output {
    Logits,
    Features,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadInit {
    Zeros,
    Seeded(u64),
}

/// A prototype instantiated with concrete parameters.
///
/// The flat parameter vector is the extractor parameters followed by the head
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    prototype: ModelPrototype,
    network: Mlp<T>,
}

impl<T: Scalar> Model<T> {
    fn build(prototype: &ModelPrototype, mut extractor: Vec<Dense<T>>, head: Dense<T>) -> Result<Self> {
        extractor.push(head);
        Ok(Self {
            prototype: prototype.clone(),
            network: Mlp::new(extractor)?,
        })
    }

    /// Seeded He/LeCun-normal initialization of extractor and head.
    pub fn seeded(prototype: &ModelPrototype, seed: u64) -> Result<Self> {
        prototype.validate()?;
        let mut widths = prototype.extractor_widths();
        widths.push(prototype.num_classes);
        let mut acts = vec![Activation::Relu; widths.len() - 2];
        acts.push(Activation::Identity);
        let mut rng = rng_for(seed, "model-init", &[]);
        Ok(Self {
            prototype: prototype.clone(),
            network: Mlp::seeded(&widths, &acts, &mut rng)?,
        })
    }

    pub fn zeros(prototype: &ModelPrototype) -> Result<Self> {
        prototype.validate()?;
        let extractor = prototype
            .extractor_widths()
            .windows(2)
            .map(|w| Dense::zeros(w[0], w[1], Activation::Relu))
            .collect();
        let head = Dense::zeros(prototype.feature_dim, prototype.num_classes, Activation::Identity);
        Self::build(prototype, extractor, head)
    }

    pub fn prototype(&self) -> &ModelPrototype {
        &self.prototype
    }

    /// The full network, extractor layers first and the head last.
    pub fn network(&self) -> &Mlp<T> {
        &self.network
    }

    /// A standalone copy of the feature extractor `h`.
    pub fn extractor_network(&self) -> Mlp<T> {
        let layers = self.network.layers();
        Mlp::new(layers[..layers.len() - 1].to_vec()).expect("extractor layers chain")
    }

    pub fn head_layer(&self) -> &Dense<T> {
        self.network.layers().last().expect("model has a head")
    }

    pub fn param_count(&self) -> usize {
        self.network.param_count()
    }

    pub fn extractor_param_count(&self) -> usize {
        self.prototype.extractor_param_count()
    }

    pub fn params(&self) -> Vec<T> {
        self.network.params()
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        self.network.set_params(params)
    }

    pub fn extractor_params(&self) -> Vec<T> {
        let mut p = self.params();
        p.truncate(self.extractor_param_count());
        p
    }

    pub fn head_params(&self) -> Vec<T> {
        self.params().split_off(self.extractor_param_count())
    }

    pub fn set_extractor_params(&mut self, extractor: &[T]) -> Result<()> {
        let n = self.extractor_param_count();
        if extractor.len() != n {
            return Err(Error::dim("extractor parameters", n, extractor.len()));
        }
        let mut p = self.params();
        p[..n].copy_from_slice(extractor);
        self.set_params(&p)
    }

    pub fn set_head_params(&mut self, head: &[T]) -> Result<()> {
        let n = self.extractor_param_count();
        let mut p = self.params();
        if head.len() != p.len() - n {
            return Err(Error::dim("head parameters", p.len() - n, head.len()));
        }
        p[n..].copy_from_slice(head);
        self.set_params(&p)
    }

    /// Features `h(x)` or logits `g(h(x))` for every row of `batch`.
    pub fn forward(&self, batch: &Matrix<T>, mode: Output) -> Result<Matrix<T>> {
        if batch.cols() != self.prototype.input_dim {
            return Err(Error::dim("model input", self.prototype.input_dim, batch.cols()));
        }
        let layers = self.network.layers();
        let upto = match mode {
            Output::Logits => layers.len(),
            Output::Features => layers.len() - 1,
        };
        self.network.forward_prefix(batch, upto)
    }

    pub fn logits(&self, batch: &Matrix<T>) -> Result<Matrix<T>> {
        if batch.cols() != self.prototype.input_dim {
            return Err(Error::dim("model input", self.prototype.input_dim, batch.cols()));
        }
        self.network.forward(batch)
    }

    pub fn features(&self, batch: &Matrix<T>) -> Result<Matrix<T>> {
        self.forward(batch, Output::Features)
    }

    /// Loss and flat gradient; see [`mlp_forward_backward`].
    pub fn loss_and_gradient(
        &self,
        batch: &Matrix<T>,
        target: &Matrix<T>,
        loss: LossKind<'_, T>,
    ) -> Result<(T, Vec<T>)> {
        mlp_forward_backward(&self.network, batch, target, loss)
    }

    /// Top-1 accuracy against integer labels.
    pub fn accuracy(&self, batch: &Matrix<T>, labels: &[usize]) -> Result<f64> {
        if labels.len() != batch.rows() {
            return Err(Error::dim("accuracy labels", batch.rows(), labels.len()));
        }
        if labels.is_empty() {
            return Ok(0.0);
        }
        let logits = self.logits(batch)?;
        let correct = logits
            .iter_rows()
            .zip(labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Same extractor, fresh head.
    pub fn clone_with_extractor(&self, extractor_params: &[T], head_init: HeadInit) -> Result<Self> {
        let mut out = self.clone();
        out.set_extractor_params(extractor_params)?;
        let head = match head_init {
            HeadInit::Zeros => vec![T::zero(); self.prototype.head_param_count()],
            HeadInit::Seeded(seed) => {
                let mut rng = rng_for(seed, "head-init", &[]);
                let d = Dense::<T>::seeded(
                    self.prototype.feature_dim,
                    self.prototype.num_classes,
                    Activation::Identity,
                    &mut rng,
                );
                Mlp::new(vec![d])?.params()
            }
        };
        out.set_head_params(&head)?;
        Ok(out)
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `θ = Σ w̃ᵢ θᵢ` with `w̃ᵢ = wᵢ / Σ w`, over extractor and head jointly.
pub fn average_parameters<T: Scalar>(models: &[(&Model<T>, T)]) -> Result<Model<T>> {
    let (first, _) = models
        .first()
        .ok_or_else(|| Error::Argument("cannot average an empty model list".into()))?;
    for (m, w) in models {
        if m.prototype != first.prototype {
            return Err(Error::Prototype {
                expected: first.prototype.id.clone(),
                actual: m.prototype.id.clone(),
            });
        }
        if !(*w > T::zero()) || !w.is_finite() {
            return Err(Error::param("weight", format!("must be positive, got {w}")));
        }
    }
    let total: T = models.iter().map(|(_, w)| *w).sum();
    let mut acc = vec![T::zero(); first.param_count()];
    for (m, w) in models {
        let share = *w / total;
        for (a, p) in acc.iter_mut().zip(m.params()) {
            *a += share * p;
        }
    }
    let mut out = (*first).clone();
    out.set_params(&acc)?;
    Ok(out)
}

/// Serialized form of a model; `head` is absent for extractor-only checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub prototype: ModelPrototype,
    pub extractor: Vec<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<Vec<T>>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &Model<T>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            prototype: model.prototype.clone(),
            extractor: model.extractor_params(),
            head: Some(model.head_params()),
        }
    }

    pub fn extractor_only(prototype: &ModelPrototype, extractor: Vec<T>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            prototype: prototype.clone(),
            extractor,
            head: None,
        }
    }

    /// Rebuilds the model; a missing head is zero-initialized.
    pub fn to_model(&self) -> Result<Model<T>> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Argument(format!(
                "unsupported checkpoint version {}",
                self.format_version
            )));
        }
        let base = Model::zeros(&self.prototype)?;
        let mut model = base.clone_with_extractor(&self.extractor, HeadInit::Zeros)?;
        if let Some(head) = &self.head {
            model.set_head_params(head)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let w = BufWriter::new(File::create(path.as_ref())?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r = BufReader::new(File::open(path.as_ref())?);
        Ok(serde_json::from_reader(r)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn proto() -> ModelPrototype {
        ModelPrototype::new("mlp", 2, vec![5], 4, 3).unwrap()
    }

    fn batch() -> Matrix<f64> {
        Matrix::from_f64_rows(&[&[0.5, -1.0], &[2.0, 0.1], &[-0.3, -0.7]])
    }

    #[test]
    fn prototype_validation() {
        assert!(ModelPrototype::new("a", 2, vec![], 0, 3).is_err());
        assert!(ModelPrototype::new("a", 2, vec![], 3, 1).is_err());
        assert!(ModelPrototype::new("a", 2, vec![0], 3, 2).is_err());
        assert_eq!(proto().param_count(), (2 * 5 + 5) + (5 * 4 + 4) + (4 * 3 + 3));
    }

    #[test]
    fn logits_are_head_of_features() {
        let m = Model::<f64>::seeded(&proto(), 1).unwrap();
        let x = batch();
        let feats = m.forward(&x, Output::Features).unwrap();
        let head = Mlp::new(vec![m.head_layer().clone()]).unwrap();
        assert_eq!(head.forward(&feats).unwrap(), m.forward(&x, Output::Logits).unwrap());
        assert_eq!(m.logits(&x).unwrap(), m.forward(&x, Output::Logits).unwrap());
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = Model::<f64>::zeros(&proto()).unwrap();
        assert!(m.logits(&batch()).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_2_4_3_logits() {
        let p = ModelPrototype::new("tiny", 2, vec![], 4, 3).unwrap();
        let mut m = Model::<f64>::zeros(&p).unwrap();
        // extractor W (2x4), b (4); head V (4x3), c (3)
        let w = [1.0, -1.0, 0.5, 0.0, 2.0, 1.0, -0.5, 1.0];
        let b = [0.0, 0.5, 0.0, -3.0];
        let v = [1.0, 0.0, -1.0, 0.5, 2.0, 0.0, -1.0, 1.0, 1.0, 3.0, 3.0, 3.0];
        let c = [0.1, 0.2, 0.3];
        let params: Vec<f64> = w.iter().chain(&b).chain(&v).chain(&c).copied().collect();
        m.set_params(&params).unwrap();
        let x = Matrix::from_f64_rows(&[&[1.0, 2.0]]);
        // pre = [1+4, -1+2+0.5, 0.5-1, 0+2-3] = [5, 1.5, -0.5, -1] -> relu [5, 1.5, 0, 0]
        // logits = [5*1 + 1.5*0.5, 5*0 + 1.5*2, 5*-1 + 1.5*0] + c = [5.85, 3.2, -4.7]
        let out = m.logits(&x).unwrap();
        for (o, e) in out.as_slice().iter().zip([5.85, 3.2, -4.7]) {
            assert!((o - e).abs() < 1e-9);
        }
        let feats = m.features(&x).unwrap();
        assert_eq!(feats.as_slice(), &[5.0, 1.5, 0.0, 0.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = Model::<f64>::zeros(&proto()).unwrap();
        let x = Matrix::from_f64_rows(&[&[1.0, 2.0, 3.0]]);
        assert!(matches!(m.forward(&x, Output::Features), Err(Error::Dimension { .. })));
    }

    fn scalar_model(v: f64) -> Model<f64> {
        let p = ModelPrototype::new("s", 1, vec![], 1, 2).unwrap();
        let mut m = Model::zeros(&p).unwrap();
        let n = m.param_count();
        m.set_params(&vec![v; n]).unwrap();
        m
    }

    #[test]
    fn weighted_average_examples() {
        let a = scalar_model(1.0);
        let b = scalar_model(4.0);
        let avg = average_parameters(&[(&a, 2.0), (&b, 1.0)]).unwrap();
        assert!(avg.params().iter().all(|&p| (p - 2.0).abs() < 1e-15));

        let m = Model::<f64>::seeded(&proto(), 3).unwrap();
        let same = average_parameters(&[(&m, 1.0), (&m, 5.0), (&m, 0.5)]).unwrap();
        for (x, y) in same.params().iter().zip(m.params()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn average_vanishing_weight_limit() {
        let a = Model::<f64>::seeded(&proto(), 1).unwrap();
        let b = Model::<f64>::seeded(&proto(), 2).unwrap();
        let avg = average_parameters(&[(&a, 1.0), (&b, 1e-9)]).unwrap();
        let max = avg
            .params()
            .iter()
            .zip(a.params())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-6);
        assert_eq!(avg.prototype(), a.prototype());
    }

    #[test]
    fn average_errors() {
        assert!(matches!(average_parameters::<f64>(&[]), Err(Error::Argument(_))));
        let a = Model::<f64>::seeded(&proto(), 1).unwrap();
        let other = ModelPrototype::new("other", 2, vec![5], 4, 3).unwrap();
        let b = Model::<f64>::seeded(&other, 1).unwrap();
        assert!(matches!(
            average_parameters(&[(&a, 1.0), (&b, 1.0)]),
            Err(Error::Prototype { .. })
        ));
        assert!(average_parameters(&[(&a, 0.0)]).is_err());
    }

    #[test]
    fn clone_with_extractor_shares_features() {
        let donor = Model::<f64>::seeded(&proto(), 4).unwrap();
        let base = Model::<f64>::seeded(&proto(), 5).unwrap();
        let clone = base
            .clone_with_extractor(&donor.extractor_params(), HeadInit::Zeros)
            .unwrap();
        let x = batch();
        assert_eq!(clone.features(&x).unwrap(), donor.features(&x).unwrap());
        let probs = crate::numeric::softmax_rows(&clone.logits(&x).unwrap(), 1.0);
        assert!(probs.as_slice().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

        let c1 = base
            .clone_with_extractor(&donor.extractor_params(), HeadInit::Seeded(9))
            .unwrap();
        let c2 = base
            .clone_with_extractor(&donor.extractor_params(), HeadInit::Seeded(9))
            .unwrap();
        assert_eq!(c1, c2);
        assert!(base.clone_with_extractor(&[1.0], HeadInit::Zeros).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f64>::seeded(&proto(), 7).unwrap();
        let path = dir.path().join("m.json");
        Checkpoint::from_model(&m).save(&path).unwrap();
        let back = Checkpoint::<f64>::load(&path).unwrap().to_model().unwrap();
        assert_eq!(back, m);

        let ex = Checkpoint::extractor_only(m.prototype(), m.extractor_params());
        ex.save(&path).unwrap();
        let back = Checkpoint::<f64>::load(&path).unwrap().to_model().unwrap();
        assert_eq!(back.extractor_params(), m.extractor_params());
        assert!(back.head_params().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn flatten_round_trip(hidden in prop::collection::vec(1usize..6, 0..3), feat in 1usize..6, k in 2usize..5, seed in 0u64..100) {
            let p = ModelPrototype::new("p", 3, hidden, feat, k).unwrap();
            let m = Model::<f64>::seeded(&p, seed).unwrap();
            let mut z = Model::<f64>::zeros(&p).unwrap();
            z.set_params(&m.params()).unwrap();
            prop_assert_eq!(&z, &m);
            prop_assert_eq!(m.params().len(), p.param_count());
            let mut joined = m.extractor_params();
            joined.extend(m.head_params());
            prop_assert_eq!(joined, m.params());
        }

        #[test]
        fn average_is_order_independent(w in prop::collection::vec(0.1f64..5.0, 3), seed in 0u64..50) {
            let ms: Vec<Model<f64>> = (0..3).map(|i| Model::seeded(&proto(), seed * 10 + i).unwrap()).collect();
            let fwd = average_parameters(&[(&ms[0], w[0]), (&ms[1], w[1]), (&ms[2], w[2])]).unwrap();
            let rev = average_parameters(&[(&ms[2], w[2]), (&ms[0], w[0]), (&ms[1], w[1])]).unwrap();
            for (a, b) in fwd.params().iter().zip(rev.params()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
