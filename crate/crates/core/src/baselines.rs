//! Classical bag-of-words classifiers: multinomial naive Bayes, logistic
//! regression and a linear SVM trained by SGD, and cosine k-nearest-neighbors.
//!
//! All of them consume [`SparseVector`] features over vocabulary ids. Naive
//! Bayes pairs naturally with raw counts; the linear models and KNN expect
//! TF-IDF vectors, though nothing enforces that.

use crate::rng::Rng;
use crate::text::SparseVector;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("training data must contain at least one document of class {0}")]
    MissingClass(u8),
    #[error("k-nearest-neighbors requires a non-empty training set")]
    EmptyTrainingSet,
    #[error("k must satisfy 1 <= k <= n_train, got k={k}, n_train={n_train}")]
    BadK { k: usize, n_train: usize },
}

/// Multinomial naive Bayes with Laplace smoothing.
#[derive(Clone, Debug)]
pub struct NbModel {
    pub class_log_prior: [f64; 2],
    /// Per-class token log-likelihoods, dense over `0..n_features`.
    pub log_likelihood: [Vec<f64>; 2],
    pub alpha: f64,
}

/// Fit class priors and smoothed token likelihoods:
/// log P(c) = ln(n_c / n), log P(t|c) = ln((count(t,c)+α) / (Σ count(·,c)+αV)).
pub fn nb_fit(
    docs: &[SparseVector],
    labels: &[u8],
    alpha: f64,
    n_features: usize,
) -> Result<NbModel, BaselineError> {
    assert_eq!(docs.len(), labels.len(), "document/label lengths disagree");
    assert!(alpha > 0.0, "smoothing alpha must be positive");
    let n = docs.len() as f64;
    let mut class_counts = [0usize; 2];
    let mut token_counts = [vec![0.0f64; n_features], vec![0.0f64; n_features]];
    for (doc, &label) in docs.iter().zip(labels) {
        assert!(label <= 1, "labels must be 0 or 1");
        class_counts[label as usize] += 1;
        for (&id, &v) in doc.indices.iter().zip(&doc.values) {
            assert!((id as usize) < n_features, "feature id {} out of range {}", id, n_features);
            token_counts[label as usize][id as usize] += v;
        }
    }
    for c in 0..2 {
        if class_counts[c] == 0 {
            return Err(BaselineError::MissingClass(c as u8));
        }
    }
    let mut log_likelihood = [vec![0.0; n_features], vec![0.0; n_features]];
    for c in 0..2 {
        let total: f64 = token_counts[c].iter().sum();
        let denom = total + alpha * n_features as f64;
        for t in 0..n_features {
            log_likelihood[c][t] = ((token_counts[c][t] + alpha) / denom).ln();
        }
    }
    Ok(NbModel {
        class_log_prior: [
            (class_counts[0] as f64 / n).ln(),
            (class_counts[1] as f64 / n).ln(),
        ],
        log_likelihood,
        alpha,
    })
}

impl NbModel {
    /// Log-posteriors up to the shared evidence term.
    pub fn log_posteriors(&self, doc: &SparseVector) -> [f64; 2] {
        let mut scores = self.class_log_prior;
        for (&id, &v) in doc.indices.iter().zip(&doc.values) {
            for c in 0..2 {
                scores[c] += v * self.log_likelihood[c][id as usize];
            }
        }
        scores
    }

    /// Argmax class; ties resolve to label 0.
    pub fn predict(&self, doc: &SparseVector) -> u8 {
        let [s0, s1] = self.log_posteriors(doc);
        u8::from(s1 > s0)
    }

    /// Posteriors normalized to sum to one.
    pub fn posteriors(&self, doc: &SparseVector) -> [f64; 2] {
        let [s0, s1] = self.log_posteriors(doc);
        let m = s0.max(s1);
        let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
        [e0 / (e0 + e1), e1 / (e0 + e1)]
    }
}

/// nb_fit followed by predict, as one call.
pub fn nb_predict(model: &NbModel, doc: &SparseVector) -> u8 {
    model.predict(doc)
}

/// Training objective of a linear model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearKind {
    /// Binary cross-entropy on σ(w·x + b).
    Logistic,
    /// Hinge loss max(0, 1 − y±(w·x + b)) with y± ∈ {−1, +1}.
    SvmHinge,
}

/// Linear classifier over sparse features.
#[derive(Clone, Debug)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub kind: LinearKind,
}

impl LinearModel {
    pub fn decision(&self, doc: &SparseVector) -> f64 {
        let mut z = self.bias;
        for (&id, &v) in doc.indices.iter().zip(&doc.values) {
            z += v * self.weights[id as usize];
        }
        z
    }

    /// P(label 1) for logistic models; for hinge models a sigmoid squash of
    /// the margin, usable for ranking.
    pub fn predict_proba(&self, doc: &SparseVector) -> f64 {
        let z = self.decision(doc);
        1.0 / (1.0 + (-z).exp())
    }

    pub fn predict(&self, doc: &SparseVector) -> u8 {
        u8::from(self.decision(doc) >= 0.0)
    }
}

/// SGD with a seeded shuffle each epoch. Weights start at zero; the L2
/// penalty `l2·w` applies to weights only, not the bias.
pub fn linear_fit(
    docs: &[SparseVector],
    labels: &[u8],
    kind: LinearKind,
    n_features: usize,
    lr: f64,
    l2: f64,
    epochs: usize,
    rng: &mut Rng,
) -> LinearModel {
    assert_eq!(docs.len(), labels.len(), "document/label lengths disagree");
    assert!(epochs >= 1, "epochs must be at least 1");
    let mut w = vec![0.0f64; n_features];
    let mut b = 0.0f64;
    let mut order: Vec<usize> = (0..docs.len()).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for &i in &order {
            let doc = &docs[i];
            let mut z = b;
            for (&id, &v) in doc.indices.iter().zip(&doc.values) {
                z += v * w[id as usize];
            }
            // d(loss)/dz, before the feature value factor.
            let gz = match kind {
                LinearKind::Logistic => {
                    let p = 1.0 / (1.0 + (-z).exp());
                    p - labels[i] as f64
                }
                LinearKind::SvmHinge => {
                    let y = if labels[i] == 1 { 1.0 } else { -1.0 };
                    if y * z < 1.0 {
                        -y
                    } else {
                        0.0
                    }
                }
            };
            if l2 > 0.0 {
                for wi in w.iter_mut() {
                    *wi -= lr * l2 * *wi;
                }
            }
            if gz != 0.0 {
                for (&id, &v) in doc.indices.iter().zip(&doc.values) {
                    w[id as usize] -= lr * gz * v;
                }
                b -= lr * gz;
            }
        }
    }
    LinearModel { weights: w, bias: b, kind }
}

/// Majority vote over the `k` most cosine-similar training documents.
/// Similarity ties prefer the lower training index; vote ties return 0.
pub fn knn_predict(
    train_docs: &[SparseVector],
    train_labels: &[u8],
    query: &SparseVector,
    k: usize,
) -> Result<u8, BaselineError> {
    if train_docs.is_empty() {
        return Err(BaselineError::EmptyTrainingSet);
    }
    if k == 0 || k > train_docs.len() {
        return Err(BaselineError::BadK { k, n_train: train_docs.len() });
    }
    let qn = query.l2_norm();
    let mut sims: Vec<(f64, usize)> = train_docs
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let dn = d.l2_norm();
            let sim = if qn == 0.0 || dn == 0.0 { 0.0 } else { query.dot(d) / (qn * dn) };
            (sim, i)
        })
        .collect();
    sims.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite similarity").then(a.1.cmp(&b.1)));
    let votes1 = sims[..k].iter().filter(|&&(_, i)| train_labels[i] == 1).count();
    Ok(u8::from(votes1 * 2 > k))
}
