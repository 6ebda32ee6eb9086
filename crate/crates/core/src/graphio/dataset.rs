use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::SparseAdjacency;

/// Node targets: one class per node, or a binary row per node.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    /// `[N×C]` matrix of 0/1 entries.
    Multilabel(Tensor),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Multilabel(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match self {
            Labels::Classes(c) => Some(c),
            Labels::Multilabel(_) => None,
        }
    }

    /// Binary target column used for ROC AUC: class 1 for two-class labels,
    /// column `col` for multilabel.
    pub fn binary_column(&self, col: usize) -> Vec<bool> {
        match self {
            Labels::Classes(c) => c.iter().map(|&y| y == 1).collect(),
            Labels::Multilabel(t) => (0..t.rows()).map(|i| t.get(i, col) > 0.5).collect(),
        }
    }
}

/// Everything a training stage reads: topology, features, targets and the
/// optional environment assignment used for OOD evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    pub adjacency: SparseAdjacency,
    pub features: Tensor,
    pub labels: Labels,
    pub num_classes: usize,
    /// Per-node environment index into `environments`.
    pub environment: Option<Vec<usize>>,
    /// Declared environment names, e.g. `["id", "ood"]`.
    pub environments: Vec<String>,
}

/// Environment index used for in-distribution nodes.
pub const ENV_ID: usize = 0;
/// Environment index used for shifted nodes.
pub const ENV_OOD: usize = 1;

impl GraphDataset {
    pub fn new(
        adjacency: SparseAdjacency,
        features: Tensor,
        labels: Labels,
        num_classes: usize,
    ) -> Result<Self> {
        let ds = Self {
            adjacency,
            features,
            labels,
            num_classes,
            environment: None,
            environments: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.adjacency.n()
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.features.shape().len() != 2 || self.features.rows() != n {
            return Err(Error::Contract(format!(
                "feature matrix {:?} does not have {n} rows",
                self.features.shape()
            )));
        }
        if self.labels.len() != n {
            return Err(Error::Contract(format!(
                "{} labels for {n} nodes",
                self.labels.len()
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Contract("num_classes must be positive".into()));
        }
        match &self.labels {
            Labels::Classes(c) => {
                if let Some((i, y)) = c.iter().enumerate().find(|(_, &y)| y >= self.num_classes) {
                    return Err(Error::Contract(format!(
                        "label {y} at node {i} outside [0, {})",
                        self.num_classes
                    )));
                }
            }
            Labels::Multilabel(t) => {
                if t.cols() != self.num_classes {
                    return Err(Error::Contract(format!(
                        "multilabel matrix has {} columns, expected {}",
                        t.cols(),
                        self.num_classes
                    )));
                }
                if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Contract("multilabel entries must be 0 or 1".into()));
                }
            }
        }
        if let Some(env) = &self.environment {
            if env.len() != n {
                return Err(Error::Contract(format!("{} environment ids for {n} nodes", env.len())));
            }
            if let Some(&e) = env.iter().find(|&&e| e >= self.environments.len()) {
                return Err(Error::Contract(format!(
                    "environment id {e} is not declared ({} declared)",
                    self.environments.len()
                )));
            }
        }
        if let Some(index) = self.features.first_non_finite() {
            return Err(Error::Numeric {
                index,
                detail: "non-finite feature value".into(),
            });
        }
        Ok(())
    }

    /// Nodes whose environment id equals `env`.
    pub fn nodes_in_env(&self, env: usize) -> Vec<usize> {
        match &self.environment {
            Some(e) => (0..self.n()).filter(|&i| e[i] == env).collect(),
            None if env == ENV_ID => (0..self.n()).collect(),
            None => Vec::new(),
        }
    }

    /// Relabels node `i` as `perm[i]`; used by equivariance tests.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let n = self.n();
        let mut inverse = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let features = self.features.select_rows(&inverse);
        let labels = match &self.labels {
            Labels::Classes(c) => Labels::Classes(inverse.iter().map(|&i| c[i]).collect()),
            Labels::Multilabel(t) => Labels::Multilabel(t.select_rows(&inverse)),
        };
        Self {
            adjacency: self.adjacency.permute(perm),
            features,
            labels,
            num_classes: self.num_classes,
            environment: self
                .environment
                .as_ref()
                .map(|e| inverse.iter().map(|&i| e[i]).collect()),
            environments: self.environments.clone(),
        }
    }
}
