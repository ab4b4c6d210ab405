//! Self-describing model file: variational parameters, shrinkage state,
//! network spec, and the standardization record travel together so that
//! predictions can be reproduced from the file alone.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use nagvac::datagen::Standardization;
use nagvac::deepglm::{NetworkSpec, ShrinkageState};
use nagvac::deepglmm::RandomEffects;
use nagvac::factor_gaussian::FactorGaussian;
use nagvac::natural_gradient::lower_indices;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub kind: ModelKind,
    pub spec: NetworkSpec,
    pub factors: usize,
    pub mu: Vec<f64>,
    /// Lower triangle of the loading matrix, columns stacked left to right.
    pub b_lower: Vec<f64>,
    pub c: Vec<f64>,
    pub shrinkage: ShrinkageState,
    pub standardization: Standardization,
    /// Covariate names, in the column order the model was trained on.
    pub columns: Vec<String>,
    pub response: String,
    pub subject: Option<String>,
    pub random_effects: Option<RandomEffects>,
    /// Per-subject Laplace modes at the variational mean (mixed models).
    pub panel_modes: BTreeMap<String, Vec<f64>>,
    pub train_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Deepglm,
    Deepglmm,
}

impl ModelFile {
    pub fn factor_gaussian(&self) -> anyhow::Result<FactorGaussian> {
        let d = self.mu.len();
        let f = self.factors;
        let idx = lower_indices(d, f);
        if idx.len() != self.b_lower.len() {
            bail!(
                "model file loading matrix has {} entries, expected {}",
                self.b_lower.len(),
                idx.len()
            );
        }
        let mut b = Array2::<f64>::zeros((d, f));
        for (k, (i, j)) in idx.into_iter().enumerate() {
            b[(i, j)] = self.b_lower[k];
        }
        Ok(FactorGaussian {
            mu: Array1::from_vec(self.mu.clone()),
            b,
            c: Array1::from_vec(self.c.clone()),
        })
    }

    pub fn set_factor_gaussian(&mut self, fg: &FactorGaussian) {
        self.mu = fg.mu.to_vec();
        self.c = fg.c.to_vec();
        let idx = lower_indices(fg.dim(), fg.factors());
        self.b_lower = idx.into_iter().map(|(i, j)| fg.b[(i, j)]).collect();
        self.factors = fg.factors();
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let file = std::fs::File::create(path)
            .with_context(|| format!("cannot create {}", path.display()))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> anyhow::Result<ModelFile> {
        let file = std::fs::File::open(path)
            .with_context(|| format!("cannot open model file {}", path.display()))?;
        let model: ModelFile = serde_json::from_reader(std::io::BufReader::new(file))
            .with_context(|| format!("malformed model file {}", path.display()))?;
        if model.schema_version != SCHEMA_VERSION {
            bail!(
                "model schema version {} is not supported (expected {})",
                model.schema_version,
                SCHEMA_VERSION
            );
        }
        Ok(model)
    }
}
