//! On-disk format for fitted models, written by `fit` and read by `run`.

use std::path::Path;

use dkf_core::learn::FittedMoments;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

/// Everything estimated from a training trajectory: the regression
/// moments plus least-squares dynamics and the stationary covariance
/// implied by the training states.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModelFile {
    pub moments: FittedMoments,
    pub a: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub s_approx: DMatrix<f64>,
}

impl FittedModelFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| BenchError::Config(format!("could not serialize fitted model: {e}")))?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)
                    .map_err(|e| BenchError::io(dir.display().to_string(), e))?;
            }
        }
        std::fs::write(path, text).map_err(|e| BenchError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| {
            BenchError::Config(format!("{}: invalid fitted model file: {e}", path.display()))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dkf_core::dkf::DiscriminativeModel;
    use dkf_core::learn::{nw_fit, MeanRegressor, QModel, SupervisedSet};
    use nalgebra::DVector;

    #[test]
    fn fitted_model_survives_a_save_and_load_cycle() {
        let xs = DMatrix::from_fn(12, 2, |i, j| (i * 2 + j) as f64 * 0.25 - 1.0);
        let zs = DMatrix::from_fn(12, 1, |i, _| (i as f64 * 0.3).sin());
        let data = SupervisedSet::new(xs, zs).unwrap();
        let nw = nw_fit(&data, &[0.5, 1.0, 2.0]).unwrap();
        let moments = FittedMoments {
            mean: MeanRegressor::Nw(nw),
            cov: QModel::constant(DMatrix::identity(1, 1)).unwrap(),
        };
        let file = FittedModelFile {
            moments,
            a: DMatrix::from_element(1, 1, 0.7),
            gamma: DMatrix::from_element(1, 1, 0.51),
            s_approx: DMatrix::from_element(1, 1, 1.02),
        };

        let dir = std::env::temp_dir().join("dkf_bench_model_file_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        file.save(&path).unwrap();
        let back = FittedModelFile::load(&path).unwrap();
        std::fs::remove_file(&path).ok();

        assert_eq!(back.a, file.a);
        assert_eq!(back.gamma, file.gamma);
        assert_eq!(back.s_approx, file.s_approx);
        let x = DVector::from_vec(vec![0.3, -0.4]);
        let before = file.moments.moments(&x).unwrap();
        let after = back.moments.moments(&x).unwrap();
        assert_eq!(before.0, after.0);
        assert_eq!(before.1, after.1);
    }
}
