//! Checkpoint selection by agreement with the iterative method.

use super::{infer_velocity, Checkpoint, UnetModel};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::{icc_2_1, RatingsTable};
use crate::optim::{register_iterative, IterativeConfig};
use crate::thickness::GwiThresholds;
use crate::volume::ScalarVolume;

/// Anything that turns a WM / WM+GM pair into a mean global thickness.
pub trait ThicknessEstimator {
    fn mean_thickness(&self, wm: &ScalarVolume, wmgm: &ScalarVolume) -> Result<f64>;
}

impl ThicknessEstimator for UnetModel {
    fn mean_thickness(&self, wm: &ScalarVolume, wmgm: &ScalarVolume) -> Result<f64> {
        infer_velocity(self, wm, wmgm, &LossConfig::default())?.mean_thickness(
            wm,
            wmgm,
            GwiThresholds::default(),
        )
    }
}

impl ThicknessEstimator for Checkpoint {
    fn mean_thickness(&self, wm: &ScalarVolume, wmgm: &ScalarVolume) -> Result<f64> {
        self.model.mean_thickness(wm, wmgm)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IterativeEstimator(pub IterativeConfig);

impl ThicknessEstimator for IterativeEstimator {
    fn mean_thickness(&self, wm: &ScalarVolume, wmgm: &ScalarVolume) -> Result<f64> {
        register_iterative(wm, wmgm, &self.0)?.mean_thickness(wm, wmgm, GwiThresholds::default())
    }
}

/// Mean global thickness of every pair under the iterative method.
pub fn oracle_thickness(
    pairs: &[(ScalarVolume, ScalarVolume)],
    cfg: &IterativeConfig,
) -> Result<Vec<f64>> {
    let est = IterativeEstimator(*cfg);
    pairs
        .iter()
        .map(|(wm, wmgm)| est.mean_thickness(wm, wmgm))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Position of the chosen candidate.
    pub index: usize,
    /// ICC(2,1) per candidate; `None` marks a degenerate, unavailable score.
    pub scores: Vec<Option<f64>>,
}

impl Selection {
    pub fn score(&self) -> Option<f64> {
        self.scores[self.index]
    }
}

/// Picks the candidate whose per-subject values agree best with the oracle.
/// Candidates are `(epoch, values)`; ties go to the later epoch.
pub fn select_by_agreement(oracle: &[f64], candidates: &[(usize, Vec<f64>)]) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(
            "no candidates to select from".into(),
        ));
    }
    let scores: Vec<Option<f64>> = candidates
        .iter()
        .map(|(_, values)| {
            RatingsTable::from_columns(&[values.clone(), oracle.to_vec()])
                .and_then(|t| icc_2_1(&t))
                .ok()
        })
        .collect();
    if candidates.len() == 1 {
        return Ok(Selection { index: 0, scores });
    }
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        let Some(s) = s else { continue };
        best = match best {
            Some(b) => {
                let bs = scores[b].unwrap();
                if *s > bs || (*s == bs && candidates[i].0 >= candidates[b].0) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
            None => Some(i),
        };
    }
    let index =
        best.ok_or_else(|| Error::Degenerate("every candidate has degenerate agreement".into()))?;
    Ok(Selection { index, scores })
}

/// Picks among checkpoints by their stored agreement metric, ties to the
/// later epoch. A single checkpoint is returned unconditionally.
pub fn select_checkpoint(checkpoints: &[Checkpoint]) -> Result<usize> {
    match checkpoints {
        [] => Err(Error::InvalidArgument(
            "no checkpoints to select from".into(),
        )),
        [_] => Ok(0),
        _ => {
            let mut best: Option<usize> = None;
            for (i, c) in checkpoints.iter().enumerate() {
                let Some(m) = c.metric else { continue };
                let better = match best {
                    None => true,
                    Some(b) => {
                        let bm = checkpoints[b].metric.unwrap();
                        m > bm || (m == bm && c.epoch >= checkpoints[b].epoch)
                    }
                };
                if better {
                    best = Some(i);
                }
            }
            best.ok_or_else(|| Error::Degenerate("no checkpoint has an agreement metric".into()))
        }
    }
}

/// Scores each `(epoch, estimator)` against the iterative method on the
/// validation pairs and returns the best.
pub fn select_model<E: ThicknessEstimator>(
    candidates: &[(usize, E)],
    validation: &[(ScalarVolume, ScalarVolume)],
    iterative: &IterativeConfig,
) -> Result<Selection> {
    if candidates.len() == 1 {
        return Ok(Selection {
            index: 0,
            scores: vec![None],
        });
    }
    if validation.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "model selection needs at least 2 validation subjects, got {}",
            validation.len()
        )));
    }
    let oracle = oracle_thickness(validation, iterative)?;
    let values = candidates
        .iter()
        .map(|(epoch, est)| {
            let v: Result<Vec<f64>> = validation
                .iter()
                .map(|(wm, wmgm)| est.mean_thickness(wm, wmgm))
                .collect();
            v.map(|v| (*epoch, v))
        })
        .collect::<Result<Vec<_>>>()?;
    select_by_agreement(&oracle, &values)
}
