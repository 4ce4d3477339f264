//! Seeded patch-based training and checkpoint files.
//!
//! Checkpoint layout: 8-byte magic `MCKP\0\0\0\x01`, a little-endian `u32`
//! manifest length, a JSON manifest (spec, epoch, metrics, layer table,
//! parameter count) and the parameters as little-endian `f64`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{infer_velocity, unet_backward, unet_forward, LayerSpec, UnetModel, UnetSpec};
use crate::error::{Error, Result};
use crate::loss::{evaluate, LossConfig};
use crate::metrics::{icc_2_1, RatingsTable};
use crate::optim::{adam_step, AdamState};
use crate::thickness::GwiThresholds;
use crate::volume::{GridMeta, ScalarVolume};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"MCKP\0\0\0\x01";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: UnetSpec,
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub epochs: usize,
    /// Emit a checkpoint every this many epochs (the last epoch always gets
    /// one).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: UnetSpec::default(),
            patch_size: [32; 3],
            batch_size: 2,
            lr: 1e-3,
            weight_decay: 1e-5,
            loss: LossConfig::default(),
            epochs: 10,
            checkpoint_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.check_dims(self.patch_size)?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidArgument(
                "checkpoint_every must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Held-out pairs, optionally with reference thickness values from the
/// iterative method for the agreement metric.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub pairs: Vec<(ScalarVolume, ScalarVolume)>,
    pub oracle_thickness: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: UnetModel,
    pub epoch: usize,
    /// ICC(2,1) of mean global thickness against the oracle; `None` when no
    /// oracle was given, the ratings were degenerate, or the estimate fell
    /// outside [-1, 1].
    pub metric: Option<f64>,
    pub validation_loss: Option<f64>,
    /// Mean training loss over the epoch that produced the checkpoint.
    pub train_loss: Option<f64>,
}

fn crop(v: &ScalarVolume, origin: [usize; 3], size: [usize; 3]) -> Result<ScalarVolume> {
    let meta = GridMeta::new(size, v.meta.spacing_mm)?;
    Ok(ScalarVolume::from_fn(meta, |x, y, z| {
        v.data[v.meta.index(origin[0] + x, origin[1] + y, origin[2] + z)]
    }))
}

/// Mean total loss of single-pass inference over the pairs.
pub fn validation_loss(
    model: &UnetModel,
    pairs: &[(ScalarVolume, ScalarVolume)],
    loss: &LossConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (wm, wmgm) in pairs {
        total += infer_velocity(model, wm, wmgm, loss)?.loss.total;
    }
    Ok(total / pairs.len().max(1) as f64)
}

fn checkpoint(
    model: &UnetModel,
    epoch: usize,
    train_loss: Option<f64>,
    validation: Option<&ValidationSet>,
    loss: &LossConfig,
) -> Result<Checkpoint> {
    let (mut metric, mut validation_loss) = (None, None);
    if let Some(v) = validation.filter(|v| !v.pairs.is_empty()) {
        let mut total = 0.0;
        let mut thickness = Vec::with_capacity(v.pairs.len());
        for (wm, wmgm) in &v.pairs {
            let r = infer_velocity(model, wm, wmgm, loss)?;
            total += r.loss.total;
            thickness.push(r.mean_thickness(wm, wmgm, GwiThresholds::default())?);
        }
        validation_loss = Some(total / v.pairs.len() as f64);
        if let Some(oracle) = &v.oracle_thickness {
            metric = RatingsTable::from_columns(&[thickness, oracle.clone()])
                .and_then(|t| icc_2_1(&t))
                .ok()
                .filter(|v| (-1.0..=1.0).contains(v));
        }
    }
    Ok(Checkpoint {
        model: model.clone(),
        epoch,
        metric,
        validation_loss,
        train_loss,
    })
}

/// Trains from a seeded initialization. Returns the epoch-0 checkpoint
/// followed by one per `checkpoint_every` epochs.
pub fn train_amortized(
    train: &[(ScalarVolume, ScalarVolume)],
    validation: Option<&ValidationSet>,
    cfg: &TrainConfig,
) -> Result<Vec<Checkpoint>> {
    cfg.validate()?;
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for (wm, wmgm) in train {
        wm.meta.check_same("wm vs wm+gm", &wmgm.meta)?;
        if wm.meta.dims.iter().zip(cfg.patch_size).any(|(&d, p)| d < p) {
            return Err(Error::InvalidArgument(format!(
                "volume {:?} is smaller than patch {:?}",
                wm.meta.dims, cfg.patch_size
            )));
        }
    }
    if let Some(v) = validation {
        if let Some(o) = &v.oracle_thickness {
            if o.len() != v.pairs.len() {
                return Err(Error::ShapeMismatch {
                    what: "oracle thickness values",
                    expected: v.pairs.len(),
                    got: o.len(),
                });
            }
        }
    }

    let mut model = UnetModel::new(cfg.model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut adam = AdamState::new(model.param_count(), cfg.lr, cfg.weight_decay);
    let mut out = vec![checkpoint(&model, 0, None, validation, &cfg.loss)?];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; model.param_count()];
            for &i in batch {
                let (wm, wmgm) = &train[i];
                let origin =
                    [0, 1, 2].map(|a| rng.gen_range(0..=wm.meta.dims[a] - cfg.patch_size[a]));
                let (pw, pg) = (
                    crop(wm, origin, cfg.patch_size)?,
                    crop(wmgm, origin, cfg.patch_size)?,
                );
                let (z, tape) = unet_forward(&model, &pw, &pg)?;
                let eval = evaluate(&pw, &pg, &z, &cfg.loss)?;
                let total = eval.breakdown.total;
                if !total.is_finite() {
                    return Err(Error::Diverged {
                        iteration: step,
                        loss: total,
                    });
                }
                epoch_loss += total;
                let g = unet_backward(&model, &tape, &eval.grad)?;
                for (a, b) in grad.iter_mut().zip(&g.params) {
                    *a += b / batch.len() as f64;
                }
            }
            adam_step(&mut model.params, &grad, &mut adam).map_err(|_| Error::Diverged {
                iteration: step,
                loss: f64::NAN,
            })?;
            step += 1;
        }
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            let mean = epoch_loss / train.len() as f64;
            out.push(checkpoint(
                &model,
                epoch,
                Some(mean),
                validation,
                &cfg.loss,
            )?);
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    spec: UnetSpec,
    epoch: usize,
    metric: Option<f64>,
    validation_loss: Option<f64>,
    train_loss: Option<f64>,
    layers: Vec<LayerSpec>,
    n_params: usize,
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let manifest = Manifest {
        spec: c.model.spec,
        epoch: c.epoch,
        metric: c.metric,
        validation_loss: c.validation_loss,
        train_loss: c.train_loss,
        layers: c.model.layers.clone(),
        n_params: c.model.params.len(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::BadHeader {
        field: "manifest",
        detail: e.to_string(),
    })?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * c.model.params.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &c.model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |field: &'static str, detail: String| Error::BadHeader { field, detail };
    if bytes.len() < 12 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("magic", "not a checkpoint file".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| bad("manifest_length", format!("{hlen} exceeds file size")))?;
    let m: Manifest = serde_json::from_slice(body).map_err(|e| bad("manifest", e.to_string()))?;
    let payload = &bytes[12 + hlen..];
    if payload.len() != 8 * m.n_params {
        return Err(bad(
            "n_params",
            format!(
                "{} parameters declared, {} bytes of payload",
                m.n_params,
                payload.len()
            ),
        ));
    }
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let model = UnetModel::from_params(m.spec, params)?;
    if model.layers != m.layers {
        return Err(bad("layers", "layer table does not match the spec".into()));
    }
    if let Some(v) = m.metric {
        if !(-1.0..=1.0).contains(&v) {
            return Err(bad("metric", format!("{v}")));
        }
    }
    Ok(Checkpoint {
        model,
        epoch: m.epoch,
        metric: m.metric,
        validation_loss: m.validation_loss,
        train_loss: m.train_loss,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, c: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(c)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
