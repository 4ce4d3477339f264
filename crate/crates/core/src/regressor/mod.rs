//! Amortized registration: a small 3D encoder-decoder that maps a stacked
//! (WM, WM+GM) pair to a stationary velocity field in one forward pass.
//!
//! Forward and reverse passes are written out by hand. Encoder levels are
//! conv-act-conv-act with 2x downsampling by strided convolution; decoder
//! levels upsample (nearest), convolve, concatenate the skip and merge. A
//! 1x1x1 head produces three channels, scaled by a learnable gain.

pub mod conv;
mod select;
mod train;

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{evaluate, LossConfig};
use crate::optim::RegistrationResult;
use crate::volume::{GridMeta, ScalarVolume, VectorField};

use conv::{
    concat, conv3d, conv3d_backward, leaky_relu, leaky_relu_backward, split, upsample2,
    upsample2_backward, ConvShape, Tensor,
};

pub use select::{
    oracle_thickness, select_by_agreement, select_checkpoint, select_model, IterativeEstimator,
    Selection, ThicknessEstimator,
};
pub use train::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, train_amortized,
    validation_loss, Checkpoint, TrainConfig, ValidationSet, CHECKPOINT_MAGIC,
};

/// Initial value of the output gain, so an untrained model starts close to
/// the identity transform.
pub const INITIAL_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnetSpec {
    pub pooling_steps: usize,
    pub base_features: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub leaky_slope: f64,
}

impl Default for UnetSpec {
    fn default() -> Self {
        Self {
            pooling_steps: 2,
            base_features: 8,
            in_channels: 2,
            out_channels: 3,
            leaky_slope: 0.2,
        }
    }
}

impl UnetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 2 || self.out_channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "the network maps 2 input channels to 3 velocity channels, got {} -> {}",
                self.in_channels, self.out_channels
            )));
        }
        if self.base_features == 0 {
            return Err(Error::InvalidArgument("base_features must be >= 1".into()));
        }
        if self.pooling_steps > 6 {
            return Err(Error::InvalidArgument(format!(
                "pooling_steps {} is more than 6",
                self.pooling_steps
            )));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::InvalidArgument(format!(
                "leaky_slope must be in [0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.pooling_steps
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let d = self.divisor();
        if dims.iter().any(|&n| n == 0 || n % d != 0) {
            return Err(Error::InvalidArgument(format!(
                "patch dims {dims:?} must be positive multiples of {d}"
            )));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<(String, ConvShape)> {
        let (f, l) = (self.base_features, self.pooling_steps);
        let mut out = vec![
            ("enc0.a".to_string(), ConvShape::k3(self.in_channels, f, 1)),
            ("enc0.b".to_string(), ConvShape::k3(f, f, 1)),
        ];
        for lvl in 1..=l {
            out.push((format!("down{lvl}"), ConvShape::k3(f, f, 2)));
            out.push((format!("enc{lvl}.b"), ConvShape::k3(f, f, 1)));
        }
        for lvl in (0..l).rev() {
            out.push((format!("up{lvl}"), ConvShape::k3(f, f, 1)));
            out.push((format!("merge{lvl}"), ConvShape::k3(2 * f, f, 1)));
        }
        out.push((
            "head".to_string(),
            ConvShape::pointwise(f, self.out_channels),
        ));
        out
    }
}

/// Location of one convolution's weights and biases in the flat parameter
/// vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub shape: ConvShape,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnetModel {
    pub spec: UnetSpec,
    pub layers: Vec<LayerSpec>,
    /// All weights and biases followed by the output gain.
    pub params: Vec<f64>,
}

impl UnetModel {
    /// Every parameter zero except the gain.
    pub fn zeros(spec: UnetSpec) -> Result<Self> {
        spec.validate()?;
        let mut offset = 0;
        let layers: Vec<LayerSpec> = spec
            .layer_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let weight_offset = offset;
                let bias_offset = weight_offset + shape.weight_len();
                offset = bias_offset + shape.cout;
                LayerSpec {
                    name,
                    shape,
                    weight_offset,
                    bias_offset,
                }
            })
            .collect();
        let mut params = vec![0.0; offset + 1];
        params[offset] = INITIAL_GAIN;
        Ok(Self {
            spec,
            layers,
            params,
        })
    }

    /// He-style uniform weights scaled for the leaky slope, zero biases.
    pub fn new(spec: UnetSpec, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain2 = 1.0 + spec.leaky_slope * spec.leaky_slope;
        for l in &model.layers {
            let fan_in = (l.shape.cin * l.shape.taps()) as f64;
            let bound = (6.0 / (gain2 * fan_in)).sqrt();
            for w in &mut model.params[l.weight_offset..l.bias_offset] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn from_params(spec: UnetSpec, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::zeros(spec)?;
        if params.len() != model.params.len() {
            return Err(Error::ShapeMismatch {
                what: "model parameters",
                expected: model.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        model.params = params;
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn gain_index(&self) -> usize {
        self.params.len() - 1
    }

    pub fn gain(&self) -> f64 {
        self.params[self.gain_index()]
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let l = &self.layers[layer];
        &self.params[l.weight_offset..l.bias_offset]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        let l = &self.layers[layer];
        &self.params[l.bias_offset..l.bias_offset + l.shape.cout]
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            h.write_u64(p.to_bits());
        }
        h.finish()
    }

    fn conv(&self, layer: usize, x: &Tensor) -> Tensor {
        conv3d(
            x,
            self.weights(layer),
            self.biases(layer),
            self.layers[layer].shape,
        )
    }
}

/// Layer indices in evaluation order.
struct Index {
    levels: usize,
}

impl Index {
    fn enc(&self, lvl: usize) -> (usize, usize) {
        if lvl == 0 {
            (0, 1)
        } else {
            (2 * lvl, 2 * lvl + 1)
        }
    }

    fn dec(&self, lvl: usize) -> (usize, usize) {
        let j = self.levels - 1 - lvl;
        let base = 2 + 2 * self.levels + 2 * j;
        (base, base + 1)
    }

    fn head(&self) -> usize {
        2 + 4 * self.levels
    }
}

/// Per-layer inputs and pre-activations of one forward pass.
#[derive(Debug, Clone)]
pub struct UnetTape {
    fingerprint: u64,
    meta: GridMeta,
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
}

impl UnetTape {
    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }
}

/// Gradients of a scalar objective with respect to every parameter (same
/// layout as [`UnetModel::params`]) and both inputs.
#[derive(Debug, Clone)]
pub struct UnetGradients {
    pub params: Vec<f64>,
    pub wm: ScalarVolume,
    pub wmgm: ScalarVolume,
}

fn stack_inputs(wm: &ScalarVolume, wmgm: &ScalarVolume) -> Result<Tensor> {
    wm.meta.check_same("wm vs wm+gm", &wmgm.meta)?;
    Ok(Tensor::from_channels(
        wm.meta.dims,
        vec![wm.data.clone(), wmgm.data.clone()],
    ))
}

pub fn unet_forward(
    model: &UnetModel,
    wm: &ScalarVolume,
    wmgm: &ScalarVolume,
) -> Result<(VectorField, UnetTape)> {
    model.spec.check_dims(wm.meta.dims)?;
    let x = stack_inputs(wm, wmgm)?;
    let levels = model.spec.pooling_steps;
    let idx = Index { levels };
    let slope = model.spec.leaky_slope;
    let n_layers = model.layers.len();
    let mut inputs: Vec<Option<Tensor>> = vec![None; n_layers];
    let mut pre: Vec<Option<Tensor>> = vec![None; n_layers];
    let mut run = |layer: usize, input: Tensor, act: bool| -> Tensor {
        let p = model.conv(layer, &input);
        let out = if act {
            leaky_relu(p.clone(), slope)
        } else {
            p.clone()
        };
        inputs[layer] = Some(input);
        pre[layer] = Some(p);
        out
    };

    let mut skips = Vec::with_capacity(levels);
    let (a, b) = idx.enc(0);
    let h = run(a, x, true);
    let mut h = run(b, h, true);
    for lvl in 1..=levels {
        skips.push(h.clone());
        let (down, conv) = idx.enc(lvl);
        let d = run(down, h, true);
        h = run(conv, d, true);
    }
    for lvl in (0..levels).rev() {
        let (up, merge) = idx.dec(lvl);
        let u = run(up, upsample2(&h), true);
        h = run(merge, concat(&u, &skips[lvl]), true);
    }
    let out = run(idx.head(), h, false);

    let gain = model.gain();
    let meta = wm.meta;
    let data = (0..meta.len())
        .map(|i| {
            [
                gain * out.channel(0)[i],
                gain * out.channel(1)[i],
                gain * out.channel(2)[i],
            ]
        })
        .collect();
    let z = VectorField::new(meta, data)?;
    z.check_finite("network output")?;
    let tape = UnetTape {
        fingerprint: model.fingerprint(),
        meta,
        inputs: inputs.into_iter().map(Option::unwrap).collect(),
        pre: pre.into_iter().map(Option::unwrap).collect(),
    };
    Ok((z, tape))
}

pub fn unet_backward(
    model: &UnetModel,
    tape: &UnetTape,
    g_z: &VectorField,
) -> Result<UnetGradients> {
    if tape.fingerprint != model.fingerprint() {
        return Err(Error::StaleTape(
            "model parameters changed since the forward pass",
        ));
    }
    tape.meta.check_same("tape vs output gradient", &g_z.meta)?;
    let levels = model.spec.pooling_steps;
    let idx = Index { levels };
    let slope = model.spec.leaky_slope;
    let mut grads = vec![0.0; model.params.len()];

    let back = |layer: usize, g_out: Tensor, act: bool, grads: &mut [f64]| -> Tensor {
        let l = &model.layers[layer];
        let g = if act {
            leaky_relu_backward(&tape.pre[layer], g_out, slope)
        } else {
            g_out
        };
        let (gw, rest) = grads[l.weight_offset..].split_at_mut(l.shape.weight_len());
        conv3d_backward(
            &tape.inputs[layer],
            model.weights(layer),
            &g,
            l.shape,
            gw,
            &mut rest[..l.shape.cout],
        )
    };

    let dims = tape.meta.dims;
    let n = tape.meta.len();
    let head_out = &tape.pre[idx.head()];
    let gain = model.gain();
    let mut g_head = Tensor::zeros(3, dims);
    let mut g_gain = 0.0;
    for c in 0..3 {
        let (gh, ho) = (g_head.channel_mut(c), head_out.channel(c));
        for i in 0..n {
            let g = g_z.data[i][c];
            g_gain += g * ho[i];
            gh[i] = gain * g;
        }
    }
    let gi = model.gain_index();
    grads[gi] = g_gain;

    let mut g_h = back(idx.head(), g_head, false, &mut grads);
    let f = model.spec.base_features;
    let mut g_skips: Vec<Option<Tensor>> = vec![None; levels];
    for lvl in 0..levels {
        let (up, merge) = idx.dec(lvl);
        let g_cat = back(merge, g_h, true, &mut grads);
        let (g_u, g_skip) = split(g_cat, f);
        g_skips[lvl] = Some(g_skip);
        g_h = upsample2_backward(&back(up, g_u, true, &mut grads));
    }
    for lvl in (1..=levels).rev() {
        let (down, conv) = idx.enc(lvl);
        let g_d = back(conv, g_h, true, &mut grads);
        g_h = back(down, g_d, true, &mut grads);
        let skip = g_skips[lvl - 1].take().expect("skip gradient");
        for (a, b) in g_h.data.iter_mut().zip(&skip.data) {
            *a += b;
        }
    }
    let (a, b) = idx.enc(0);
    let g_a = back(b, g_h, true, &mut grads);
    let g_x = back(a, g_a, true, &mut grads);

    Ok(UnetGradients {
        params: grads,
        wm: ScalarVolume::new(tape.meta, g_x.channel(0).to_vec())?,
        wmgm: ScalarVolume::new(tape.meta, g_x.channel(1).to_vec())?,
    })
}

/// Zero-pads a PV map up to `dims`.
fn pad_to(v: &ScalarVolume, dims: [usize; 3]) -> Result<ScalarVolume> {
    let meta = GridMeta::new(dims, v.meta.spacing_mm)?;
    let src = v.meta.dims;
    Ok(ScalarVolume::from_fn(meta, |x, y, z| {
        if x < src[0] && y < src[1] && z < src[2] {
            v.data[v.meta.index(x, y, z)]
        } else {
            0.0
        }
    }))
}

/// Single-pass registration: pads to the network's divisor, regresses z,
/// crops, and integrates both directions.
pub fn infer_velocity(
    model: &UnetModel,
    wm: &ScalarVolume,
    wmgm: &ScalarVolume,
    loss: &LossConfig,
) -> Result<RegistrationResult> {
    wm.meta.check_same("wm vs wm+gm", &wmgm.meta)?;
    let d = model.spec.divisor();
    let padded = wm.meta.dims.map(|n| n.div_ceil(d) * d);
    let z = if padded == wm.meta.dims {
        unet_forward(model, wm, wmgm)?.0
    } else {
        let (zp, _) = unet_forward(model, &pad_to(wm, padded)?, &pad_to(wmgm, padded)?)?;
        VectorField::from_fn(wm.meta, |x, y, z| zp.data[zp.meta.index(x, y, z)])
    };
    let eval = evaluate(wm, wmgm, &z, loss)?;
    Ok(RegistrationResult {
        velocity: z,
        phi: eval.phi,
        phi_neg: eval.phi_neg,
        loss_history: vec![eval.breakdown.total],
        loss: eval.breakdown,
        iterations: 0,
    })
}
