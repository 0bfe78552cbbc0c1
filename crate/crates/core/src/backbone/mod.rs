//! Segmentation model abstraction, the toy U-Net, Adam and checkpoints.
//!
//! Any backbone can be plugged into the trainers by implementing
//! [`SegModel`]: a model owns only its architecture, while parameters live in
//! a [`ModelState`] so that student and teacher share one model object.
//! Backbones with several side outputs must reduce them to a single logit
//! map before returning from `forward_cached`.

mod adam;
pub mod checkpoint;
pub mod layers;
mod state;
mod unet;

use std::sync::Arc;

pub use adam::{optimizer_step, AdamConfig, AdamMoments, StepConfig};
pub use checkpoint::Checkpoint;
pub use state::{Gradients, ModelState, ParamLayout, ParamSpec};
pub use unet::{UNet, UNetConfig};

use crate::data::{ImageTensor, SoftMask};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Plane, Real};

pub trait SegModel: Send + Sync {
    type Cache<T: Real>: Send;

    fn architecture_id(&self) -> String;

    fn layout(&self) -> Arc<ParamLayout>;

    fn in_channels(&self) -> usize;

    /// Fresh parameters (zero head, so the initial output is 0.5 everywhere).
    fn init_params(&self, seed: u64) -> Vec<f32>;

    /// Logits for one `C×H×W` input plus whatever the backward pass needs.
    fn forward_cached<T: Real>(
        &self,
        params: &[T],
        input: &[T],
        h: usize,
        w: usize,
    ) -> Result<(Plane<T>, Self::Cache<T>)>;

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂logits`.
    fn backward_cached<T: Real>(
        &self,
        params: &[T],
        cache: &Self::Cache<T>,
        upstream: &Plane<T>,
        grads: &mut [T],
    ) -> Result<()>;

    fn init_state(&self, seed: u64) -> ModelState<f32> {
        ModelState::new(
            self.architecture_id(),
            self.layout(),
            self.init_params(seed),
        )
        .expect("init_params matches layout")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T = f32> {
    pub logits: Plane<T>,
    pub probabilities: Plane<T>,
}

impl<T: Real> Prediction<T> {
    pub fn from_logits(logits: Plane<T>) -> Self {
        let probabilities = logits.map(sigmoid);
        Self {
            logits,
            probabilities,
        }
    }
}

impl Prediction<f32> {
    pub fn mask(&self) -> SoftMask {
        SoftMask::new(self.probabilities.clone()).expect("sigmoid output is within [0, 1]")
    }
}

fn check_state<M: SegModel, T: Real>(model: &M, state: &ModelState<T>) -> Result<()> {
    if state.architecture_id != model.architecture_id() {
        return Err(Error::Architecture {
            expected: model.architecture_id(),
            actual: state.architecture_id.clone(),
        });
    }
    state.check_finite()
}

/// Image pixels as a model input of scalar type `T`.
pub fn image_input<T: Real>(image: &ImageTensor) -> Vec<T> {
    image.pixels().iter().map(|&v| T::lit(v as f64)).collect()
}

/// Runs the model on a raw `C×H×W` buffer.
pub fn forward_raw<M: SegModel, T: Real>(
    model: &M,
    state: &ModelState<T>,
    input: &[T],
    h: usize,
    w: usize,
) -> Result<Prediction<T>> {
    check_state(model, state)?;
    let (logits, _) = model.forward_cached(&state.values, input, h, w)?;
    Ok(Prediction::from_logits(logits))
}

pub fn forward<M: SegModel>(
    model: &M,
    state: &ModelState<f32>,
    image: &ImageTensor,
) -> Result<Prediction<f32>> {
    check_state(model, state)?;
    let (logits, _) =
        model.forward_cached(&state.values, image.pixels(), image.height(), image.width())?;
    Ok(Prediction::from_logits(logits))
}

/// Parameter gradients of `Σ upstream ⊙ logits`, recomputing the forward pass.
pub fn backward_raw<M: SegModel, T: Real>(
    model: &M,
    state: &ModelState<T>,
    input: &[T],
    h: usize,
    w: usize,
    upstream: &Plane<T>,
) -> Result<Gradients<T>> {
    check_state(model, state)?;
    if upstream.shape() != (h, w) {
        return Err(Error::ShapeMismatch {
            id: "upstream".into(),
            expected: (h, w),
            actual: upstream.shape(),
        });
    }
    let (_, cache) = model.forward_cached(&state.values, input, h, w)?;
    let mut grads = Gradients::zeros(Arc::clone(&state.layout));
    model.backward_cached(&state.values, &cache, upstream, &mut grads.values)?;
    Ok(grads)
}

pub fn backward<M: SegModel>(
    model: &M,
    state: &ModelState<f32>,
    image: &ImageTensor,
    upstream: &Plane<f32>,
) -> Result<Gradients<f32>> {
    backward_raw(
        model,
        state,
        image.pixels(),
        image.height(),
        image.width(),
        upstream,
    )
}

/// Forward + loss + backward for one input. `loss` maps logits to
/// `(value, ∂value/∂logits)`.
pub fn value_and_grad<M, T, F>(
    model: &M,
    params: &[T],
    input: &[T],
    h: usize,
    w: usize,
    grads: &mut [T],
    loss: F,
) -> Result<f64>
where
    M: SegModel,
    T: Real,
    F: FnOnce(&Plane<T>) -> Result<(f64, Plane<T>)>,
{
    let (logits, cache) = model.forward_cached(params, input, h, w)?;
    let (value, upstream) = loss(&logits)?;
    model.backward_cached(params, &cache, &upstream, grads)?;
    Ok(value)
}
