//! Finite-difference verification of the render + photometric gradient.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffrender::Reduction;
use crate::error::{Error, Result};
use crate::field::{LatentCode, NeuralField};
use crate::optim::{finite_diff_check, loss_and_grads, FdOptions, FdReport, RenderPass, Term};
use crate::raster::Image;
use crate::render::{render_view, Camera, LatentSource, LightSample, RayMarchConfig};
use crate::train::{photometric_loss, Photometric};

pub struct GradCheck<'a> {
    pub camera: &'a Camera,
    pub latent: &'a LatentCode,
    pub target: &'a Image,
    pub ray_march: &'a RayMarchConfig,
    /// How many parameters to probe.
    pub samples: usize,
    pub seed: u64,
}

/// Compares reverse-mode gradients against central differences on randomly
/// chosen parameters that the render actually reaches (nonzero analytic
/// gradient); untouched entries are trivially zero on both sides.
pub fn photometric_grad_check(field: &NeuralField, check: &GradCheck<'_>, options: &FdOptions) -> Result<FdReport> {
    if !check.target.same_shape(&Image::new(check.camera.width, check.camera.height, 3)) {
        return Err(Error::invalid("target must match the camera resolution"));
    }
    let light = LightSample::ambient_only();
    let pass = RenderPass {
        camera: check.camera,
        latent: LatentSource::Fixed(check.latent),
        light: &light,
        config: check.ray_march,
        seed: check.seed,
    };
    let loss = Photometric { target: check.target };
    let step = loss_and_grads(field, Some(pass), &[Term::View { weight: 1.0, loss: &loss }], 0, Reduction::Sequential)?;
    let grads = step.grads.0;
    let mut candidates: Vec<usize> = (0..grads.len()).filter(|&i| grads[i] != 0.0).collect();
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(check.seed));
    candidates.truncate(check.samples);
    candidates.sort_unstable();

    let mut probe = field.clone();
    let report = finite_diff_check(
        |params| {
            probe.params.values.copy_from_slice(params);
            let view = render_view(&probe, check.camera, LatentSource::Fixed(check.latent), &light, check.ray_march, check.seed)
                .expect("validated above");
            photometric_loss(&view.rgb.data, &check.target.data)
        },
        &field.params.values,
        &grads,
        &candidates,
        options,
    );
    Ok(report)
}
