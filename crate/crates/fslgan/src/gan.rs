//! DCGAN-style generator/discriminator pair, GAN losses, and single-step
//! training updates.
//!
//! The discriminator is three stride-2 convolution blocks plus a sigmoid
//! classification head over 1×32×32 inputs; the generator mirrors it with
//! transposed convolutions and a final tanh. Images live in [-1, 1].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Dense, Layer, Mode};
use crate::network::{AdamState, Network};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const DEFAULT_LATENT_DIM: usize = 100;
pub const DCGAN_LR: f64 = 2e-4;

#[derive(Debug, Clone)]
pub struct Generator {
    pub network: Network,
    pub latent_dim: usize,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub network: Network,
}

/// First layer index of each convolution block, plus the index one past the
/// last layer. Used by the partitioner: the classification head is folded
/// into the last block.
pub const DISC_BLOCK_STARTS: [usize; 4] = [0, 2, 5, 11];

pub fn build_discriminator(seed: u64) -> Discriminator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        // block 1: 1x32x32 -> 64x16x16
        Layer::Conv2d(Conv2d::new(1, 64, 4, 2, 1, &mut rng)),
        Layer::leaky_relu(0.2),
        // block 2: -> 128x8x8
        Layer::Conv2d(Conv2d::new(64, 128, 4, 2, 1, &mut rng)),
        Layer::BatchNorm2d(BatchNorm2d::new(128, &mut rng)),
        Layer::leaky_relu(0.2),
        // block 3: -> 256x4x4, head folded in
        Layer::Conv2d(Conv2d::new(128, 256, 4, 2, 1, &mut rng)),
        Layer::BatchNorm2d(BatchNorm2d::new(256, &mut rng)),
        Layer::leaky_relu(0.2),
        Layer::flatten(),
        Layer::Dense(Dense::new(256 * 4 * 4, 1, &mut rng)),
        Layer::sigmoid(),
    ];
    Discriminator {
        network: Network::new(layers),
    }
}

pub fn build_generator(latent_dim: usize, seed: u64) -> Generator {
    assert!(latent_dim >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        // Zx1x1 -> 256x4x4
        Layer::ConvTranspose2d(ConvTranspose2d::new(latent_dim, 256, 4, 1, 0, &mut rng)),
        Layer::BatchNorm2d(BatchNorm2d::new(256, &mut rng)),
        Layer::relu(),
        // -> 128x8x8
        Layer::ConvTranspose2d(ConvTranspose2d::new(256, 128, 4, 2, 1, &mut rng)),
        Layer::BatchNorm2d(BatchNorm2d::new(128, &mut rng)),
        Layer::relu(),
        // -> 64x16x16
        Layer::ConvTranspose2d(ConvTranspose2d::new(128, 64, 4, 2, 1, &mut rng)),
        Layer::BatchNorm2d(BatchNorm2d::new(64, &mut rng)),
        Layer::relu(),
        // -> 1x32x32
        Layer::ConvTranspose2d(ConvTranspose2d::new(64, 1, 4, 2, 1, &mut rng)),
        Layer::tanh(),
    ];
    Generator {
        network: Network::new(layers),
        latent_dim,
    }
}

/// Reduced-size pair used by end-to-end gradient checks: 8×8 images, a single
/// conv block each.
pub fn build_tiny_pair(latent_dim: usize, seed: u64) -> (Generator, Discriminator) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = Generator {
        network: Network::new(vec![
            Layer::ConvTranspose2d(ConvTranspose2d::new(latent_dim, 4, 4, 1, 0, &mut rng)),
            Layer::BatchNorm2d(BatchNorm2d::new(4, &mut rng)),
            Layer::relu(),
            Layer::ConvTranspose2d(ConvTranspose2d::new(4, 1, 4, 2, 1, &mut rng)),
            Layer::tanh(),
        ]),
        latent_dim,
    };
    let disc = Discriminator {
        network: Network::new(vec![
            Layer::Conv2d(Conv2d::new(1, 4, 4, 2, 1, &mut rng)),
            Layer::leaky_relu(0.2),
            Layer::flatten(),
            Layer::Dense(Dense::new(4 * 4 * 4, 1, &mut rng)),
            Layer::sigmoid(),
        ]),
    };
    (gen, disc)
}

/// Draw a standard-normal latent batch shaped (batch, Z, 1, 1).
pub fn sample_latent(batch: usize, latent_dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 1.0).unwrap();
    let mut t = Tensor::zeros(&[batch, latent_dim, 1, 1]);
    for v in t.data_mut() {
        *v = dist.sample(&mut rng);
    }
    t
}

fn check_unit_interval(t: &Tensor, context: &str) -> Result<()> {
    for &v in t.data() {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Domain {
                context: context.into(),
                value: v,
                domain: "(0, 1)".into(),
            });
        }
    }
    Ok(())
}

/// Mean of the two half-losses: -[ln D(x) + ln(1 - D(G(z)))] / 2.
pub fn d_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<f64> {
    check_unit_interval(d_real, "d_loss (real)")?;
    check_unit_interval(d_fake, "d_loss (fake)")?;
    let n_r = d_real.len() as f64;
    let n_f = d_fake.len() as f64;
    let real: f64 = d_real.data().iter().map(|v| -v.ln()).sum::<f64>() / n_r;
    let fake: f64 = d_fake.data().iter().map(|v| -(1.0 - v).ln()).sum::<f64>() / n_f;
    Ok((real + fake) / 2.0)
}

/// Gradients of [`d_loss`] w.r.t. the two discriminator outputs.
pub fn d_loss_grads(d_real: &Tensor, d_fake: &Tensor) -> (Tensor, Tensor) {
    let n_r = d_real.len() as f64;
    let n_f = d_fake.len() as f64;
    let mut g_real = d_real.clone();
    for v in g_real.data_mut() {
        *v = -1.0 / (2.0 * n_r * *v);
    }
    let mut g_fake = d_fake.clone();
    for v in g_fake.data_mut() {
        *v = 1.0 / (2.0 * n_f * (1.0 - *v));
    }
    (g_real, g_fake)
}

/// Non-saturating generator loss: mean of -ln D(G(z)).
pub fn g_loss(d_fake: &Tensor) -> Result<f64> {
    check_unit_interval(d_fake, "g_loss")?;
    let n = d_fake.len() as f64;
    Ok(d_fake.data().iter().map(|v| -v.ln()).sum::<f64>() / n)
}

/// Gradient of [`g_loss`] w.r.t. the discriminator output.
pub fn g_loss_grad(d_fake: &Tensor) -> Tensor {
    let n = d_fake.len() as f64;
    let mut g = d_fake.clone();
    for v in g.data_mut() {
        *v = -1.0 / (n * *v);
    }
    g
}

/// One Adam update on the discriminator from a real batch and a detached fake
/// batch. Returns the pre-update loss.
pub fn discriminator_step(
    disc: &mut Discriminator,
    real_batch: &Tensor,
    fake_batch: &Tensor,
    optimizer: &mut AdamState,
) -> Result<f64> {
    if real_batch.shape()[0] != fake_batch.shape()[0] {
        return Err(Error::ShapeMismatch {
            context: "discriminator_step: batch sizes differ".into(),
            expected: real_batch.shape().to_vec(),
            got: fake_batch.shape().to_vec(),
        });
    }
    disc.network.mode = Mode::Train;
    disc.network.zero_grads();
    let d_real = disc.network.forward(real_batch)?;
    let (g_real, _) = d_loss_grads(&d_real, &d_real);
    disc.network.backward(&g_real)?;
    let d_fake = disc.network.forward(fake_batch)?;
    let (_, g_fake) = d_loss_grads(&d_fake, &d_fake);
    disc.network.backward(&g_fake)?;
    let loss = d_loss(&d_real, &d_fake)?;
    optimizer.update(&mut disc.network)?;
    disc.network.zero_grads();
    Ok(loss)
}

/// One Adam update on the generator through a frozen discriminator. The
/// discriminator is evaluated in `Probe` mode and its parameter gradients are
/// never accumulated, so its state is untouched. Returns the pre-update loss.
pub fn generator_step(
    gen: &mut Generator,
    disc: &mut Discriminator,
    latent_batch: &Tensor,
    optimizer: &mut AdamState,
) -> Result<f64> {
    gen.network.mode = Mode::Train;
    gen.network.zero_grads();
    let fake = gen.network.forward(latent_batch)?;
    let disc_mode = disc.network.mode;
    disc.network.mode = Mode::Probe;
    let d_fake = disc.network.forward(&fake)?;
    let loss = g_loss(&d_fake)?;
    let up = g_loss_grad(&d_fake);
    let d_range = 0..disc.network.len();
    let grad_at_image = disc.network.backward_range(d_range, &up, false)?;
    disc.network.mode = disc_mode;
    gen.network.backward(&grad_at_image)?;
    optimizer.update(&mut gen.network)?;
    gen.network.zero_grads();
    Ok(loss)
}

/// Generate a detached fake image batch without mutating the generator.
pub fn generate(gen: &mut Generator, latent: &Tensor) -> Result<Tensor> {
    let prev = gen.network.mode;
    gen.network.mode = Mode::Probe;
    let out = gen.network.forward(latent);
    gen.network.mode = prev;
    out
}
