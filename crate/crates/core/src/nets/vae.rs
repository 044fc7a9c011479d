//! Convolutional VAE with 4× spatial reduction.

use serde::{Deserialize, Serialize};

use super::{add_conv, add_norm, conv, norm_act, View};
use crate::error::{dim_err, Result};
use crate::rng::Stream;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const REDUCTION: usize = 4;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub channels: [usize; 2],
    pub latent_channels: usize,
    pub kl_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { channels: [16, 32], latent_channels: 4, kl_weight: 1e-3 }
    }
}

#[derive(Clone, Debug)]
pub struct Vae {
    pub config: VaeConfig,
    pub params: ParamStore,
}

/// Encoder outputs for one batch, as plain tensors.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub mean: Tensor,
    pub logvar: Tensor,
    pub z: Tensor,
}

impl Vae {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        let mut rng = Stream::child(seed, "vae-init");
        let [c0, c1] = config.channels;
        let cz = config.latent_channels;
        let mut p = ParamStore::new();
        add_conv(&mut p, "enc.in", IMAGE_CHANNELS, c0, 3, &mut rng)?;
        add_norm(&mut p, "enc.n0", c0)?;
        add_conv(&mut p, "enc.down0", c0, c1, 3, &mut rng)?;
        add_norm(&mut p, "enc.n1", c1)?;
        add_conv(&mut p, "enc.down1", c1, c1, 3, &mut rng)?;
        add_norm(&mut p, "enc.n2", c1)?;
        add_conv(&mut p, "enc.out", c1, 2 * cz, 3, &mut rng)?;
        add_conv(&mut p, "dec.in", cz, c1, 3, &mut rng)?;
        add_norm(&mut p, "dec.n0", c1)?;
        add_conv(&mut p, "dec.up0", c1, c0, 3, &mut rng)?;
        add_norm(&mut p, "dec.n1", c0)?;
        add_conv(&mut p, "dec.up1", c0, c0, 3, &mut rng)?;
        add_norm(&mut p, "dec.n2", c0)?;
        add_conv(&mut p, "dec.out", c0, IMAGE_CHANNELS, 3, &mut rng)?;
        Ok(Self { config, params: p })
    }

    pub fn latent_shape(&self, height: usize, width: usize) -> [usize; 3] {
        [self.config.latent_channels, height / REDUCTION, width / REDUCTION]
    }

    /// `x: [B, 3, H, W]` → `(mean, logvar)`, each `[B, C_z, H/4, W/4]`.
    pub fn encode(&self, tape: &mut Tape, p: &View, x: Var) -> Result<(Var, Var)> {
        match tape.shape(x) {
            [_, c, h, w] if *c == IMAGE_CHANNELS && h % REDUCTION == 0 && w % REDUCTION == 0 && *h > 0 && *w > 0 => {}
            s => return dim_err(format!("VAE input {s:?} must be [B, 3, H, W] with H, W divisible by {REDUCTION}")),
        }
        let h = conv(tape, p, "enc.in", x)?;
        let h = norm_act(tape, p, "enc.n0", h)?;
        let h = conv(tape, p, "enc.down0", h)?;
        let h = tape.avg_pool2x(h)?;
        let h = norm_act(tape, p, "enc.n1", h)?;
        let h = conv(tape, p, "enc.down1", h)?;
        let h = tape.avg_pool2x(h)?;
        let h = norm_act(tape, p, "enc.n2", h)?;
        let h = conv(tape, p, "enc.out", h)?;
        let cz = self.config.latent_channels;
        Ok((tape.narrow(h, 1, 0, cz)?, tape.narrow(h, 1, cz, cz)?))
    }

    /// z = mean + exp(logvar/2)·ξ with ξ drawn from `rng`.
    pub fn reparameterize(tape: &mut Tape, mean: Var, logvar: Var, rng: &mut Stream) -> Result<Var> {
        let shape = tape.shape(mean).to_vec();
        let xi = tape.constant(&shape, rng.normal_vec(shape.iter().product()))?;
        let half = tape.scale(logvar, 0.5)?;
        let std = tape.exp(half)?;
        let noise = tape.mul(std, xi)?;
        tape.add(mean, noise)
    }

    /// `z: [B, C_z, h, w]` → `[B, 3, 4h, 4w]`, bounded by tanh.
    pub fn decode(&self, tape: &mut Tape, p: &View, z: Var) -> Result<Var> {
        match tape.shape(z) {
            [_, c, _, _] if *c == self.config.latent_channels => {}
            s => return dim_err(format!("latent {s:?} must be [B, {}, h, w]", self.config.latent_channels)),
        }
        let h = conv(tape, p, "dec.in", z)?;
        let h = norm_act(tape, p, "dec.n0", h)?;
        let h = tape.upsample2x(h)?;
        let h = conv(tape, p, "dec.up0", h)?;
        let h = norm_act(tape, p, "dec.n1", h)?;
        let h = tape.upsample2x(h)?;
        let h = conv(tape, p, "dec.up1", h)?;
        let h = norm_act(tape, p, "dec.n2", h)?;
        let h = conv(tape, p, "dec.out", h)?;
        tape.tanh(h)
    }

    /// Encode plain tensors (`[3, H, W]` or `[B, 3, H, W]`). Without `rng`, z equals the mean.
    pub fn encode_tensor(&self, x: &Tensor, rng: Option<&mut Stream>) -> Result<Encoded> {
        let single = x.rank() == 3;
        let x4 = if single { x.reshape(&[1, x.shape()[0], x.shape()[1], x.shape()[2]])? } else { x.clone() };
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let view = View::new(&self.params, &b);
        let xv = tape.constant(x4.shape(), x4.data().to_vec())?;
        let (m, lv) = self.encode(&mut tape, &view, xv)?;
        let z = match rng {
            Some(r) => Self::reparameterize(&mut tape, m, lv, r)?,
            None => m,
        };
        let fix = |t: Tensor| -> Result<Tensor> {
            if single {
                t.reshape(&t.shape()[1..])
            } else {
                Ok(t)
            }
        };
        Ok(Encoded { mean: fix(tape.to_tensor(m))?, logvar: fix(tape.to_tensor(lv))?, z: fix(tape.to_tensor(z))? })
    }

    /// Decode plain latents (`[C_z, h, w]` or `[B, C_z, h, w]`).
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let single = z.rank() == 3;
        let z4 = if single { z.reshape(&[1, z.shape()[0], z.shape()[1], z.shape()[2]])? } else { z.clone() };
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let view = View::new(&self.params, &b);
        let zv = tape.constant(z4.shape(), z4.data().to_vec())?;
        let out = self.decode(&mut tape, &view, zv)?;
        let t = tape.to_tensor(out);
        if single {
            t.reshape(&t.shape()[1..])
        } else {
            Ok(t)
        }
    }

    /// Full training objective on a batch; returns the loss var.
    pub fn loss_on_batch(&self, tape: &mut Tape, p: &View, x: &Tensor, rng: &mut Stream) -> Result<Var> {
        let xv = tape.constant(x.shape(), x.data().to_vec())?;
        let (m, lv) = self.encode(tape, p, xv)?;
        let z = Self::reparameterize(tape, m, lv, rng)?;
        let xhat = self.decode(tape, p, z)?;
        vae_loss(tape, xv, m, lv, xhat, self.config.kl_weight)
    }
}

/// MSE(x, x̂) + kl_weight · ½·mean(exp(logvar) + mean² − 1 − logvar).
pub fn vae_loss(tape: &mut Tape, x: Var, mean: Var, logvar: Var, xhat: Var, kl_weight: f64) -> Result<Var> {
    let rec = tape.mse(x, xhat)?;
    let kl = kl_term(tape, mean, logvar)?;
    let kl = tape.scale(kl, kl_weight)?;
    tape.add(rec, kl)
}

/// ½·mean(exp(logvar) + mean² − 1 − logvar).
pub fn kl_term(tape: &mut Tape, mean: Var, logvar: Var) -> Result<Var> {
    let e = tape.exp(logvar)?;
    let m2 = tape.mul(mean, mean)?;
    let s = tape.add(e, m2)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.add_scalar(s, -1.0)?;
    let k = tape.mean(s)?;
    tape.scale(k, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kl_of(mean: Vec<f64>, logvar: Vec<f64>) -> f64 {
        let mut t = Tape::new();
        let n = mean.len();
        let m = t.constant(&[n], mean).unwrap();
        let l = t.constant(&[n], logvar).unwrap();
        let k = kl_term(&mut t, m, l).unwrap();
        t.value(k)[0]
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_of(vec![0.0; 5], vec![0.0; 5]), 0.0);
        assert_eq!(kl_of(vec![1.0], vec![0.0]), 0.5);
    }

    #[test]
    fn perfect_reconstruction_at_prior_is_zero_loss() {
        let mut t = Tape::new();
        let x = t.constant(&[4], vec![0.1, -0.2, 0.3, 0.9]).unwrap();
        let m = t.constant(&[2], vec![0.0; 2]).unwrap();
        let l = t.constant(&[2], vec![0.0; 2]).unwrap();
        let loss = vae_loss(&mut t, x, m, l, x, 1e-3).unwrap();
        assert_eq!(t.value(loss)[0], 0.0);
    }

    #[test]
    fn shapes() {
        let vae = Vae::new(VaeConfig::default(), 3).unwrap();
        let x = Tensor::randn(&[3, 32, 32], 0.5, &mut Stream::new(1));
        let e = vae.encode_tensor(&x, Some(&mut Stream::new(2))).unwrap();
        assert_eq!(e.mean.shape(), &[4, 8, 8]);
        assert_eq!(e.logvar.shape(), &[4, 8, 8]);
        assert_eq!(e.z.shape(), &[4, 8, 8]);
        let y = vae.decode_tensor(&e.z).unwrap();
        assert_eq!(y.shape(), &[3, 32, 32]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn indivisible_input_rejected() {
        let vae = Vae::new(VaeConfig::default(), 3).unwrap();
        let x = Tensor::zeros(&[3, 30, 32]);
        assert!(matches!(vae.encode_tensor(&x, None), Err(crate::Error::Dimension(_))));
        assert!(vae.decode_tensor(&Tensor::zeros(&[3, 8, 8])).is_err());
    }
}
