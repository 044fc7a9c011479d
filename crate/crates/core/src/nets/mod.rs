//! Toy-scale networks: hash-embedding text encoder, convolutional VAE and a
//! text-conditioned U-Net with cross-attention.

pub mod text;
pub mod unet;
pub mod vae;

pub use text::{TextEmbedding, TextEncoder};
pub use unet::{Unet, UnetConfig};
pub use vae::{Vae, VaeConfig};

use crate::error::Result;
use crate::rng::Stream;
use crate::tensor::params::Binding;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const GROUPS: usize = 4;

/// Parameters of one network as recorded on a tape.
pub struct View<'a> {
    store: &'a ParamStore,
    binding: &'a Binding,
}

impl<'a> View<'a> {
    pub fn new(store: &'a ParamStore, binding: &'a Binding) -> Self {
        Self { store, binding }
    }

    /// Tape handle of the named parameter. Names are fixed by the network
    /// constructors, so a miss is a programming error.
    pub fn v(&self, name: &str) -> Var {
        let id = self.store.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.binding.var(id)
    }
}

pub(crate) fn add_conv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut Stream) -> Result<()> {
    let std = 1.0 / ((cin * k * k) as f64).sqrt();
    store.add(&format!("{name}.w"), Tensor::randn(&[cout, cin, k, k], std, rng))?;
    store.add(&format!("{name}.b"), Tensor::zeros(&[cout]))?;
    Ok(())
}

pub(crate) fn add_linear(store: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool, rng: &mut Stream) -> Result<()> {
    let std = 1.0 / (din as f64).sqrt();
    store.add(&format!("{name}.w"), Tensor::randn(&[dout, din], std, rng))?;
    if bias {
        store.add(&format!("{name}.b"), Tensor::zeros(&[dout]))?;
    }
    Ok(())
}

pub(crate) fn add_norm(store: &mut ParamStore, name: &str, c: usize) -> Result<()> {
    store.add(&format!("{name}.g"), Tensor::ones(&[c]))?;
    store.add(&format!("{name}.b"), Tensor::zeros(&[c]))?;
    Ok(())
}

/// Same-size convolution (odd kernel, stride 1) with bias.
pub(crate) fn conv(tape: &mut Tape, p: &View, name: &str, x: Var) -> Result<Var> {
    let w = p.v(&format!("{name}.w"));
    let k = tape.shape(w)[2];
    let y = tape.conv2d(x, w, 1, k / 2)?;
    tape.add_bias(y, p.v(&format!("{name}.b")), 1)
}

pub(crate) fn norm_act(tape: &mut Tape, p: &View, name: &str, x: Var) -> Result<Var> {
    let y = tape.group_norm(x, GROUPS, p.v(&format!("{name}.g")), p.v(&format!("{name}.b")))?;
    tape.silu(y)
}

/// Zero every parameter whose name satisfies `pred`.
pub fn zero_params(store: &mut ParamStore, pred: impl Fn(&str) -> bool) {
    let ids: Vec<_> = store.ids().filter(|&id| pred(store.name(id))).collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
}
