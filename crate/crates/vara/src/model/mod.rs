//! Model assembly: text encoder, residual attention, hierarchical VAE, and
//! speaking-speed predictor, all reading parameters from one [`ParamStore`].
//!
//! Parameter names are namespaced by owner: `text.` for the encoder, `bu.`
//! for bottom-up stacks, `td.` for top-down groups, `dec.` for the output
//! head, and `speed.` for the speed predictor. Zeroing or inspecting a whole
//! subsystem is a prefix match.

pub mod attention;
pub mod speed;
pub mod text_encoder;
pub mod vdvae;

use crate::config::FullConfig;
use crate::error::Result;
use crate::numerics::{ParamStore, Rng};

/// Build a freshly initialized parameter store for a validated config.
///
/// Initialization order is fixed (text, encoder/decoder, speed), so equal
/// seeds give bitwise-equal stores.
pub fn build_params(cfg: &FullConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    text_encoder::add_params(&mut store, &cfg.model, &mut rng)?;
    vdvae::add_params(&mut store, &cfg.model, &mut rng)?;
    speed::add_params(&mut store, cfg, &mut rng)?;
    Ok(store)
}
