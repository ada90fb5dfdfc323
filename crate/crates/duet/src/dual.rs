//! The query/key tower pair: copy initialization, momentum averaging,
//! gradient isolation, and the random layer-dropping schedule applied to the
//! key tower.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    embed_regions, embed_text, forward_encoder, DropMask, EncoderConfig, EncoderOutput, ModelDims,
    ModelLayout,
};
use crate::numeric::{NumericError, Result};
use crate::params::{Bound, ParamStore};
use crate::{Scalar, Tape, Tensor};

/// Two parameter sets of identical structure. The query store trains by
/// gradient; the key store changes only through [`DualNetwork::momentum_update`]
/// or [`DualNetwork::init_key_from_query`] and never tracks gradients.
#[derive(Debug, Clone)]
pub struct DualNetwork {
    pub dims: ModelDims,
    pub layout: ModelLayout,
    pub query: ParamStore,
    pub key: ParamStore,
    /// EMA coefficient m: key <- m*key + (1-m)*query.
    pub momentum: Scalar,
}

impl DualNetwork {
    pub fn new(dims: ModelDims, momentum: Scalar, rng: &mut impl Rng) -> Result<Self> {
        check_momentum(momentum)?;
        let mut query = ParamStore::new();
        let layout = ModelLayout::build(&mut query, &dims, rng)?;
        let key = query.detached_copy();
        Ok(Self {
            dims,
            layout,
            query,
            key,
            momentum,
        })
    }

    /// Copies the query parameters onto the key side, bit for bit.
    pub fn init_key_from_query(&mut self) -> Result<()> {
        if !self.query.congruent(&self.key) {
            return Err(NumericError::Contract(
                "query and key stores are not congruent".into(),
            ));
        }
        self.key = self.query.detached_copy();
        Ok(())
    }

    /// key <- m*key + (1-m)*query, parameter by parameter. The query side is
    /// untouched.
    pub fn momentum_update(&mut self) -> Result<()> {
        check_momentum(self.momentum)?;
        if !self.query.congruent(&self.key) {
            return Err(NumericError::Contract(
                "query and key stores are not congruent".into(),
            ));
        }
        let m = self.momentum;
        for id in self.query.ids() {
            let q = self.query.get(id).values().to_vec();
            for (k, qv) in self.key.get_mut(id).values_mut().iter_mut().zip(q) {
                *k = m * *k + (1.0 - m) * qv;
            }
        }
        Ok(())
    }

    /// One tower's full pass over a single caption/region pair. The binding
    /// decides which tower runs and whether gradients are tracked.
    pub fn forward_pair(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[usize],
        feats: &Tensor,
        boxes: &Tensor,
        drop: Option<&DropMask>,
    ) -> Result<EncoderOutput> {
        let f = tape.constant(feats.values().to_vec(), feats.shape().to_vec())?;
        let b = tape.constant(boxes.values().to_vec(), boxes.shape().to_vec())?;
        let te = embed_text(tape, bound, &self.layout.encoder.embed, tokens)?;
        let ve = embed_regions(tape, bound, &self.layout.encoder.embed, f, b)?;
        forward_encoder(
            tape,
            bound,
            &self.layout.encoder,
            &self.dims.enc,
            te,
            ve,
            drop,
        )
    }
}

fn check_momentum(m: Scalar) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(NumericError::Contract(format!(
            "momentum {m} outside [0, 1]"
        )));
    }
    Ok(())
}

/// m = 1 - 1/I for an epoch of I iterations: longer epochs couple the key
/// tower more tightly to its own history.
pub fn momentum_from_epoch_length(iterations: usize) -> Result<Scalar> {
    if iterations == 0 {
        return Err(NumericError::Contract(
            "epoch length must be at least 1 iteration".into(),
        ));
    }
    Ok(1.0 - 1.0 / iterations as Scalar)
}

/// When the key tower starts dropping layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropMode {
    /// Never drop.
    None,
    /// Drop from the first epoch.
    Even,
    /// Drop only from `activation_epoch` onward.
    DelayedEven,
}

/// Random layer-dropping policy for the key tower. Only even-numbered layers
/// (second, fourth, ... of each stack) are ever eligible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroplayerSchedule {
    pub mode: DropMode,
    /// First epoch (0-based) at which DelayedEven drops.
    pub activation_epoch: usize,
    pub drop_prob: Scalar,
}

impl DroplayerSchedule {
    pub fn none() -> Self {
        Self {
            mode: DropMode::None,
            activation_epoch: 0,
            drop_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(NumericError::Contract(format!(
                "drop probability {} outside [0, 1]",
                self.drop_prob
            )));
        }
        Ok(())
    }

    pub fn active_at(&self, epoch: usize) -> bool {
        match self.mode {
            DropMode::None => false,
            DropMode::Even => true,
            DropMode::DelayedEven => epoch >= self.activation_epoch,
        }
    }
}

/// Samples one key-tower drop mask for a batch. Inactive schedules return
/// all-false without consuming randomness, so resumed runs stay aligned.
pub fn sample_drop_mask(
    schedule: &DroplayerSchedule,
    cfg: &EncoderConfig,
    epoch: usize,
    rng: &mut impl Rng,
) -> DropMask {
    let mut mask = DropMask::none(cfg);
    if !schedule.active_at(epoch) {
        return mask;
    }
    // Even-numbered layers counted from one: odd zero-based indices.
    for flags in [&mut mask.lang, &mut mask.vis, &mut mask.co] {
        for (i, flag) in flags.iter_mut().enumerate() {
            if i % 2 == 1 {
                *flag = rng.gen_bool(schedule.drop_prob);
            }
        }
    }
    mask
}
