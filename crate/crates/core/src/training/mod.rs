//! Full-image training: composite loss, AdamW with two learning-rate groups,
//! per-epoch records and checkpoints.

mod checkpoint;
pub(crate) mod loss;
mod optim;

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, CheckpointHeader, ParamEntry};
pub use loss::{loss_re, loss_sad, total_loss, SAD_COS_LIMIT};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::mixing::HsiCube;
use crate::model::UnmixingNet;
use crate::tensor::{Tape, TensorError};

/// Global gradient norm used when clipping is switched on.
pub const DEFAULT_CLIP_NORM: f32 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the reconstruction error against the spectral angle.
    pub alpha: f32,
    pub epochs: usize,
    /// Rate of the decoder endmember kernel.
    pub lr_endmember: f32,
    /// Rate of every other parameter.
    pub lr_rest: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Global gradient norm bound; `None` leaves gradients untouched.
    pub clip_norm: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            epochs: 600,
            lr_endmember: 1e-5,
            lr_rest: 1e-2,
            weight_decay: 1e-3,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f32| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("alpha", self.alpha)?;
        positive("lr_endmember", self.lr_endmember)?;
        positive("lr_rest", self.lr_rest)?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            positive("clip_norm", c)?;
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig::new(self.lr_endmember, self.lr_rest, self.weight_decay)
    }
}

/// Losses of one epoch, measured on the forward pass before its update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Starts at 1.
    pub epoch: usize,
    pub total: f64,
    pub re: f64,
    pub sad: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainRecord {
    pub epochs: Vec<EpochStats>,
}

impl TrainRecord {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }

    /// `epoch,total,re,sad` rows. Wall time is left out so that identical
    /// runs give identical files.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,total,re,sad\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", e.epoch, e.total, e.re, e.sad);
        }
        s
    }

    /// `epoch,seconds` rows.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.6}", e.epoch, e.seconds);
        }
        s
    }
}

fn at_epoch(epoch: usize) -> impl Fn(TensorError) -> Error {
    move |e| match e {
        TensorError::NonFinite { op } => Error::Numerical(format!("non-finite value in {op} at epoch {epoch}")),
        other => Error::Numerical(format!("epoch {epoch}: {other}")),
    }
}

/// Trains on the whole cube as one batch.
pub fn train(model: &mut UnmixingNet, cube: &HsiCube, cfg: &TrainConfig) -> Result<TrainRecord> {
    train_with(model, cube, cfg, |_, _| Ok(()))
}

/// [`train`] calling `on_epoch` after every update.
pub fn train_with(
    model: &mut UnmixingNet,
    cube: &HsiCube,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &UnmixingNet) -> Result<()>,
) -> Result<TrainRecord> {
    cfg.validate()?;
    run_epochs(model, cube, cfg, &mut on_epoch)
}

fn run_epochs(
    model: &mut UnmixingNet,
    cube: &HsiCube,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats, &UnmixingNet) -> Result<()>,
) -> Result<TrainRecord> {
    if cube.bands() != model.bands() {
        return Err(Error::data(format!("cube has {} bands, model expects {}", cube.bands(), model.bands())));
    }
    let mut opt = AdamW::new(cfg.optimizer(), &model.store);
    let mut record = TrainRecord::default();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let diag = at_epoch(epoch);
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        let y = tape.constant(cube.tensor().clone());
        let out = model.forward(&p, y).map_err(&diag)?;
        let re = out.y_hat.re_loss(y).map_err(&diag)?;
        let sad = out.y_hat.sad_loss(y).map_err(&diag)?;
        let total = re.scale(cfg.alpha).and_then(|r| r.add(sad)).map_err(&diag)?;
        let grads = tape.backward(total).map_err(&diag)?;
        let slots: Vec<Option<&[f32]>> = model.store.ids().map(|id| grads.raw(p[id].id())).collect();
        match cfg.clip_norm {
            Some(max_norm) => {
                let mut owned: Vec<Option<Vec<f32>>> = slots.iter().map(|g| g.map(<[f32]>::to_vec)).collect();
                clip_global_norm(&mut owned, max_norm);
                let clipped: Vec<Option<&[f32]>> = owned.iter().map(|g| g.as_deref()).collect();
                opt.step(&mut model.store, &clipped);
            }
            None => opt.step(&mut model.store, &slots),
        }
        let stats = EpochStats {
            epoch,
            total: f64::from(total.item()),
            re: f64::from(re.item()),
            sad: f64::from(sad.item()),
            seconds: start.elapsed().as_secs_f64(),
        };
        if !stats.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}")));
        }
        on_epoch(&stats, model)?;
        record.epochs.push(stats);
    }
    Ok(record)
}
