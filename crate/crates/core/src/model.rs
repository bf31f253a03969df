//! The full unmixing network: encoder, physics decoder and their
//! parameters.

use crate::decoder::Decoder;
use crate::encoder::{Ablation, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::mixing::{AbundanceTensor, EndmemberMatrix, HsiCube, NonlinearField};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{self, Tape, Tensor, Var};

/// Forward-pass outputs recorded on a tape.
pub struct Outputs<'t> {
    /// `(rows, cols, R)` abundances.
    pub a_hat: Var<'t>,
    pub y_lin: Var<'t>,
    /// `(rows, cols, 1)` nonlinear coefficients.
    pub b_hat: Var<'t>,
    pub y_hat: Var<'t>,
}

/// Detached predictions for one cube.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub abundances: AbundanceTensor,
    pub bfield: NonlinearField,
    pub reconstruction: HsiCube,
}

#[derive(Debug, Clone)]
pub struct UnmixingNet {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    bands: usize,
}

impl UnmixingNet {
    /// Network for `bands`-band cubes whose decoder starts at
    /// `initial_endmembers`; remaining weights are drawn from `seed`.
    pub fn new(cfg: &EncoderConfig, bands: usize, initial_endmembers: &EndmemberMatrix, seed: u64) -> Result<Self> {
        if initial_endmembers.bands() != bands {
            return Err(Error::data(format!(
                "initial endmembers have {} bands, cube has {bands}",
                initial_endmembers.bands()
            )));
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let encoder = Encoder::new(&mut init, cfg, bands, initial_endmembers.count())?;
        let decoder = Decoder::new(&mut init, initial_endmembers);
        Ok(Self {
            store,
            encoder,
            decoder,
            bands,
        })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn endmember_count(&self) -> usize {
        self.store.get(self.decoder.weights).shape()[0]
    }

    pub fn set_ablation(&mut self, ablation: Ablation) {
        self.encoder.ablation = ablation;
    }

    /// Enables or disables the nonlinear head.
    pub fn set_nonlinear(&mut self, enabled: bool) {
        self.decoder.nonlinear = enabled;
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, y: Var<'t>) -> tensor::Result<Outputs<'t>> {
        let a_hat = self.encoder.forward(p, y)?;
        let d = self.decoder.forward(p, a_hat, y)?;
        Ok(Outputs {
            a_hat,
            y_lin: d.y_lin,
            b_hat: d.b_hat,
            y_hat: d.y_hat,
        })
    }

    pub fn predict(&self, cube: &HsiCube) -> Result<Prediction> {
        if cube.bands() != self.bands {
            return Err(Error::data(format!("cube has {} bands, model expects {}", cube.bands(), self.bands)));
        }
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let out = self.forward(&p, tape.constant(cube.tensor().clone()))?;
        let detach = |v: Var<'_>| -> Tensor { v.value().as_ref().clone() };
        Ok(Prediction {
            abundances: AbundanceTensor::new(detach(out.a_hat))
                .map_err(|e| Error::Numerical(format!("abundance estimate violates constraints: {e}")))?,
            bfield: NonlinearField::new(detach(out.b_hat))?,
            reconstruction: HsiCube::new(detach(out.y_hat))?,
        })
    }

    /// Current endmember estimate.
    pub fn endmembers(&self) -> Result<EndmemberMatrix> {
        self.decoder.extract_endmembers(&self.store)
    }
}
