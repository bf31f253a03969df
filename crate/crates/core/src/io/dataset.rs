//! Dataset and run directories.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cube::{load_cube, load_tensor, save_cube, save_tensor};
use crate::error::{Error, Result};
use crate::mixing::{load_endmembers, AbundanceTensor, Dataset, EndmemberMatrix, HsiCube, NonlinearField};

pub const CUBE_FILE: &str = "cube.bin";
pub const ABUNDANCE_FILE: &str = "abund.bin";
pub const ENDMEMBER_FILE: &str = "endmembers.csv";
pub const BFIELD_FILE: &str = "bfield.bin";
pub const GBM_FILE: &str = "gbm_beta.bin";
pub const META_FILE: &str = "meta.json";

/// Generation parameters stored next to a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub model: String,
    pub rows: usize,
    pub cols: usize,
    pub endmembers: usize,
    pub bands: usize,
    /// `None` for a noiseless cube.
    pub snr_db: Option<f64>,
    pub seed: u64,
}

/// Ground truth and cube as read back from a dataset directory.
#[derive(Debug, Clone)]
pub struct Truth {
    pub cube: HsiCube,
    pub abundances: AbundanceTensor,
    pub endmembers: EndmemberMatrix,
    pub bfield: Option<NonlinearField>,
}

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Header-free CSV, one endmember per row.
pub fn endmembers_csv(m: &EndmemberMatrix) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(f32::to_string).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

pub fn save_endmembers(path: &Path, m: &EndmemberMatrix) -> Result<()> {
    write(path, endmembers_csv(m))
}

pub fn save_dataset(dir: &Path, data: &Dataset, meta: &DatasetMeta) -> Result<()> {
    create_dir(dir)?;
    save_cube(&dir.join(CUBE_FILE), &data.cube)?;
    save_tensor(&dir.join(ABUNDANCE_FILE), data.abundances.tensor())?;
    save_endmembers(&dir.join(ENDMEMBER_FILE), &data.endmembers)?;
    if let Some(b) = &data.bfield {
        save_tensor(&dir.join(BFIELD_FILE), b.tensor())?;
    }
    if let Some(g) = &data.gbm {
        save_tensor(&dir.join(GBM_FILE), g.tensor())?;
    }
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::data(e.to_string()))?;
    write(&dir.join(META_FILE), json + "\n")
}

fn require(dir: &Path, name: &str) -> Result<std::path::PathBuf> {
    let path = dir.join(name);
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::data(format!("missing file {}", path.display())))
    }
}

pub fn load_dataset_cube(dir: &Path) -> Result<HsiCube> {
    load_cube(&require(dir, CUBE_FILE)?)
}

pub fn load_truth(dir: &Path) -> Result<Truth> {
    let cube = load_dataset_cube(dir)?;
    let estimates = load_estimates(dir)?;
    Ok(Truth {
        cube,
        abundances: estimates.abundances,
        endmembers: estimates.endmembers,
        bfield: estimates.bfield,
    })
}

/// Endmembers, abundances and optional B field of a run or dataset
/// directory.
#[derive(Debug, Clone)]
pub struct Estimates {
    pub abundances: AbundanceTensor,
    pub endmembers: EndmemberMatrix,
    pub bfield: Option<NonlinearField>,
}

pub fn load_estimates(dir: &Path) -> Result<Estimates> {
    let abundances = AbundanceTensor::new(load_tensor(&require(dir, ABUNDANCE_FILE)?)?)?;
    let endmembers = load_endmembers(require(dir, ENDMEMBER_FILE)?)?;
    let b_path = dir.join(BFIELD_FILE);
    let bfield = if b_path.exists() {
        Some(NonlinearField::new(load_tensor(&b_path)?)?)
    } else {
        None
    };
    if abundances.endmembers() != endmembers.count() {
        return Err(Error::data(format!(
            "{}: {} abundance channels but {} endmembers",
            dir.display(),
            abundances.endmembers(),
            endmembers.count()
        )));
    }
    Ok(Estimates {
        abundances,
        endmembers,
        bfield,
    })
}

/// Binary 8-bit PGM of a `(rows, cols)` map with values clamped to
/// `[lo, hi]`. For viewing only.
pub fn pgm(rows: usize, cols: usize, values: impl Iterator<Item = f32>, lo: f32, hi: f32) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    let span = (hi - lo).max(f32::MIN_POSITIVE);
    out.extend(values.take(rows * cols).map(|v| {
        let t = ((v - lo) / span).clamp(0.0, 1.0);
        (t * 255.0).round() as u8
    }));
    out
}

/// One PGM per abundance channel, named `abund_<k>.pgm`.
pub fn save_abundance_pgms(dir: &Path, a: &AbundanceTensor) -> Result<()> {
    let (rows, cols, r) = (a.rows(), a.cols(), a.endmembers());
    let data = a.tensor().data();
    for k in 0..r {
        let bytes = pgm(rows, cols, data.iter().skip(k).step_by(r).copied(), 0.0, 1.0);
        write(&dir.join(format!("abund_{k}.pgm")), bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixing::{gen_dataset, MixingModel};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for model in [MixingModel::Ppnmm, MixingModel::Lmm] {
            let path = dir.path().join(model.to_string());
            let data = gen_dataset(model, 4, 5, 3, 6, 30.0, 2).unwrap();
            let meta = DatasetMeta {
                model: model.to_string(),
                rows: 4,
                cols: 5,
                endmembers: 3,
                bands: 6,
                snr_db: Some(30.0),
                seed: 2,
            };
            save_dataset(&path, &data, &meta).unwrap();
            let t = load_truth(&path).unwrap();
            assert_eq!(t.cube.tensor(), data.cube.tensor());
            assert_eq!(t.abundances.tensor(), data.abundances.tensor());
            assert_eq!(t.endmembers.tensor(), data.endmembers.tensor());
            assert_eq!(t.bfield.map(|b| b.tensor().clone()), data.bfield.map(|b| b.tensor().clone()));
        }
    }

    #[test]
    fn pgm_layout() {
        let bytes = pgm(1, 3, [0.0, 0.5, 2.0].into_iter(), 0.0, 1.0);
        assert_eq!(&bytes[..11], b"P5\n3 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255]);
    }
}
