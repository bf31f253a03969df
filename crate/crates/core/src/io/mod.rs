//! File formats: raw cubes with JSON sidecars, dataset and run
//! directories, flat run configuration and PGM previews.

mod config;
mod cube;
mod dataset;

pub use config::{parse_ablation, RunConfig, KEYS};
pub use cube::{load_cube, load_header, load_tensor, save_cube, save_tensor, sidecar_path, CubeHeader, DTYPE, ORDER};
pub use dataset::{
    create_dir, endmembers_csv, load_dataset_cube, load_estimates, load_truth, pgm, save_abundance_pgms,
    save_dataset, save_endmembers, DatasetMeta, Estimates, Truth, ABUNDANCE_FILE, BFIELD_FILE, CUBE_FILE,
    ENDMEMBER_FILE, GBM_FILE, META_FILE,
};
