//! Dataset directory layout: `caseNNNN_{a,b,mask}.vvol` plus `manifest.json`.

use std::path::{Path, PathBuf};

use cyclediff_core::phantom::{generate_phantom_pair, PhantomSpec};
use cyclediff_core::rng::derive_seed;
use cyclediff_core::volume::Volume;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::vvol;

pub const MANIFEST_SCHEMA: &str = "cyclediff.dataset.v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub seed: u64,
    pub count: usize,
    pub spec: PhantomSpec,
    pub cases: Vec<String>,
}

pub fn case_name(i: usize) -> String {
    format!("case{i:04}")
}

/// Generates `count` phantom pairs into `out`; per-case seeds derive from
/// the master seed, so the dataset is reproducible file-for-file.
pub fn generate_dataset(
    out: &Path,
    count: usize,
    spec_template: &PhantomSpec,
    seed: u64,
) -> AppResult<Manifest> {
    std::fs::create_dir_all(out)
        .map_err(|e| AppError::config(format!("cannot create {}: {e}", out.display())))?;
    let mut cases = Vec::with_capacity(count);
    for i in 0..count {
        let spec = PhantomSpec {
            seed: derive_seed(seed, &[i as u64]),
            ..spec_template.clone()
        };
        let (a, b, mask) = generate_phantom_pair(&spec)?;
        let name = case_name(i);
        write_case(out, &name, &a, &b, &mask)?;
        cases.push(name);
    }
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.to_string(),
        seed,
        count,
        spec: spec_template.clone(),
        cases,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out.join("manifest.json"), json)?;
    Ok(manifest)
}

fn write_case(dir: &Path, name: &str, a: &Volume, b: &Volume, mask: &Volume) -> AppResult<()> {
    for (suffix, v) in [("a", a), ("b", b), ("mask", mask)] {
        vvol::write_volume(v, &dir.join(format!("{name}_{suffix}.vvol")))
            .map_err(|e| AppError::config(e.to_string()))?;
    }
    Ok(())
}

/// One co-registered pair.
#[derive(Clone, Debug)]
pub struct CasePair {
    pub name: String,
    pub a: Volume,
    pub b: Volume,
}

/// Loads all `caseNNNN_a/b.vvol` pairs in name order.
pub fn load_pairs(dir: &Path) -> AppResult<Vec<CasePair>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| AppError::config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let f = e.file_name().to_string_lossy().to_string();
            f.strip_suffix("_a.vvol").map(|s| s.to_string())
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(AppError::config(format!(
            "no case pairs (caseNNNN_a.vvol) in {}",
            dir.display()
        )));
    }
    names
        .into_iter()
        .map(|name| {
            let a = vvol::read_volume(&dir.join(format!("{name}_a.vvol")))
                .map_err(|e| AppError::config(e.to_string()))?;
            let b = vvol::read_volume(&dir.join(format!("{name}_b.vvol")))
                .map_err(|e| AppError::config(e.to_string()))?;
            if a.extents() != b.extents() {
                return Err(AppError::config(format!(
                    "case {name}: modality extents differ"
                )));
            }
            Ok(CasePair { name, a, b })
        })
        .collect()
}

/// Path of one case's volume by suffix (`a`, `b`, `mask`).
pub fn case_path(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}_{suffix}.vvol"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            extents: [16, 16, 8],
            ..Default::default()
        }
    }

    #[test]
    fn generate_writes_expected_files_and_is_reproducible() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        generate_dataset(d1.path(), 2, &small_spec(), 42).unwrap();
        generate_dataset(d2.path(), 2, &small_spec(), 42).unwrap();
        for name in ["case0000", "case0001"] {
            for suffix in ["a", "b", "mask"] {
                let p1 = case_path(d1.path(), name, suffix);
                let p2 = case_path(d2.path(), name, suffix);
                assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
            }
        }
        assert_eq!(
            std::fs::read(d1.path().join("manifest.json")).unwrap(),
            std::fs::read(d2.path().join("manifest.json")).unwrap()
        );

        let pairs = load_pairs(d1.path()).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].name, "case0000");
    }

    #[test]
    fn zero_cases_yields_manifest_only() {
        let d = tempdir().unwrap();
        let m = generate_dataset(d.path(), 0, &small_spec(), 1).unwrap();
        assert!(m.cases.is_empty());
        assert!(d.path().join("manifest.json").exists());
        assert!(load_pairs(d.path()).is_err());
    }
}
