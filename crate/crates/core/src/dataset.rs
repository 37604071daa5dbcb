//! On-disk synthetic datasets: one set of volume files per case plus an
//! `index.json` holding the case list and the seed split.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Volume;
use crate::synth::{generate, split_seeds, CaseMeta, Splits, SynthConfig};
use crate::train::Sample;

pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!(
                "unknown split `{other}` (expected train, val or test)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub synth: SynthConfig,
    pub splits: Splits,
    pub cases: Vec<CaseMeta>,
}

impl DatasetIndex {
    pub fn seeds(&self, split: Split) -> &[u64] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }
}

pub fn case_id(seed: u64) -> String {
    format!("case{seed:06}")
}

/// Generates `count` cases from consecutive seeds and writes them to `dir`.
pub fn write_dataset(
    dir: &Path,
    first_seed: u64,
    count: usize,
    synth: &SynthConfig,
) -> Result<DatasetIndex> {
    if count == 0 {
        return Err(Error::invalid("dataset needs at least one case"));
    }
    fs::create_dir_all(dir)?;
    let seeds: Vec<u64> = (0..count as u64).map(|i| first_seed + i).collect();
    let mut cases = Vec::with_capacity(count);
    for &seed in &seeds {
        let case = generate(seed, synth)?;
        let id = case_id(seed);
        let spacing = case.density.spacing();
        Volume::from_tensor(&case.inputs, spacing)?.save(dir.join(format!("{id}_inputs.bvol")))?;
        Volume::from_tensor(&case.labels, spacing)?.save(dir.join(format!("{id}_labels.bvol")))?;
        Volume::from_field(&case.density).save(dir.join(format!("{id}_density.bvol")))?;
        cases.push(case.meta);
    }
    let index = DatasetIndex {
        synth: synth.clone(),
        splits: split_seeds(&seeds),
        cases,
    };
    fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let text = fs::read_to_string(dir.join(INDEX_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_sample(dir: &Path, seed: u64) -> Result<Sample> {
    let id = case_id(seed);
    let inputs = Volume::load(dir.join(format!("{id}_inputs.bvol")))?;
    let labels = Volume::load(dir.join(format!("{id}_labels.bvol")))?;
    if inputs.dims != labels.dims {
        return Err(Error::ShapeMismatch {
            op: "case volumes",
            lhs: inputs.dims.to_vec(),
            rhs: labels.dims.to_vec(),
        });
    }
    Ok(Sample {
        id,
        spacing: inputs.spacing,
        inputs: inputs.to_tensor(),
        labels: labels.to_tensor(),
    })
}

/// Loads a split, optionally keeping only its first `limit` cases.
pub fn load_split(dir: &Path, split: Split, limit: Option<usize>) -> Result<Vec<Sample>> {
    let index = read_index(dir)?;
    let seeds = index.seeds(split);
    let take = limit.unwrap_or(seeds.len()).min(seeds.len());
    if take == 0 {
        return Err(Error::invalid(format!("split {split:?} is empty")));
    }
    seeds[..take].iter().map(|&s| load_sample(dir, s)).collect()
}
