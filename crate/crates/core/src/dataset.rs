//! Paired-sample types and the on-disk dataset layout:
//! `<root>/<split>/<sample_id>/{fundus.elft, oct.elft, label.txt}`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelDims;
use crate::elft;
use crate::error::{Error, Result};
use crate::tensor::{dims_str, Tensor};

/// Ordinal severity grade; always strictly below the configured class count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradeLabel(usize);

impl GradeLabel {
    pub fn new(value: usize, num_classes: usize) -> Result<Self> {
        if value >= num_classes {
            return Err(Error::Data(format!(
                "label {value} out of range for {num_classes} classes"
            )));
        }
        Ok(GradeLabel(value))
    }

    pub fn value(self) -> usize {
        self.0
    }
}

/// One sample: a fundus image, an OCT volume, and a grade.
#[derive(Clone, Debug)]
pub struct ModalPair {
    pub fundus: Tensor,
    pub oct: Tensor,
    pub label: GradeLabel,
}

impl ModalPair {
    /// Check both tensors against the configured input dims.
    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        let (h, w) = dims.fundus_input_hw;
        if self.fundus.dims() != [3, h, w] {
            return Err(Error::Shape(format!(
                "fundus tensor is {}, config expects 3x{h}x{w}",
                dims_str(self.fundus.dims())
            )));
        }
        let (t, oh, ow) = dims.oct_input_thw;
        if self.oct.dims() != [t, 1, oh, ow] {
            return Err(Error::Shape(format!(
                "oct tensor is {}, config expects {t}x1x{oh}x{ow}",
                dims_str(self.oct.dims())
            )));
        }
        Ok(())
    }
}

/// Write `pairs` under `<root>/<split>/` with zero-padded sample ids.
pub fn save_split(root: &Path, split: &str, pairs: &[ModalPair]) -> Result<()> {
    let dir = root.join(split);
    fs::create_dir_all(&dir)?;
    for (i, pair) in pairs.iter().enumerate() {
        let sample = dir.join(format!("{i:04}"));
        fs::create_dir_all(&sample)?;
        elft::write_tensor(&sample.join("fundus.elft"), &pair.fundus, elft::DType::F64)?;
        elft::write_tensor(&sample.join("oct.elft"), &pair.oct, elft::DType::F64)?;
        elft::write_string_atomic(&sample.join("label.txt"), &pair.label.value().to_string())?;
    }
    Ok(())
}

/// Load every sample of `<root>/<split>/` in lexicographic sample-id order,
/// validating tensor dims and label range.
pub fn load_split(
    root: &Path,
    split: &str,
    dims: &ModelDims,
    num_classes: usize,
) -> Result<Vec<ModalPair>> {
    let dir = root.join(split);
    let entries = fs::read_dir(&dir)
        .map_err(|e| Error::Data(format!("cannot read dataset split {}: {e}", dir.display())))?;
    let mut ids: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();

    let mut pairs = Vec::with_capacity(ids.len());
    for id in &ids {
        let sample = dir.join(id);
        let fundus = elft::read_tensor(&sample.join("fundus.elft"))
            .map_err(|e| Error::Data(format!("sample {id}: {e}")))?;
        let oct = elft::read_tensor(&sample.join("oct.elft"))
            .map_err(|e| Error::Data(format!("sample {id}: {e}")))?;
        let label_path = sample.join("label.txt");
        let raw = fs::read_to_string(&label_path)
            .map_err(|e| Error::Data(format!("sample {id}: {}: {e}", label_path.display())))?;
        let value: usize = raw
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("sample {id}: label {:?} is not a digit", raw.trim())))?;
        let label = GradeLabel::new(value, num_classes)
            .map_err(|e| Error::Data(format!("sample {id}: {e}")))?;
        let pair = ModalPair { fundus, oct, label };
        pair.validate(dims)
            .map_err(|e| Error::Shape(format!("sample {id}: {e}")))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Split a dataset into train/test parts by a seeded shuffle. `train_fraction`
/// must lie strictly between 0 and 1.
pub fn split_dataset(
    pairs: Vec<ModalPair>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<ModalPair>, Vec<ModalPair>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Param(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = pairs.len();
    let n_train = ((n as f64) * train_fraction).round().clamp(0.0, n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut slots: Vec<Option<ModalPair>> = pairs.into_iter().map(Some).collect();
    let take = |slots: &mut Vec<Option<ModalPair>>, idx: &[usize]| {
        idx.iter().map(|&i| slots[i].take().expect("index used once")).collect::<Vec<_>>()
    };
    let train = take(&mut slots, &order[..n_train]);
    let test = take(&mut slots, &order[n_train..]);
    Ok((train, test))
}
