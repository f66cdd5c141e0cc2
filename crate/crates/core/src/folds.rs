//! Class folds for cross-validation.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{arg_err, Result};

/// One fold of a `fold_count`-way class partition.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FoldSpec {
    pub classes: Vec<String>,
    pub fold_count: usize,
    pub fold_index: usize,
    /// Classes held out for testing in this fold.
    pub test_classes: Vec<String>,
}

impl FoldSpec {
    /// Classes available for training in this fold.
    pub fn train_classes(&self) -> Vec<String> {
        self.classes.iter().filter(|c| !self.test_classes.contains(c)).cloned().collect()
    }
}

/// Splits `classes` into `k` contiguous blocks in the given order. When `k`
/// does not divide the class count the first `len % k` folds get one extra
/// class, so 7 classes over 3 folds give sizes 3, 2, 2.
pub fn make_folds(classes: &[String], k: usize) -> Result<Vec<FoldSpec>> {
    if k == 0 {
        return Err(arg_err!("fold count must be positive"));
    }
    if k > classes.len() {
        return Err(arg_err!("{k} folds requested for {} classes", classes.len()));
    }
    let (base, extra) = (classes.len() / k, classes.len() % k);
    let mut start = 0;
    Ok((0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let test = classes[start..start + len].to_vec();
            start += len;
            FoldSpec { classes: classes.to_vec(), fold_count: k, fold_index: i, test_classes: test }
        })
        .collect())
}
