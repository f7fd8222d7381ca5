use crate::data::LabelVocabulary;
use crate::error::{Error, Result};

/// Restriction of the label space to the rarest classes. Kept indices are
/// the `keep` labels with the smallest positive counts, ties broken by
/// ascending label index, stored sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelFilter {
    kept: Vec<usize>,
}

impl LabelFilter {
    pub fn from_kept(mut kept: Vec<usize>) -> Result<Self> {
        kept.sort_unstable();
        if kept.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::data("label filter repeats a label"));
        }
        if kept.is_empty() {
            return Err(Error::argument("label filter must keep at least one label"));
        }
        Ok(LabelFilter { kept })
    }

    /// Kept vocabulary labels, ascending.
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn keep_count(&self) -> usize {
        self.kept.len()
    }

    /// Position of a vocabulary label within the kept space, if kept.
    pub fn head_index(&self, label: usize) -> Option<usize> {
        self.kept.binary_search(&label).ok()
    }

    /// Vocabulary label of a kept-space index.
    pub fn vocab_label(&self, head_index: usize) -> usize {
        self.kept[head_index]
    }
}

/// Keeps the `keep` labels with the fewest positive samples.
pub fn build_label_filter(vocab: &LabelVocabulary, keep: usize) -> Result<LabelFilter> {
    if keep == 0 {
        return Err(Error::argument("label filter must keep at least one label"));
    }
    if keep > vocab.size() {
        return Err(Error::argument(format!(
            "cannot keep {keep} labels out of a vocabulary of {}",
            vocab.size()
        )));
    }
    let mut order: Vec<usize> = (0..vocab.size()).collect();
    order.sort_by_key(|&l| (vocab.count(l), l));
    order.truncate(keep);
    LabelFilter::from_kept(order)
}
