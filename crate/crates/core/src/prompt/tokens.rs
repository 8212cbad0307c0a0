//! Token estimation for instruction budgets.

/// Counts (approximate) model tokens in a piece of text.
pub trait TokenEstimator {
    fn estimate(&self, text: &str) -> usize;
}

/// `ceil(chars / 4)` over Unicode scalar values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QuarterCharEstimator;

impl TokenEstimator for QuarterCharEstimator {
    fn estimate(&self, text: &str) -> usize {
        text.chars().count().div_ceil(4)
    }
}

impl<F> TokenEstimator for F
where
    F: Fn(&str) -> usize,
{
    fn estimate(&self, text: &str) -> usize {
        self(text)
    }
}

pub fn estimate_tokens(text: &str) -> usize {
    QuarterCharEstimator.estimate(text)
}
