//! Fixed demo scenario: the default toy model, a synthetic validation batch
//! and a reduction template scaled down to the toy's sequence length.

use crate::model::ModelConfig;
use crate::ranker::ValidationBatch;
use crate::reductions::ReductionPlan;

pub const DEMO_SEED: u64 = 1234;
pub const DEMO_BATCH_SEED: u64 = 4321;
pub const DEMO_SUBSETS: [&str; 4] = ["chart", "doc", "ocr", "scene"];
pub const DEMO_ITEMS_PER_SUBSET: usize = 3;
/// `[text prefix][visual][text suffix]` token counts of every demo item.
pub const DEMO_LAYOUT: (usize, usize, usize) = (8, 48, 8);
/// Visual look-back window for the 48-token demo images.
pub const DEMO_ATTENTION_RANGE: usize = 8;

pub fn demo_config() -> ModelConfig {
    ModelConfig::default()
}

pub fn demo_batch(vocab_size: usize) -> ValidationBatch {
    ValidationBatch::synthetic(
        vocab_size,
        &DEMO_SUBSETS,
        DEMO_ITEMS_PER_SUBSET,
        DEMO_LAYOUT,
        DEMO_BATCH_SEED,
    )
}

pub fn demo_template() -> ReductionPlan {
    ReductionPlan {
        attention_range: DEMO_ATTENTION_RANGE,
        ..ReductionPlan::default()
    }
}
