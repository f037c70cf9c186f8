// Clean pixels cannot be pulled out and repackaged as observations.
use idr_core::dataset::{CleanSet, NoisySet};

fn main() {
    let clean = CleanSet::from_images(Vec::new());
    let _smuggled = NoisySet::from_images(clean.images().to_vec());
}
