// There is no conversion from clean references to observations.
use idr_core::dataset::{CleanSet, NoisySet};

fn main() {
    let clean = CleanSet::from_images(Vec::new());
    let _noisy: NoisySet = clean.into();
}
