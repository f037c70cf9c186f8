// Training entry points take the noisy observations only.
use idr_core::dataset::CleanSet;
use idr_core::noise::NoiseSpec;
use idr_core::scheduler::{train_fast_idr, IdrConfig, RunContext};

fn main() {
    let clean = CleanSet::from_images(Vec::new());
    let spec = NoiseSpec::gaussian(5.0, 20.0);
    let _ = train_fast_idr(&clean, &spec, &IdrConfig::default(), &RunContext::default());
}
