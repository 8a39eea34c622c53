//! Shared fixtures for the benchmarks in `benches/`.

use plgdf::data::generate_phantom;
use plgdf::plgdf::ProbMap;
use plgdf::rng::seeded;
use plgdf::volume::Volume;

/// Image and label of a two-class noisy phantom.
pub fn phantom(edge: usize, seed: u64) -> (Volume, Volume) {
    let p = generate_phantom([edge; 3], 2, 0.1, &mut seeded(seed)).expect("valid phantom");
    (p.image, p.label)
}

/// A smooth, strictly positive probability map.
pub fn probs(classes: usize, voxels: usize, phase: f64) -> ProbMap {
    let mut data = vec![0.0; classes * voxels];
    for i in 0..voxels {
        let raw: Vec<f64> = (0..classes)
            .map(|c| 1.5 + ((i as f64 * 0.37 + c as f64) * phase).sin())
            .collect();
        let z: f64 = raw.iter().sum();
        for c in 0..classes {
            data[c * voxels + i] = raw[c] / z;
        }
    }
    ProbMap::new(classes, voxels, data).expect("consistent layout")
}
