use super::ProbMap;
use crate::error::{Error, Result};

/// Temperature sharpening `p_j^(1/T) / sum_k p_k^(1/T)`, per voxel.
///
/// Evaluated as `exp((ln p_j - ln p_max) / T)` so small temperatures do not
/// underflow. With two classes this is `p^(1/T) / (p^(1/T) + (1-p)^(1/T))`.
pub fn sharpen(probs: &ProbMap, t: f64) -> Result<ProbMap> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sharpening temperature must be > 0, got {t}"
        )));
    }
    let (classes, n) = (probs.classes(), probs.voxels());
    let mut out = ProbMap::zeros(classes, n);
    let inv_t = 1.0 / t;
    let mut row = vec![0.0; classes];
    for i in 0..n {
        let max = (0..classes).map(|c| probs.get(c, i)).fold(0.0, f64::max);
        if max <= 0.0 {
            return Err(Error::Numerical(format!("voxel {i} has no probability mass")));
        }
        let ln_max = max.ln();
        let mut sum = 0.0;
        for (c, r) in row.iter_mut().enumerate() {
            let p = probs.get(c, i);
            *r = if p > 0.0 { ((p.ln() - ln_max) * inv_t).exp() } else { 0.0 };
            sum += *r;
        }
        for (c, r) in row.iter().enumerate() {
            out.data_mut()[c * n + i] = r / sum;
        }
    }
    Ok(out)
}
