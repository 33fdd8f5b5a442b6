use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ModelParameters, Network};
use crate::error::Result;

/// Relative error `|a - n| / (|a| + |n|)` between analytic and central-difference
/// gradients, per parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub blocks: BTreeMap<String, f64>,
    /// Norm of the analytic gradient of each block, to spot blocks that were not
    /// exercised.
    pub norms: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.blocks.values().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares the analytic gradient of the objective over all posts with central finite
/// differences of step `h`.
pub fn grad_check(net: &Network<'_>, params: &ModelParameters, h: f64) -> Result<GradCheckReport> {
    let batch: Vec<usize> = (0..net.data.posts()).collect();
    let (_, grads) = net.loss_and_grad(params, &batch)?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .blocks()
        .into_iter()
        .map(|b| (b.name, b.values.to_vec()))
        .collect();
    let mut work = params.clone();
    let mut report = GradCheckReport {
        blocks: BTreeMap::new(),
        norms: BTreeMap::new(),
    };
    for (k, (name, a)) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work.blocks()[k].values[i];
            work.blocks_mut()[k].values[i] = orig + h;
            let plus = net.loss(&work, &batch)?;
            work.blocks_mut()[k].values[i] = orig - h;
            let minus = net.loss(&work, &batch)?;
            work.blocks_mut()[k].values[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        report.blocks.insert(name.clone(), relative_error(a, &numeric));
        report
            .norms
            .insert(name.clone(), a.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    Ok(report)
}
