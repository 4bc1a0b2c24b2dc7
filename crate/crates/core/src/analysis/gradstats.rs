use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamTree;
use crate::tensor::Element;

pub const DEFAULT_HIST_BINS: usize = 64;
pub const DEFAULT_HIST_RANGE: (f64, f64) = (-0.01, 0.01);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRecord {
    pub step: usize,
    pub path: String,
    pub mean: f64,
    /// Population variance of the gradient components.
    pub variance: f64,
    pub histogram: Vec<u64>,
}

/// Per-step gradient statistics for a fixed set of parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradTrace {
    pub range: (f64, f64),
    pub bins: usize,
    pub records: Vec<GradRecord>,
}

impl Default for GradTrace {
    fn default() -> Self {
        GradTrace::new(DEFAULT_HIST_RANGE, DEFAULT_HIST_BINS)
    }
}

impl GradTrace {
    pub fn new(range: (f64, f64), bins: usize) -> Self {
        assert!(
            bins > 0 && range.0 < range.1,
            "histogram needs bins and a non-empty range"
        );
        GradTrace {
            range,
            bins,
            records: Vec::new(),
        }
    }

    /// Bin of `v`, clamping out-of-range values to the edge bins.
    pub fn bin_of(&self, v: f64) -> usize {
        let (lo, hi) = self.range;
        let pos = ((v - lo) / (hi - lo) * self.bins as f64).floor();
        if pos.is_nan() {
            return 0;
        }
        (pos.max(0.0) as usize).min(self.bins - 1)
    }

    pub fn last_step(&self) -> Option<usize> {
        self.records.last().map(|r| r.step)
    }

    /// Distinct recorded steps in order.
    pub fn steps(&self) -> Vec<usize> {
        let mut steps: Vec<usize> = self.records.iter().map(|r| r.step).collect();
        steps.dedup();
        steps
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,path,mean,variance\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{:e},{:e}\n",
                r.step, r.path, r.mean, r.variance
            ));
        }
        s
    }

    fn stats(&self, g: impl Iterator<Item = f64> + Clone) -> (f64, f64, Vec<u64>) {
        let n = g.clone().count() as f64;
        let mean = g.clone().sum::<f64>() / n;
        let variance = g.clone().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mut histogram = vec![0u64; self.bins];
        g.for_each(|v| histogram[self.bin_of(v)] += 1);
        (mean, variance, histogram)
    }
}

/// Appends statistics of each path's materialized gradient at `step`.
pub fn record_grad_stats<T: Element>(
    trace: &mut GradTrace,
    step: usize,
    tree: &ParamTree<T>,
    paths: &[String],
) -> Result<()> {
    if let Some(last) = trace.last_step() {
        if step <= last {
            return Err(Error::InvalidConfig(format!(
                "grad trace step {step} does not follow {last}"
            )));
        }
    }
    let mut fresh = Vec::with_capacity(paths.len());
    for path in paths {
        let g = tree
            .get(path)?
            .grad()
            .ok_or_else(|| Error::MissingGradient(path.clone()))?;
        let (mean, variance, histogram) = trace.stats(g.iter().map(|v| v.as_f64()));
        fresh.push(GradRecord {
            step,
            path: path.clone(),
            mean,
            variance,
            histogram,
        });
    }
    trace.records.extend(fresh);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tree_with_grad(g: &[f64]) -> ParamTree<f64> {
        let mut tree = ParamTree::new();
        let mut t = Tensor::zeros(vec![g.len()]).with_requires_grad(true);
        t.accumulate_grad(g).unwrap();
        tree.insert("final_norm.weight", t).unwrap();
        tree
    }

    #[test]
    fn zero_and_constant_gradients() {
        let mut trace = GradTrace::default();
        let paths = vec!["final_norm.weight".to_string()];
        record_grad_stats(&mut trace, 0, &tree_with_grad(&[0.0; 10]), &paths).unwrap();
        let r = &trace.records[0];
        assert_eq!((r.mean, r.variance), (0.0, 0.0));
        assert_eq!(r.histogram[trace.bin_of(0.0)], 10);
        record_grad_stats(&mut trace, 1, &tree_with_grad(&[0.25; 7]), &paths).unwrap();
        let r = &trace.records[1];
        assert_eq!((r.mean, r.variance), (0.25, 0.0));
        assert_eq!(r.histogram.iter().sum::<u64>(), 7);
        assert_eq!(r.histogram[DEFAULT_HIST_BINS - 1], 7);
        assert_eq!(trace.steps(), vec![0, 1]);
        assert!(record_grad_stats(&mut trace, 1, &tree_with_grad(&[0.0]), &paths).is_err());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut tree = ParamTree::<f64>::new();
        tree.insert("x", Tensor::zeros(vec![2])).unwrap();
        let err =
            record_grad_stats(&mut GradTrace::default(), 0, &tree, &["x".into()]).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(p) if p == "x"));
    }
}
