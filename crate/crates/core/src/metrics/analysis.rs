//! Attention-smoothness and lag-distribution statistics.

use serde::Serialize;

use crate::error::{Result, SimtError};

/// Mean L2 distance between consecutive attention vectors.
pub fn attention_norm_profile<V: AsRef<[f64]>>(steps: &[V]) -> Result<f64> {
    if steps.len() < 2 {
        return Err(SimtError::Contract(format!("{} attention steps, need at least 2", steps.len())));
    }
    let width = steps[0].as_ref().len();
    let mut total = 0.0;
    for pair in steps.windows(2) {
        let (a, b) = (pair[0].as_ref(), pair[1].as_ref());
        if a.len() != width || b.len() != width {
            return Err(SimtError::Contract("attention vectors differ in length".into()));
        }
        total += a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt();
    }
    Ok(total / (steps.len() - 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    pub mean: Option<f64>,
}

/// Half-open bins `[edges[i], edges[i+1])`; values outside every bin are dropped.
pub fn lag_histogram(values: &[f64], edges: &[f64]) -> Result<Vec<HistogramBin>> {
    if edges.len() < 2 {
        return Err(SimtError::Empty("histogram edges".into()));
    }
    if edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SimtError::Contract(format!("edges {edges:?} are not strictly increasing")));
    }
    if values.is_empty() {
        return Err(SimtError::Empty("histogram values".into()));
    }
    let mut bins: Vec<HistogramBin> = edges
        .windows(2)
        .map(|w| HistogramBin {
            low: w[0],
            high: w[1],
            count: 0,
            mean: None,
        })
        .collect();
    let mut sums = vec![0.0; bins.len()];
    for &v in values {
        if let Some(i) = bins.iter().position(|b| v >= b.low && v < b.high) {
            bins[i].count += 1;
            sums[i] += v;
        }
    }
    for (b, s) in bins.iter_mut().zip(sums) {
        if b.count > 0 {
            b.mean = Some(s / b.count as f64);
        }
    }
    Ok(bins)
}

pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut out = String::from("bin_low,bin_high,count,mean_lag\n");
    for b in bins {
        let mean = b.mean.map(|m| m.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", b.low, b.high, b.count, mean));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_norm_examples() {
        let constant = vec![vec![0.5, 0.5]; 4];
        assert_eq!(attention_norm_profile(&constant).unwrap(), 0.0);
        let alt = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!((attention_norm_profile(&alt).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let jump = vec![vec![0.25; 4], vec![1.0, 0.0, 0.0, 0.0]];
        assert!((attention_norm_profile(&jump).unwrap() - 0.75f64.sqrt()).abs() < 1e-15);
        assert!(attention_norm_profile(&[vec![1.0]]).is_err());
        assert!(attention_norm_profile(&[vec![1.0], vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn histogram_examples() {
        let h = lag_histogram(&[1.0, 1.0, 1.0], &[0.0, 2.0, 4.0]).unwrap();
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![3, 0]);
        assert_eq!(h[0].mean, Some(1.0));
        assert_eq!(h[1].mean, None);

        let h = lag_histogram(&[2.0], &[0.0, 2.0, 4.0]).unwrap();
        assert_eq!(h[1].count, 1);

        let edges: Vec<f64> = (-3..=5).map(|e| e as f64).collect();
        let h = lag_histogram(&[-1.25, -0.25, 3.0, 3.1], &edges).unwrap();
        let occupied: Vec<usize> = h.iter().enumerate().filter(|(_, b)| b.count > 0).map(|(i, _)| i).collect();
        // Two separated regions: one below zero, one at 3.
        assert_eq!(occupied.len(), 3);
        assert!(h[occupied[0]].high <= 0.0 && h[occupied[1]].high <= 0.0);
        assert_eq!(h[occupied[2]].low, 3.0);

        assert!(lag_histogram(&[1.0], &[]).is_err());
        assert!(lag_histogram(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let h = lag_histogram(&[1.0], &[0.0, 2.0, 4.0]).unwrap();
        let csv = histogram_csv(&h);
        assert_eq!(csv, "bin_low,bin_high,count,mean_lag\n0,2,1,1\n2,4,0,\n");
    }
}
