use serde::{Deserialize, Serialize};

use super::metrics::Prf;

/// Mean and sample standard deviation (`n - 1` denominator; `None` for
/// fewer than two values).
pub fn mean_sd(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(var.sqrt()))
}

/// Relative difference to a baseline in percent.
pub fn delta_pct(model: f64, baseline: f64) -> f64 {
    (model - baseline) / baseline * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub dev_f1: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub model: String,
    pub seeds: Vec<SeedScore>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub sd_f1: Option<f64>,
    pub baseline: Option<String>,
    /// Difference of mean F1 to the baseline's, in percent.
    pub delta_pct: Option<f64>,
}

impl TaskReport {
    pub fn new(task: &str, model: &str, seeds: Vec<SeedScore>) -> Self {
        let f1: Vec<f64> = seeds.iter().map(|s| s.f1).collect();
        let (mean_f1, sd_f1) = mean_sd(&f1);
        let mean_precision = mean_sd(&seeds.iter().map(|s| s.precision).collect::<Vec<_>>()).0;
        let mean_recall = mean_sd(&seeds.iter().map(|s| s.recall).collect::<Vec<_>>()).0;
        Self {
            task: task.to_string(),
            model: model.to_string(),
            seeds,
            mean_precision,
            mean_recall,
            mean_f1,
            sd_f1,
            baseline: None,
            delta_pct: None,
        }
    }

    pub fn from_prf(task: &str, model: &str, runs: &[(u64, Prf)]) -> Self {
        let seeds = runs
            .iter()
            .map(|(seed, p)| SeedScore { seed: *seed, precision: p.precision, recall: p.recall, f1: p.f1, dev_f1: f64::NAN, best_epoch: 0 })
            .collect();
        Self::new(task, model, seeds)
    }

    pub fn compare_to(&mut self, baseline: &TaskReport) {
        self.baseline = Some(baseline.model.clone());
        self.delta_pct = Some(delta_pct(self.mean_f1, baseline.mean_f1));
    }

    /// `Mean (sd)` in F1 points, e.g. `82.02 (.19)`.
    pub fn mean_sd_cell(&self) -> String {
        let sd = match self.sd_f1 {
            None => "-".to_string(),
            Some(s) => {
                let s = format!("{:.2}", s * 100.0);
                s.strip_prefix('0').map(str::to_string).unwrap_or(s)
            }
        };
        format!("{:.2} ({sd})", self.mean_f1 * 100.0)
    }

    pub fn delta_cell(&self) -> String {
        self.delta_pct.map_or("-".to_string(), |d| format!("{d:.1}%"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

/// Plain-text table with one row per report.
pub fn render_table(reports: &[TaskReport]) -> String {
    let mut out = format!("{:<24} {:<6} {:>16} {:>8}\n", "Model", "Task", "Mean (sd)", "Δ%");
    for r in reports {
        out.push_str(&format!("{:<24} {:<6} {:>16} {:>8}\n", r.model, r.task, r.mean_sd_cell(), r.delta_cell()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_sd_of_one_to_five() {
        let (m, sd) = mean_sd(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert!((sd.unwrap() - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((sd.unwrap() - 1.581).abs() < 1e-3);
        assert_eq!(mean_sd(&[0.7]).1, None);
    }

    #[test]
    fn cell_format() {
        let seeds = [0.8200, 0.8225, 0.8190, 0.8180, 0.8215]
            .iter()
            .enumerate()
            .map(|(i, &f1)| SeedScore { seed: i as u64, precision: f1, recall: f1, f1, dev_f1: f1, best_epoch: 1 })
            .collect();
        let r = TaskReport::new("ner", "m", seeds);
        assert!(r.mean_sd_cell().starts_with("82.02 (."));
    }

    #[test]
    fn delta_convention() {
        // 82.02 against a 77.59 baseline rounds to 5.7%.
        assert_eq!(format!("{:.1}", delta_pct(82.02, 77.59)), "5.7");
        assert_eq!(format!("{:.1}", delta_pct(63.90, 40.50)), "57.8");
    }
}
