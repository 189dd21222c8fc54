//! Forward-time scaling of the aggregators with sequence length `L = V*T`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{Aggregator, Model, ModelConfig};
use crate::params::uniform;
use crate::rng::{derive, seeded};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub aggregators: Vec<Aggregator>,
    pub lengths: Vec<usize>,
    pub views: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub n_blocks: usize,
    pub warmup: usize,
    /// Minimum timed runs per point.
    pub repeats: usize,
    /// Runs are added until their summed time reaches this budget, up to
    /// [`MAX_REPEATS`].
    pub min_total: Duration,
    pub seed: u64,
}

pub const MAX_REPEATS: usize = 1000;

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            aggregators: vec![Aggregator::Ssm, Aggregator::Attention],
            lengths: (8..=14).map(|p| 1usize << p).collect(),
            views: 4,
            d_model: 64,
            d_state: 8,
            n_blocks: 2,
            warmup: 1,
            repeats: 5,
            min_total: Duration::from_millis(50),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub aggregator: String,
    #[serde(rename = "L")]
    pub l: usize,
    pub median_ns: u64,
    pub repeats: usize,
    pub warmup: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub config: BenchConfig,
    pub records: Vec<BenchRecord>,
    pub fits: BTreeMap<String, SlopeFit>,
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

/// Times the aggregator forward pass of one configuration at one length.
pub fn time_aggregator(cfg: &BenchConfig, aggregator: Aggregator, l: usize) -> Result<BenchRecord> {
    if cfg.views == 0 || !l.is_multiple_of(cfg.views) || l < cfg.views {
        return Err(Error::config(format!(
            "L = {l} is not a positive multiple of V = {}",
            cfg.views
        )));
    }
    if cfg.repeats < 5 {
        return Err(Error::config("bench.repeats must be at least 5"));
    }
    let model_cfg = ModelConfig {
        views: cfg.views,
        steps: l / cfg.views,
        d_model: cfg.d_model,
        d_state: cfg.d_state,
        n_blocks: cfg.n_blocks,
        aggregator,
        ..ModelConfig::default()
    };
    let model = Model::new(model_cfg, cfg.seed)?;
    let mut rng = seeded(derive(cfg.seed, l as u64));
    let grid = uniform(&[l, cfg.d_model], 1.0, &mut rng);
    let run = || -> Result<Duration> {
        let start = Instant::now();
        let mut tape = Tape::inference();
        let p = model.store().bind(&mut tape);
        let x = tape.constant(grid.clone());
        let y = model.aggregate(&mut tape, &p, x)?;
        std::hint::black_box(tape.value(y));
        Ok(start.elapsed())
    };
    for _ in 0..cfg.warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(cfg.repeats);
    let mut total = Duration::ZERO;
    while times.len() < cfg.repeats || (total < cfg.min_total && times.len() < MAX_REPEATS) {
        let t = run()?;
        total += t;
        times.push(t.as_nanos() as u64);
    }
    Ok(BenchRecord {
        aggregator: aggregator.name().to_string(),
        l,
        repeats: times.len(),
        median_ns: median(times),
        warmup: cfg.warmup,
    })
}

pub fn run_scaling_bench(cfg: &BenchConfig, mut on_record: impl FnMut(&BenchRecord)) -> Result<BenchSummary> {
    let mut records = Vec::new();
    for &agg in &cfg.aggregators {
        for &l in &cfg.lengths {
            let rec = time_aggregator(cfg, agg, l)?;
            on_record(&rec);
            records.push(rec);
        }
    }
    let mut fits = BTreeMap::new();
    for &agg in &cfg.aggregators {
        let points: Vec<(usize, f64)> = records
            .iter()
            .filter(|r| r.aggregator == agg.name())
            .map(|r| (r.l, r.median_ns as f64))
            .collect();
        if points.len() >= 4 {
            fits.insert(agg.name().to_string(), fit_slope(&points)?);
        }
    }
    Ok(BenchSummary {
        config: cfg.clone(),
        records,
        fits,
    })
}

/// Least-squares fit of `ln t = slope * ln L + intercept`.
pub fn fit_slope(points: &[(usize, f64)]) -> Result<SlopeFit> {
    let mut distinct: Vec<usize> = points.iter().map(|p| p.0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::input(format!(
            "slope fit needs at least 4 distinct L values, got {}",
            distinct.len()
        )));
    }
    if points.iter().any(|&(l, t)| l == 0 || t.is_nan() || t <= 0.0) {
        return Err(Error::input("slope fit needs positive lengths and times"));
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(SlopeFit { slope, intercept, r2 })
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from("aggregator,L,median_ns,repeats\n");
    for r in records {
        writeln!(out, "{},{},{},{}", r.aggregator, r.l, r.median_ns, r.repeats).expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn power_law(exp: f64) -> Vec<(usize, f64)> {
        (8..=14)
            .map(|p| (1usize << p, 3.0 * ((1usize << p) as f64).powf(exp)))
            .collect()
    }

    #[test]
    fn exact_power_laws() {
        for exp in [1.0, 1.5, 2.0] {
            let fit = fit_slope(&power_law(exp)).unwrap();
            assert!((fit.slope - exp).abs() < 0.01, "{fit:?}");
            assert!(fit.r2 > 0.9999);
        }
    }

    #[test]
    fn too_few_points() {
        let pts = power_law(1.0);
        assert!(matches!(fit_slope(&pts[..3]), Err(Error::Input(_))));
        let repeated = vec![pts[0], pts[0], pts[1], pts[2], pts[2]];
        assert!(fit_slope(&repeated).is_err());
    }

    #[test]
    fn small_sweep_produces_records() {
        let cfg = BenchConfig {
            aggregators: vec![Aggregator::Linear, Aggregator::Ssm],
            lengths: vec![8, 16, 32, 64],
            d_model: 8,
            min_total: Duration::from_millis(1),
            ..BenchConfig::default()
        };
        let summary = run_scaling_bench(&cfg, |_| {}).unwrap();
        assert_eq!(summary.records.len(), 8);
        assert!(summary.records.iter().all(|r| r.repeats >= 5 && r.median_ns > 0));
        assert_eq!(summary.fits.len(), 2);
        let csv = to_csv(&summary.records);
        assert_eq!(csv.lines().next().unwrap(), "aggregator,L,median_ns,repeats");
        assert_eq!(csv.lines().count(), 9);
        assert!(time_aggregator(&cfg, Aggregator::Ssm, 10).is_err());
        let few = BenchConfig { repeats: 3, ..cfg };
        assert!(time_aggregator(&few, Aggregator::Ssm, 8).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![5, 1, 3]), 3);
        assert_eq!(median(vec![4, 1, 3, 2]), 2);
    }
}
