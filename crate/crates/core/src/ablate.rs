//! Component and branch ablations: each variant is trained and evaluated on
//! the same dataset for every seed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::{Config, ModelConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::retrieval::Metrics;
use crate::train::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Global branch only.
    A,
    /// Relation-guided part attention with hard thirds of the first frame.
    B,
    /// Adds the inter-frame regularizer.
    C,
    /// Adds temporal channel scores.
    D,
    /// Adds keypoint-based part partition.
    E,
    /// Adds quality-based reference selection: the full model.
    F,
    /// The full model without the global branch.
    LocalOnly,
}

impl Variant {
    pub const LADDER: [Variant; 6] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::F];
    pub const ALL: [Variant; 7] = [
        Variant::A,
        Variant::B,
        Variant::C,
        Variant::D,
        Variant::E,
        Variant::F,
        Variant::LocalOnly,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
            Variant::E => "e",
            Variant::F => "f",
            Variant::LocalOnly => "local",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::A => "global baseline",
            Variant::B => "+relation attention (hard parts; first frame)",
            Variant::C => "+inter-frame regularization",
            Variant::D => "+temporal channel scores",
            Variant::E => "+pose-based partition",
            Variant::F => "+quality-based reference",
            Variant::LocalOnly => "local branches only",
        }
    }

    /// `base` with the components of this variant switched on or off;
    /// dimensions and the remaining choices are kept.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        let rank = match self {
            Variant::A => 0,
            Variant::B => 1,
            Variant::C => 2,
            Variant::D => 3,
            Variant::E => 4,
            Variant::F | Variant::LocalOnly => 5,
        };
        m.global_branch = self != Variant::LocalOnly;
        m.local_branches = rank >= 1;
        m.relation_attention = rank >= 1;
        m.interframe_reg = rank >= 2;
        m.temporal_scores = rank >= 3;
        m.pose_partition = rank >= 4;
        m.quality_selection = rank >= 5;
        m
    }
}

#[derive(Clone, Debug)]
pub struct Run {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: Metrics,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub ranks: Vec<usize>,
    pub runs: Vec<Run>,
}

/// Mean and sample standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl AblationResult {
    fn of(&self, v: Variant) -> impl Iterator<Item = &Run> {
        self.runs.iter().filter(move |r| r.variant == v)
    }

    /// Seed-averaged CMC at `rank`, in percent.
    pub fn rank(&self, v: Variant, rank: usize) -> Option<f64> {
        let xs: Vec<f64> = self.of(v).filter_map(|r| r.metrics.rank(rank)).collect();
        (!xs.is_empty()).then(|| 100.0 * mean_std(&xs).0)
    }

    /// Seed-averaged mAP in percent.
    pub fn map(&self, v: Variant) -> Option<f64> {
        let xs: Vec<f64> = self.of(v).map(|r| r.metrics.map).collect();
        (!xs.is_empty()).then(|| 100.0 * mean_std(&xs).0)
    }

    fn summary_row(&self, s: &mut String, label: &str, v: Variant) {
        let _ = write!(s, "{label}");
        let runs: Vec<&Run> = self.of(v).collect();
        for &r in &self.ranks {
            let xs: Vec<f64> = runs.iter().filter_map(|x| x.metrics.rank(r)).map(|x| 100.0 * x).collect();
            let (m, sd) = mean_std(&xs);
            let _ = write!(s, ",{m:.2},{sd:.2}");
        }
        let xs: Vec<f64> = runs.iter().map(|x| 100.0 * x.metrics.map).collect();
        let (m, sd) = mean_std(&xs);
        let _ = writeln!(s, ",{m:.2},{sd:.2},{}", runs.len());
    }

    fn header(&self, first: &str) -> String {
        let mut s = first.to_string();
        for r in &self.ranks {
            let _ = write!(s, ",rank{r},rank{r}_std");
        }
        s.push_str(",mAP,mAP_std,seeds\n");
        s
    }

    /// Component ladder, seed means and standard deviations in percent.
    pub fn table1_csv(&self) -> String {
        let mut s = self.header("variant,description");
        for v in Variant::LADDER {
            if self.of(v).next().is_some() {
                self.summary_row(&mut s, &format!("{},{}", v.key(), v.description()), v);
            }
        }
        s
    }

    /// Global, local and combined branches.
    pub fn table2_csv(&self) -> String {
        let mut s = self.header("branches");
        for (label, v) in [("global", Variant::A), ("local", Variant::LocalOnly), ("global+local", Variant::F)] {
            if self.of(v).next().is_some() {
                self.summary_row(&mut s, label, v);
            }
        }
        s
    }

    /// Every individual run.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("variant,seed");
        for r in &self.ranks {
            let _ = write!(s, ",rank{r}");
        }
        s.push_str(",mAP,seconds\n");
        for run in &self.runs {
            let _ = write!(s, "{},{}", run.variant.key(), run.seed);
            for &r in &self.ranks {
                let _ = write!(s, ",{}", run.metrics.rank(r).unwrap_or(f64::NAN));
            }
            let _ = writeln!(s, ",{},{:.1}", run.metrics.map, run.seconds);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            ("table1.csv", self.table1_csv()),
            ("table2.csv", self.table2_csv()),
            ("runs.csv", self.runs_csv()),
        ] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Trains and evaluates `variants` for each seed in `cfg.ablate.seeds`.
pub fn run_variants(
    cfg: &Config,
    ds: &Dataset,
    variants: &[Variant],
    out: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> Result<AblationResult> {
    if cfg.ablate.seeds.is_empty() {
        return Err(Error::Config("ablate.seeds is empty".into()));
    }
    let mut runs = Vec::new();
    for &seed in &cfg.ablate.seeds {
        for &variant in variants {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            run_cfg.model = variant.apply(&cfg.model);
            let dir = out.map(|o| o.join(format!("{}_seed{seed}", variant.key())));
            let start = std::time::Instant::now();
            let trained = train(&run_cfg, ds, dir.as_deref(), |_| {})?;
            let ev = evaluate_model(&trained.model, &trained.store, ds, &run_cfg.eval)?;
            if let Some(d) = &dir {
                ev.write(d)?;
            }
            let seconds = start.elapsed().as_secs_f64();
            progress(&format!(
                "variant {} seed {seed}: rank1 {:.3} mAP {:.3} ({seconds:.0}s)",
                variant.key(),
                ev.metrics.rank(1).unwrap_or(f64::NAN),
                ev.metrics.map
            ));
            runs.push(Run {
                variant,
                seed,
                metrics: ev.metrics,
                seconds,
            });
        }
    }
    let result = AblationResult {
        ranks: cfg.eval.ranks.clone(),
        runs,
    };
    if let Some(o) = out {
        result.write(o)?;
    }
    Ok(result)
}

/// The full sweep: the component ladder plus the local-only run.
pub fn run(cfg: &Config, ds: &Dataset, out: Option<&Path>, progress: impl FnMut(&str)) -> Result<AblationResult> {
    run_variants(cfg, ds, &Variant::ALL, out, progress)
}
