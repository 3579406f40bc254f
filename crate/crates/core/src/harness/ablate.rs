//! Single-axis ablations around the default recipe, repeated over subset seeds.

use crate::data;
use crate::model;
use crate::teacher::ScheduleKind;

use super::{
    evaluate, train_ssl, train_supervised, write_lines, Context, HarnessError, InitMode, RunConfig, SslOptions, BEST_FILE,
};

pub const ABLATION_FILE: &str = "ablation.csv";
pub const BASELINE_FILE: &str = "baseline.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub schedule: ScheduleKind,
    pub init: InitMode,
    pub nms: bool,
    pub threshold: Option<f64>,
    /// Final mAP per seed; `None` when that run diverged.
    pub per_seed: Vec<Option<f64>>,
}

impl AblationRow {
    fn values(&self) -> Option<Vec<f64>> {
        self.per_seed.iter().copied().collect()
    }

    /// `None` if any seed diverged.
    pub fn mean(&self) -> Option<f64> {
        let v = self.values()?;
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Sample standard deviation; 0 for a single seed.
    pub fn std(&self) -> Option<f64> {
        let v = self.values()?;
        let m = self.mean()?;
        if v.len() < 2 {
            return Some(0.0);
        }
        Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
    }

    fn csv(&self) -> String {
        let sched = match self.schedule {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Constant => "constant",
        };
        let init = match self.init {
            InitMode::AfterFt => "after_ft",
            InitMode::Scratch => "scratch",
        };
        let thr = self.threshold.map_or_else(|| "none".to_string(), |t| t.to_string());
        let cell = match (self.mean(), self.std()) {
            (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
            _ => "diverged".to_string(),
        };
        let mut row = format!("{},{sched},{init},{},{thr},{cell}", self.name, if self.nms { "on" } else { "off" });
        for v in &self.per_seed {
            row.push(',');
            row.push_str(&v.map_or_else(|| "diverged".to_string(), |x| x.to_string()));
        }
        row
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    /// Best-on-eval mAP of the supervised model, per seed.
    pub baseline: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// The seven variants, first row the default recipe.
pub fn variants() -> Vec<AblationRow> {
    let row = |name: &str, schedule, init, nms, threshold| AblationRow {
        name: name.to_string(),
        schedule,
        init,
        nms,
        threshold,
        per_seed: Vec::new(),
    };
    use InitMode::*;
    use ScheduleKind::*;
    vec![
        row("Best", Cosine, AfterFt, false, None),
        row("Abl. Sched.", Constant, AfterFt, false, None),
        row("Abl. Init.", Cosine, Scratch, false, None),
        row("Abl. NMS", Cosine, AfterFt, true, None),
        row("Abl. Thresh. 0.5", Cosine, AfterFt, false, Some(0.5)),
        row("Abl. Thresh. 0.7", Cosine, AfterFt, false, Some(0.7)),
        row("Abl. Thresh. 0.9", Cosine, AfterFt, false, Some(0.9)),
    ]
}

fn slug(name: &str) -> String {
    name.to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect::<String>()
        .split('_')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

fn ensure_split(cfg: &RunConfig, total: usize) -> Result<(), HarnessError> {
    if data::split_path(&cfg.dataset, cfg.split_fraction, cfg.split_seed).exists() {
        return Ok(());
    }
    let spec = data::SplitSpec {
        total_images: total,
        labeled_fraction: cfg.split_fraction,
        subset_seed: cfg.split_seed,
    };
    data::save_split(&cfg.dataset, &spec, &data::make_splits(&spec)?)?;
    Ok(())
}

/// For each seed in `ablate.seeds`: fine-tune on that subset (or reuse an
/// existing `seed_<s>/ft/best.mtdp`), then run every variant from it. A
/// diverging run becomes a "diverged" cell. Writes `ablation.csv` and
/// `baseline.csv` under `out`.
pub fn ablate(base: &RunConfig) -> Result<AblationReport, HarnessError> {
    base.validate()?;
    let total = data::load_dataset(&base.dataset.join("train"))?.len();
    let per_seed: Vec<RunConfig> = base
        .ablate_seeds
        .iter()
        .map(|&s| RunConfig {
            seed: s,
            split_seed: s,
            ..base.clone()
        })
        .collect();
    for c in &per_seed {
        ensure_split(c, total)?;
    }
    let shared = Context::load(&per_seed[0])?;

    let mut rows = variants();
    let mut baseline = Vec::new();
    for cfg in &per_seed {
        let seed_dir = base.out.join(format!("seed_{}", cfg.seed));
        let ft_cfg = RunConfig {
            out: seed_dir.join("ft"),
            ..cfg.clone()
        };
        let ft_ctx = shared.with_config(ft_cfg.clone())?;
        let best_path = ft_cfg.out.join(BEST_FILE);
        let ft_map = if best_path.exists() {
            let params = model::load_params(&best_path)?;
            evaluate(&params, &cfg.model, &ft_ctx.eval)?.0.map
        } else {
            train_supervised(&ft_ctx)?.best.map
        };
        baseline.push(ft_map);

        for row in rows.iter_mut() {
            let run_cfg = RunConfig {
                out: seed_dir.join(slug(&row.name)),
                schedule: row.schedule,
                init: row.init,
                init_checkpoint: Some(best_path.clone()),
                nms: row.nms,
                threshold: row.threshold,
                ..cfg.clone()
            };
            let ctx = shared.with_config(run_cfg)?;
            let map = match train_ssl(&ctx, SslOptions::default()) {
                Ok(o) => Some(o.last.map),
                Err(HarnessError::Divergence { .. }) => None,
                Err(e) => return Err(e),
            };
            row.per_seed.push(map);
        }
    }

    let seed_cols: String = base.ablate_seeds.iter().map(|s| format!(",seed_{s}")).collect();
    write_lines(
        &base.out.join(ABLATION_FILE),
        &format!("variant,ema_schedule,initialization,nms,threshold,mAP{seed_cols}"),
        &rows.iter().map(AblationRow::csv).collect::<Vec<_>>(),
    )?;
    write_lines(
        &base.out.join(BASELINE_FILE),
        "seed,mAP",
        &base.ablate_seeds.iter().zip(&baseline).map(|(s, m)| format!("{s},{m}")).collect::<Vec<_>>(),
    )?;
    Ok(AblationReport {
        seeds: base.ablate_seeds.clone(),
        baseline,
        rows,
    })
}
