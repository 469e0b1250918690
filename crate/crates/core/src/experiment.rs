//! Pre-training conditions that see the same amount of speech with
//! different batch sizes, compared on validation loss and downstream CER.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::batch_assembler::{data_seen, DATASET_HOURS};
use crate::ctc_finetune::{FineTuner, FinetuneConfig, Init};
use crate::trainer::{append_csv, load_corpora, Corpus, TrainConfig, Trainer};
use crate::{Error, Result};

pub const COMPARISON_FILE: &str = "equal_data.csv";

/// Relative tolerance on `batch_seconds × iterations` when pairing runs.
const PRODUCT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub batch_seconds: f64,
    pub iterations: u64,
}

impl Condition {
    pub fn new(batch_seconds: f64, iterations: u64) -> Self {
        Condition { batch_seconds, iterations }
    }

    pub fn product(&self) -> f64 {
        self.batch_seconds * self.iterations as f64
    }

    pub fn hours_seen(&self) -> f64 {
        data_seen(self.batch_seconds, self.iterations, DATASET_HOURS).hours
    }

    fn dir_name(&self) -> String {
        format!("b{}-n{}", self.batch_seconds, self.iterations)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub hours_seen: f64,
    pub batch_seconds: f64,
    pub iterations: u64,
    pub val_contrastive: f64,
    pub val_accuracy: f64,
    /// Empty when the condition was not fine-tuned.
    pub cer: Option<f64>,
}

/// Every condition must see the same amount of speech.
pub fn check_equal_products(conditions: &[Condition]) -> Result<()> {
    let Some(first) = conditions.first() else {
        return Err(Error::Config(vec!["pairs: at least one condition required".into()]));
    };
    let p0 = first.product();
    let errs: Vec<String> = conditions
        .iter()
        .filter(|c| (c.product() - p0).abs() > PRODUCT_TOL * p0.abs().max(1.0))
        .map(|c| {
            format!(
                "pairs: {} s x {} = {} differs from {} s x {} = {}",
                c.batch_seconds,
                c.iterations,
                c.product(),
                first.batch_seconds,
                first.iterations,
                p0
            )
        })
        .collect();
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errs))
    }
}

/// `base` resized to `cond`, with the same number of learning-rate cycles
/// fitted exactly into the run and a single validation at the end.
pub fn condition_config(base: &TrainConfig, cond: Condition) -> Result<TrainConfig> {
    let period = 2 * base.cycles;
    if cond.iterations == 0 || !cond.iterations.is_multiple_of(period) {
        return Err(Error::Config(vec![format!(
            "iterations: {} is not a multiple of 2 x cycles = {period}",
            cond.iterations
        )]));
    }
    let cfg = TrainConfig {
        batch_seconds: cond.batch_seconds,
        iterations: cond.iterations,
        half_cycle: cond.iterations / period,
        val_interval: cond.iterations,
        ..base.clone()
    };
    let errs = crate::trainer::FlatConfig::validate(&cfg);
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errs))
    }
}

/// Pre-train one condition into `dir`, then optionally fine-tune the final
/// checkpoint on `train` and score it on `val`.
pub fn run_condition(
    base: &TrainConfig,
    cond: Condition,
    train: &Corpus,
    val: &Corpus,
    finetune: Option<&FinetuneConfig>,
    dir: &Path,
) -> Result<ComparisonRow> {
    let cfg = condition_config(base, cond)?;
    let mut trainer = Trainer::new(cfg, train.clone(), val.clone())?;
    let records = trainer.run(dir)?;
    let last = records
        .last()
        .ok_or_else(|| Error::Config(vec!["iterations: run produced no validation".into()]))?;
    let cer = match finetune {
        Some(fc) => {
            let mut ft = FineTuner::new(fc.clone(), Init::Pretrained(trainer.to_checkpoint()?), train)?;
            while ft.step < fc.iterations {
                ft.step()?;
            }
            let report = ft.evaluate(val)?;
            report.write_csv(&dir.join(crate::ctc_finetune::EVAL_FILE))?;
            Some(report.cer)
        }
        None => None,
    };
    Ok(ComparisonRow {
        hours_seen: cond.hours_seen(),
        batch_seconds: cond.batch_seconds,
        iterations: cond.iterations,
        val_contrastive: last.loss_contrastive,
        val_accuracy: last.accuracy,
        cer,
    })
}

/// Run every condition under `out_dir/b<seconds>-n<iterations>` and write
/// the comparison table to `out_dir/equal_data.csv`.
pub fn experiment_equal_data(
    base: &TrainConfig,
    conditions: &[Condition],
    finetune: Option<&FinetuneConfig>,
    out_dir: &Path,
) -> Result<Vec<ComparisonRow>> {
    check_equal_products(conditions)?;
    for &c in conditions {
        condition_config(base, c)?;
    }
    let (train, val) = load_corpora(base)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let table = out_dir.join(COMPARISON_FILE);
    if table.exists() {
        fs::remove_file(&table).map_err(|e| Error::io(&table, e))?;
    }
    let mut rows = Vec::with_capacity(conditions.len());
    for &c in conditions {
        let dir: PathBuf = out_dir.join(c.dir_name());
        let row = run_condition(base, c, &train, &val, finetune, &dir)?;
        append_csv(&table, std::slice::from_ref(&row))?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc_finetune::tests::labeled_corpus;
    use crate::trainer::tests::tiny_train_config;

    #[test]
    fn products_must_match() {
        let ok = [Condition::new(150.0, 4000), Condition::new(600.0, 1000)];
        check_equal_products(&ok).unwrap();
        assert_eq!(ok[0].hours_seen(), ok[1].hours_seen());
        check_equal_products(&ok[..1]).unwrap();

        let bad = [Condition::new(150.0, 4000), Condition::new(600.0, 1000), Condition::new(600.0, 2000)];
        match check_equal_products(&bad) {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 1),
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(check_equal_products(&[]).is_err());
    }

    #[test]
    fn conditions_fit_whole_cycles() {
        let base = TrainConfig { cycles: 2, ..TrainConfig::toy() };
        let cfg = condition_config(&base, Condition::new(4.0, 40)).unwrap();
        assert_eq!(cfg.half_cycle, 10);
        assert_eq!(cfg.lr_schedule().total_steps(), 40);
        assert_eq!(cfg.val_interval, 40);
        assert!(condition_config(&base, Condition::new(4.0, 42)).is_err());
    }

    #[test]
    fn single_condition_runs_and_fine_tunes() {
        let corpus = labeled_corpus(8, 3);
        let base = TrainConfig { cycles: 1, ..tiny_train_config() };
        let ft = FinetuneConfig {
            iterations: 2,
            batch_seconds: 3.0,
            ..FinetuneConfig::toy()
        };
        let dir = tempfile::tempdir().unwrap();
        let row = run_condition(&base, Condition::new(3.0, 2), &corpus, &corpus, Some(&ft), dir.path()).unwrap();
        assert_eq!(row.iterations, 2);
        assert!(row.val_contrastive.is_finite());
        let cer = row.cer.unwrap();
        assert!(cer >= 0.0);
        assert!(dir.path().join(crate::trainer::METRICS_FILE).exists());
    }
}
