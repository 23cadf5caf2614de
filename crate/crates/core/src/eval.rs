//! Clean and robust accuracy, the (model × attack × ε) table and its JSON
//! and CSV serializations.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, AttackContext, AttackKind, AttackModel, ModelView, ObjectiveMode};
use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{Tape, Tensor};
use crate::train::derive_seed;

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const CSV_HEADER: [&str; 4] = ["model", "attack", "epsilon", "accuracy"];

const EVAL_CHUNK: usize = 250;
const ATTACK_TAG: u64 = 3;

fn logits_of<M: AttackModel<f32> + ?Sized>(model: &M, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let l = model.logits(&mut tape, xv)?;
    Ok(tape.value(l).clone())
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize], num_classes: usize) -> Result<usize> {
    if logits.ndim() != 2 || logits.shape()[1] != num_classes || logits.shape()[0] != labels.len() {
        return Err(Error::shape(
            "accuracy",
            format!(
                "logits {:?} for {} samples of {num_classes} classes",
                logits.shape(),
                labels.len()
            ),
        ));
    }
    Ok(labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            // first maximum wins ties
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            arg == y
        })
        .count())
}

fn check_nonempty(dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset is undefined"));
    }
    Ok(())
}

/// Fraction of samples whose argmax logit equals the label.
pub fn clean_accuracy<M: AttackModel<f32> + ?Sized>(model: &M, dataset: &Dataset) -> Result<f64> {
    check_nonempty(dataset)?;
    let mut correct = 0;
    for b in batch_iter(dataset, EVAL_CHUNK, None)? {
        correct += count_correct(&logits_of(model, &b.x)?, &b.labels, dataset.num_classes())?;
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Fraction of samples still classified correctly after `attack`.
/// `seed` drives the random start; chunks are attacked in dataset order.
pub fn robust_accuracy<M: AttackModel<f32> + ?Sized>(
    model: &M,
    dataset: &Dataset,
    attack: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    check_nonempty(dataset)?;
    attack.validate()?;
    if !attack.objective.is_supervised() {
        return Err(Error::invalid(format!(
            "evaluation attacks need a supervised objective, got {}",
            attack.objective.as_str()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0;
    for b in batch_iter(dataset, EVAL_CHUNK, None)? {
        let ctx = AttackContext::supervised(&b.labels);
        let adv = run_attack(model, &b.x, attack, &ctx, &mut rng)?;
        correct += count_correct(&logits_of(model, &adv)?, &b.labels, dataset.num_classes())?;
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Evaluation attack family; the concrete config depends on ε.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalAttack {
    pub kind: AttackKind,
    pub num_steps: usize,
    /// Step size as a fraction of ε.
    pub step_ratio: f32,
    pub random_start: bool,
    pub kappa: f32,
}

impl EvalAttack {
    /// FGSM; PGD with 10 steps of ε/4 and a random start; CW margin with
    /// 10 steps of ε/4 and κ = 0.
    pub fn default_for(kind: AttackKind) -> Self {
        let d = AttackConfig::for_kind(kind, 1.0);
        Self {
            kind,
            num_steps: d.num_steps,
            step_ratio: d.step_size,
            random_start: d.random_start,
            kappa: d.kappa,
        }
    }

    pub fn objective(&self) -> ObjectiveMode {
        match self.kind {
            AttackKind::Cw => ObjectiveMode::SupervisedMargin,
            _ => ObjectiveMode::SupervisedCe,
        }
    }

    pub fn config(&self, epsilon: f32) -> AttackConfig {
        // With ε = 0 every step is projected away; any positive size will do.
        let step_size = if epsilon > 0.0 { self.step_ratio * epsilon } else { self.step_ratio };
        AttackConfig {
            kind: self.kind,
            epsilon,
            step_size: if self.kind == AttackKind::Fgsm { epsilon } else { step_size },
            num_steps: if self.kind == AttackKind::Fgsm { 1 } else { self.num_steps },
            random_start: self.random_start,
            objective: self.objective(),
            kappa: self.kappa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub attack: AttackKind,
    pub epsilon: f32,
    pub objective: ObjectiveMode,
    pub robust_accuracy: f64,
    pub sample_count: usize,
}

/// Clean and robust accuracies of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub clean_accuracy: f64,
    pub sample_count: usize,
    pub cells: Vec<EvalCell>,
    pub seed: u64,
    /// RFC 3339, UTC.
    pub timestamp: String,
}

impl EvalReport {
    pub fn cell(&self, attack: AttackKind, epsilon: f32) -> Option<&EvalCell> {
        self.cells.iter().find(|c| c.attack == attack && c.epsilon == epsilon)
    }

    pub fn without_timestamp(&self) -> Self {
        Self {
            timestamp: String::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !ok(self.clean_accuracy) || self.cells.iter().any(|c| !ok(c.robust_accuracy)) {
            return Err(Error::Report(format!("{}: accuracy outside [0, 1]", self.model_id)));
        }
        if self.sample_count == 0 || self.cells.iter().any(|c| c.sample_count == 0) {
            return Err(Error::Report(format!("{}: empty cell", self.model_id)));
        }
        Ok(())
    }
}

pub fn now_timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Evaluates every model under every (attack, ε) pair.
pub fn eval_table(
    models: &[(&str, &ModelParams<f32>)],
    attacks: &[EvalAttack],
    epsilons: &[f32],
    dataset: &Dataset,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    if models.is_empty() || attacks.is_empty() || epsilons.is_empty() {
        return Err(Error::invalid("eval_table needs at least one model, attack and epsilon"));
    }
    let timestamp = now_timestamp();
    models
        .iter()
        .map(|&(id, params)| {
            let view = ModelView::eval(params);
            let clean = clean_accuracy(&view, dataset).map_err(|e| e.context(format!("model {id}, clean")))?;
            let mut cells = Vec::with_capacity(attacks.len() * epsilons.len());
            for a in attacks {
                for &eps in epsilons {
                    let cfg = a.config(eps);
                    let cell_seed = derive_seed(seed ^ (eps.to_bits() as u64), ATTACK_TAG, a.kind as usize);
                    let acc = robust_accuracy(&view, dataset, &cfg, cell_seed)
                        .map_err(|e| e.context(format!("model {id}, attack {}, epsilon {eps}", a.kind.as_str())))?;
                    cells.push(EvalCell {
                        attack: a.kind,
                        epsilon: eps,
                        objective: cfg.objective,
                        robust_accuracy: acc,
                        sample_count: dataset.len(),
                    });
                }
            }
            Ok(EvalReport {
                model_id: id.to_string(),
                clean_accuracy: clean,
                sample_count: dataset.len(),
                cells,
                seed,
                timestamp: timestamp.clone(),
            })
        })
        .collect()
}

/// The JSON document written per evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub format_version: u32,
    pub reports: Vec<EvalReport>,
}

impl ReportDocument {
    pub fn new(reports: Vec<EvalReport>) -> Self {
        Self {
            format_version: REPORT_FORMAT_VERSION,
            reports,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(s).map_err(|e| Error::Report(format!("report JSON: {e}")))?;
        if doc.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::Report(format!("unsupported report version {}", doc.format_version)));
        }
        for r in &doc.reports {
            r.validate()?;
        }
        Ok(doc)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| e.context(format!("reading {}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// `model,attack,epsilon,accuracy`, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.reports {
            for c in &r.cells {
                w.write_record([
                    r.model_id.clone(),
                    c.attack.as_str().to_string(),
                    c.epsilon.to_string(),
                    c.robust_accuracy.to_string(),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    /// Plain-text table: one row per model, one column per (attack, ε).
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            out.push_str(&format!(
                "model {}  (n = {}, seed {}, {})\n",
                r.model_id, r.sample_count, r.seed, r.timestamp
            ));
            out.push_str(&format!("  {:<8} {:>8} {:>10}\n", "attack", "epsilon", "accuracy"));
            out.push_str(&format!("  {:<8} {:>8} {:>9.2}%\n", "clean", "-", 100.0 * r.clean_accuracy));
            for c in &r.cells {
                out.push_str(&format!(
                    "  {:<8} {:>8} {:>9.2}%\n",
                    c.attack.as_str(),
                    c.epsilon,
                    100.0 * c.robust_accuracy
                ));
            }
        }
        out
    }
}

/// One parsed CSV row.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CsvRow {
    pub model: String,
    pub attack: String,
    pub epsilon: f32,
    pub accuracy: f64,
}

pub fn parse_csv(s: &str) -> Result<Vec<CsvRow>> {
    csv::Reader::from_reader(s.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Report(format!("report CSV: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::model::{init_params, EncoderSpec};

    /// Looks up the true label by matching the first pixel value.
    struct Oracle {
        keys: Vec<(f32, usize)>,
        classes: usize,
    }

    impl AttackModel<f32> for Oracle {
        fn logits(&self, tape: &mut Tape<f32>, x: crate::tensor::Var) -> Result<crate::tensor::Var> {
            let v = tape.value(x);
            let n = v.shape()[0];
            let per = v.len() / n;
            let mut out = Tensor::zeros([n, self.classes]);
            for i in 0..n {
                let px = v.data()[i * per];
                let y = self.keys.iter().find(|(k, _)| *k == px).map(|&(_, y)| y).unwrap_or(0);
                out.data_mut()[i * self.classes + y] = 1.0;
            }
            Ok(tape.constant(out))
        }

        fn projection(&self, _: &mut Tape<f32>, _: crate::tensor::Var) -> Result<crate::tensor::Var> {
            unreachable!()
        }
    }

    #[test]
    fn perfect_classifier_scores_one() {
        let d = make_synthetic(3, 5, 4, 1).unwrap();
        let keys = (0..d.len()).map(|i| (d.image_pixels(i)[0], d.labels()[i])).collect();
        let m = Oracle { keys, classes: 3 };
        assert_eq!(clean_accuracy(&m, &d).unwrap(), 1.0);
    }

    #[test]
    fn empty_and_mismatched_rejected() {
        let p = init_params(&EncoderSpec::toy_conv([4], 4), 3, 0).unwrap();
        let view = ModelView::eval(&p);
        let empty = make_synthetic(3, 0, 4, 1).unwrap();
        assert!(clean_accuracy(&view, &empty).is_err());
        let four = make_synthetic(4, 2, 4, 1).unwrap();
        assert!(clean_accuracy(&view, &four).is_err());
    }

    #[test]
    fn null_attack_matches_clean() {
        let p = init_params(&EncoderSpec::toy_conv([4, 8], 8), 3, 0).unwrap();
        let d = make_synthetic(3, 10, 8, 2).unwrap();
        let view = ModelView::eval(&p);
        let clean = clean_accuracy(&view, &d).unwrap();
        for kind in [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Cw] {
            let acc = robust_accuracy(&view, &d, &EvalAttack::default_for(kind).config(0.0), 5).unwrap();
            assert_eq!(acc, clean);
        }
    }

    #[test]
    fn table_counts_and_roundtrip() {
        let p = init_params(&EncoderSpec::toy_conv([4], 4), 2, 0).unwrap();
        let d = make_synthetic(2, 4, 4, 2).unwrap();
        let attacks: Vec<EvalAttack> = [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Cw]
            .into_iter()
            .map(EvalAttack::default_for)
            .collect();
        let reports = eval_table(&[("m", &p)], &attacks, &[0.0, 0.03], &d, 1).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].cells.len(), 6);
        let doc = ReportDocument::new(reports);
        assert_eq!(ReportDocument::from_json(&doc.to_json()).unwrap(), doc);
        let rows = parse_csv(&doc.to_csv()).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[1].attack, "fgsm");
        assert_eq!(rows[1].epsilon, 0.03);
        assert!(eval_table(&[], &attacks, &[0.0], &d, 1).is_err());
    }

    #[test]
    fn eval_attack_configs() {
        let pgd = EvalAttack::default_for(AttackKind::Pgd).config(0.03);
        assert_eq!((pgd.num_steps, pgd.step_size, pgd.random_start), (10, 0.03 / 4.0, true));
        let cw = EvalAttack::default_for(AttackKind::Cw).config(0.06);
        assert_eq!(cw.objective, ObjectiveMode::SupervisedMargin);
        assert_eq!(cw.kappa, 0.0);
        let f = EvalAttack::default_for(AttackKind::Fgsm).config(0.08);
        assert_eq!((f.step_size, f.num_steps), (0.08, 1));
        assert!(EvalAttack::default_for(AttackKind::Pgd).config(0.0).validate().is_ok());
    }
}
