//! Training, evaluation, ablations and metrics.

pub mod config;
pub mod optim;
pub mod verify;

use std::io::Write;
use std::time::Instant;

use crate::blocks::{FfnKind, OtceModel};
use crate::error::{Error, Result};
use crate::experts::Sharing;
use crate::params::Session;
use crate::positional::RopeMode;
use crate::tasks::{exact_match_accuracy, gen_batch, Split, TaskSpec};
use crate::tensor::{DType, Real};

pub use config::TrainConfig;
pub use optim::{adamw_step, clip_grad_norm, noam_lr, AdamConfig, AdamState, StepOutcome};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_ppl: f64,
    pub task_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

impl MetricsRecord {
    pub fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Parses a metrics file, one JSON object per non-empty line.
pub fn read_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub ppl: f64,
    pub accuracy: f64,
}

/// Mean masked loss and exact-match accuracy over `batches` eval batches.
pub fn evaluate<T: Real>(
    model: &OtceModel<T>,
    task: &TaskSpec,
    batches: usize,
    batch: usize,
) -> Result<EvalResult> {
    let spec = task.with_split(Split::Eval);
    let (mut loss, mut hits, mut n) = (0.0, 0.0, 0usize);
    for i in 0..batches {
        let b = gen_batch(&spec, batch, i as u64)?;
        let mut s = Session::new(&model.store);
        let (logits, _) = model.forward(&mut s, &b.tokens, b.batch, b.len)?;
        let ce = s.g.cross_entropy(logits, &b.targets, &b.mask)?;
        let m = b.masked();
        loss += s.g.value(ce).item().f64() * m as f64;
        hits += exact_match_accuracy(s.g.value(logits), &b.targets, &b.mask)? * m as f64;
        n += m;
    }
    let loss = loss / n as f64;
    Ok(EvalResult {
        loss,
        ppl: loss.exp(),
        accuracy: hits / n as f64,
    })
}

pub struct TrainOutcome<T> {
    pub model: OtceModel<T>,
    pub records: Vec<MetricsRecord>,
    pub skipped_steps: u64,
}

/// Trains from scratch; each metrics record is also written to `sink` as a
/// JSON line. Two consecutive non-finite losses abort with a dump of the
/// offending parameters.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = OtceModel::<T>::build(&cfg.model, cfg.seed)?;
    let mut state = AdamState::new(&model.store);
    let task = cfg.task.with_split(Split::Train);
    let warmup = cfg.warmup_steps();
    let mut records = Vec::new();
    let (mut bad_streak, mut skipped) = (0u32, 0u64);
    for step in 1..=cfg.steps {
        let b = gen_batch(&task, cfg.batch, step - 1)?;
        let mut s = Session::new(&model.store);
        let loss = model.loss(&mut s, &b.tokens, &b.targets, &b.mask, b.batch, b.len)?;
        let value = s.g.value(loss).item().f64();
        let lr = noam_lr(step, cfg.model.d_model, warmup)? * cfg.lr_scale;
        if !value.is_finite() {
            bad_streak += 1;
            skipped += 1;
            if bad_streak >= 2 {
                return Err(Error::Aborted(dump(&model, step, value)));
            }
            continue;
        }
        bad_streak = 0;
        let train_loss = value;
        let mut grads = s.backward(loss)?;
        drop(s);
        if cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, cfg.grad_clip);
        }
        if adamw_step(&mut model.store, &grads, &mut state, lr, &cfg.adam)
            == StepOutcome::SkippedNonFinite
        {
            skipped += 1;
            eprintln!("step {step}: non-finite gradient, update skipped");
        }
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let ev = evaluate(&model, &cfg.task, cfg.eval_batches, cfg.eval_batch)?;
            let rec = MetricsRecord {
                step,
                lr,
                train_loss,
                eval_loss: ev.loss,
                eval_ppl: ev.ppl,
                task_accuracy: ev.accuracy,
                wall_ms: cfg.wall_time.then(|| start.elapsed().as_millis() as u64),
            };
            if let Some(w) = sink.as_deref_mut() {
                writeln!(w, "{}", rec.to_line()?)?;
                w.flush()?;
            }
            records.push(rec);
        }
    }
    Ok(TrainOutcome {
        model,
        records,
        skipped_steps: skipped,
    })
}

fn dump<T: Real>(model: &OtceModel<T>, step: u64, loss: f64) -> String {
    let mut msg = format!("loss {loss} at step {step} and the step before; parameter health:");
    for id in model.store.ids() {
        let t = model.store.get(id);
        if !t.all_finite() || t.max_abs().f64() > 1e4 {
            msg.push_str(&format!(
                "\n  {} max|x|={} finite={}",
                model.store.name(id),
                t.max_abs(),
                t.all_finite()
            ));
        }
    }
    msg
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct AblationRow {
    pub value: String,
    pub params: usize,
    pub eval_loss: f64,
    pub eval_ppl: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    RopeMode,
    MoeSharing,
    Layout,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rope_mode" => Ok(Axis::RopeMode),
            "moe_sharing" => Ok(Axis::MoeSharing),
            "layout" => Ok(Axis::Layout),
            _ => Err(Error::Config(format!(
                "unknown ablation axis `{s}` (rope_mode|moe_sharing|layout)"
            ))),
        }
    }
}

/// The configs an axis expands to, in row order.
pub fn ablation_configs(base: &TrainConfig, axis: Axis) -> Result<Vec<(String, TrainConfig)>> {
    let mut rows = Vec::new();
    match axis {
        Axis::RopeMode => {
            for m in RopeMode::ALL {
                let mut c = base.clone();
                c.model.rope_mode = m;
                rows.push((m.name().to_string(), c));
            }
        }
        Axis::MoeSharing => {
            for s in [Sharing::Sei, Sharing::Cohesive, Sharing::Expansive] {
                let mut c = base.clone();
                c.model.sharing = s;
                rows.push((s.name().to_string(), c));
            }
        }
        Axis::Layout => {
            if base.ablate_layouts.is_empty() {
                return Err(Error::Config("layout axis needs `ablate_layouts`".into()));
            }
            for l in &base.ablate_layouts {
                let mut c = base.clone();
                c.model.layout = l.parse()?;
                c.model.expresser = c.model.layout.pairs.last()
                    == Some(&(crate::blocks::Mixer::Attn, FfnKind::Mlp));
                rows.push((l.clone(), c));
            }
        }
    }
    if !base.ablate_values.is_empty() {
        rows.retain(|(v, _)| base.ablate_values.contains(v));
        if rows.is_empty() {
            return Err(Error::Config(format!(
                "no axis value matches {:?}",
                base.ablate_values
            )));
        }
    }
    if base.ablate_equalize {
        let target = rows[0].1.model.report(1, 1)?.total;
        for (_, c) in rows.iter_mut().skip(1) {
            equalize_tail(&mut c.model, target)?;
        }
    }
    Ok(rows)
}

/// Widens or narrows the last layer's MLP so the total parameter count is
/// as close to `target` as the MLP granularity allows.
pub fn equalize_tail(cfg: &mut crate::blocks::OtceConfig, target: usize) -> Result<()> {
    if cfg.layout.pairs.last().map(|p| p.1) != Some(FfnKind::Mlp) {
        return Err(Error::Config(
            "equalising needs an MLP in the last layer".into(),
        ));
    }
    let per_unit = cfg.d_model * if cfg.mlp_variant.gated() { 3 } else { 2 };
    let hidden = cfg.tail_ffn_hidden.unwrap_or(cfg.ffn_hidden) as i64;
    let diff = target as i64 - cfg.report(1, 1)?.total as i64;
    let new = hidden + (diff as f64 / per_unit as f64).round() as i64;
    if new < 1 {
        return Err(Error::Config(format!(
            "cannot equalise: tail MLP width would be {new}"
        )));
    }
    cfg.tail_ffn_hidden = Some(new as usize);
    Ok(())
}

/// Trains one model per axis value (same seed and data order) and returns
/// rows ranked by eval loss.
pub fn ablate(base: &TrainConfig, axis: Axis) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (value, c) in ablation_configs(base, axis)? {
        let (rec, params) = match c.numeric_mode {
            DType::F32 => {
                let o = train::<f32>(&c, None)?;
                (o.records.last().cloned(), o.model.num_params())
            }
            DType::F64 => {
                let o = train::<f64>(&c, None)?;
                (o.records.last().cloned(), o.model.num_params())
            }
        };
        let rec = rec.ok_or_else(|| Error::Contract("training produced no record".into()))?;
        rows.push(AblationRow {
            value,
            params,
            eval_loss: rec.eval_loss,
            eval_ppl: rec.eval_ppl,
            accuracy: rec.task_accuracy,
        });
    }
    rows.sort_by(|a, b| a.eval_loss.total_cmp(&b.eval_loss));
    Ok(rows)
}

pub fn render_ablation(axis: &str, rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<4} {:<24} {:>10} {:>10} {:>10} {:>9}\n",
        "rank", axis, "params", "eval_loss", "eval_ppl", "accuracy"
    );
    for (i, r) in rows.iter().enumerate() {
        out.push_str(&format!(
            "{:<4} {:<24} {:>10} {:>10.4} {:>10.4} {:>9.4}\n",
            i + 1,
            r.value,
            r.params,
            r.eval_loss,
            r.eval_ppl,
            r.accuracy
        ));
    }
    out
}

/// Short summary of a metrics file: first and last records and the best
/// eval loss.
pub fn report(records: &[MetricsRecord]) -> Result<String> {
    let (first, last) = match (records.first(), records.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Format("metrics file has no records".into())),
    };
    if records.windows(2).any(|w| w[1].step <= w[0].step) {
        return Err(Error::Format("metrics steps are not increasing".into()));
    }
    let best = records
        .iter()
        .min_by(|a, b| a.eval_loss.total_cmp(&b.eval_loss))
        .unwrap();
    Ok(format!(
        "records      {}\nsteps        {} .. {}\ntrain_loss   {:.4} -> {:.4}\neval_loss    {:.4} -> {:.4} (best {:.4} at step {})\neval_ppl     {:.4}\naccuracy     {:.4}\n",
        records.len(),
        first.step,
        last.step,
        first.train_loss,
        last.train_loss,
        first.eval_loss,
        last.eval_loss,
        best.eval_loss,
        best.step,
        last.eval_ppl,
        last.task_accuracy
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskKind;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig {
            model: crate::blocks::OtceConfig::small("SMAM", 16, 65).unwrap(),
            ..TrainConfig::default()
        };
        c.model.ffn_hidden = 32;
        c.task = TaskSpec {
            seq_len: 32,
            n_pairs: 4,
            n_queries: 2,
            ..TaskSpec::mqar()
        };
        c.batch = 4;
        c.eval_batch = 4;
        c.eval_batches = 1;
        c
    }

    #[test]
    fn one_step_smoke_run_emits_one_record() {
        let c = TrainConfig { steps: 1, ..tiny() };
        let mut buf = Vec::new();
        let out = train::<f32>(&c, Some(&mut buf)).unwrap();
        assert_eq!(out.records.len(), 1);
        let back = read_metrics(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, out.records);
        assert!(back[0].eval_ppl >= 1.0);
    }

    #[test]
    fn char_lm_loss_falls() {
        let mut c = tiny();
        c.task = TaskSpec {
            seq_len: 32,
            ..TaskSpec::new(TaskKind::CharLm)
        };
        c.steps = 60;
        c.eval_every = 60;
        c.lr_scale = 2.0;
        let out = train::<f32>(&c, None).unwrap();
        let first = {
            let m = OtceModel::<f32>::build(&c.model, c.seed).unwrap();
            evaluate(&m, &c.task, 1, 4).unwrap().loss
        };
        assert!(
            out.records[0].eval_loss < first - 0.3,
            "{} vs {first}",
            out.records[0].eval_loss
        );
    }

    #[test]
    fn single_value_axis_equals_plain_training() {
        let mut c = TrainConfig { steps: 3, ..tiny() };
        c.ablate_values = vec!["both".into()];
        let rows = ablate(&c, Axis::RopeMode).unwrap();
        assert_eq!(rows.len(), 1);
        let plain = train::<f32>(&c, None).unwrap();
        assert_eq!(rows[0].eval_loss, plain.records.last().unwrap().eval_loss);
    }

    #[test]
    fn axes_expand_to_expected_rows() {
        let c = tiny();
        let names = |a| {
            ablation_configs(&c, a)
                .unwrap()
                .into_iter()
                .map(|r| r.0)
                .collect::<Vec<_>>()
        };
        assert_eq!(names(Axis::RopeMode), ["none", "attn", "ssm", "both"]);
        assert_eq!(names(Axis::MoeSharing), ["sei", "cohesive", "expansive"]);
        assert!(ablation_configs(&c, Axis::Layout).is_err());
    }

    #[test]
    fn equalising_matches_parameter_counts() {
        let mut c = tiny();
        c.ablate_layouts = vec!["SMSMAM".into(), "SMSMSM".into()];
        c.ablate_equalize = true;
        let rows = ablation_configs(&c, Axis::Layout).unwrap();
        let p: Vec<usize> = rows
            .iter()
            .map(|r| r.1.model.report(1, 1).unwrap().total)
            .collect();
        let unit = 3 * c.model.d_model;
        assert!(p[0].abs_diff(p[1]) <= unit / 2, "{p:?}");
        assert!(rows[0].1.model.expresser && !rows[1].1.model.expresser);
    }

    #[test]
    fn report_rejects_out_of_order_steps() {
        let r = MetricsRecord {
            step: 2,
            lr: 0.1,
            train_loss: 1.0,
            eval_loss: 1.0,
            eval_ppl: 1f64.exp(),
            task_accuracy: 0.5,
            wall_ms: None,
        };
        assert!(report(std::slice::from_ref(&r)).is_ok());
        assert!(report(&[r.clone(), r]).is_err());
        assert!(report(&[]).is_err());
    }
}
