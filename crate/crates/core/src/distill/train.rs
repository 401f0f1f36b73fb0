//! Joint student/trainee training under a distillation scheme.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{combined_loss, guide_terms, student_upstream, GuideSignals, LossBreakdown, LossParts};
use super::plan::{DistillPlan, Lambdas, Scheme};
use crate::arch::NetworkSpec;
use crate::dataset::Dataset;
use crate::engine::{cross_entropy_grad, MaskedModel, OutputGrads};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::resource::network_costs;
use crate::training::epoch_batches;

const STUDENT_STREAM: u64 = 0x5354_5544;
const TRAINEE_STREAM: u64 = 0x5452_4e45;

/// Starting models for a scheme.
#[derive(Clone, Debug)]
pub struct SchemeModels {
    pub student: MaskedModel,
    pub trainee: Option<MaskedModel>,
}

/// Builds the student and trainee for `scheme`.
///
/// `compressed` is the compressed pretrained teacher; schemes that start the
/// student from it require it, the others initialise the student randomly from
/// `student_spec`. The trainee always has the teacher's architecture and fresh
/// weights. With a shared prefix the first `prefix` layers are copied so both
/// networks start from identical values: from the student for S5/S6, from
/// the trainee for S3.
pub fn prepare_models(
    scheme: Scheme,
    student_spec: &NetworkSpec,
    compressed: Option<&MaskedModel>,
    teacher_spec: &NetworkSpec,
    prefix: usize,
    seed: u64,
) -> Result<SchemeModels> {
    let mut student = if scheme.student_from_teacher() {
        compressed
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("{scheme} starts from the compressed teacher")))?
    } else {
        MaskedModel::new(student_spec.clone(), seed ^ STUDENT_STREAM)?
    };
    let mut trainee = if scheme.has_trainee() {
        Some(MaskedModel::new(teacher_spec.clone(), seed ^ TRAINEE_STREAM)?)
    } else {
        None
    };
    if let (true, Some(tr)) = (scheme.shares_prefix(), trainee.as_mut()) {
        check_prefix(&student, tr, prefix)?;
        for i in 0..prefix {
            if scheme.student_from_teacher() {
                tr.params[i] = student.params[i].clone();
            } else {
                student.params[i] = tr.params[i].clone();
            }
        }
    }
    Ok(SchemeModels { student, trainee })
}

fn check_prefix(a: &MaskedModel, b: &MaskedModel, prefix: usize) -> Result<()> {
    if prefix > a.layer_count().saturating_sub(1) || prefix > b.layer_count().saturating_sub(1) {
        return Err(Error::InvalidArgument(format!("shared prefix {prefix} leaves no private layers")));
    }
    if a.spec.layers[..prefix] != b.spec.layers[..prefix] {
        return Err(Error::IncompatibleRewrite("student and trainee disagree on the shared prefix".into()));
    }
    Ok(())
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub validation_accuracy: f64,
    pub validation_micro_accuracy: f64,
    pub validation_f1: f64,
    pub trainee_active: bool,
    pub epoch_flops: u128,
    pub cumulative_flops: u128,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub scheme: Scheme,
    pub lambdas: Lambdas,
    pub halting_epoch: usize,
    pub student: MaskedModel,
    pub trainee: Option<MaskedModel>,
    /// Trainee as it stood at the end of epoch `h` (before training when `h = 0`).
    pub trainee_at_halt: Option<MaskedModel>,
    pub history: Vec<EpochRecord>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

impl TrainOutcome {
    pub fn history_jsonl(&self) -> String {
        self.history
            .iter()
            .map(|r| serde_json::to_string(r).expect("history row serializes") + "\n")
            .collect()
    }

    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.history.last()
    }

    pub fn final_accuracy(&self) -> f64 {
        self.final_record().map_or(0.0, |r| r.validation_accuracy)
    }

    pub fn total_flops(&self) -> u128 {
        self.final_record().map_or(0, |r| r.cumulative_flops)
    }
}

/// Per-sample training cost of one epoch: `3·F` for every model that is
/// updated (forward plus two backward products), `F` for inference-only
/// guides. A shared prefix is counted once while the trainee trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopModel {
    pub student: u128,
    pub trainee: u128,
    pub teacher: u128,
    pub shared_prefix: u128,
}

impl FlopModel {
    pub fn new(student: &NetworkSpec, trainee: &NetworkSpec, teacher: &NetworkSpec, prefix: usize) -> Self {
        let sum = |s: &NetworkSpec, upto: usize| -> u128 {
            network_costs(s).0.iter().take(upto).map(|c| c.flops).sum()
        };
        FlopModel {
            student: sum(student, usize::MAX),
            trainee: sum(trainee, usize::MAX),
            teacher: sum(teacher, usize::MAX),
            shared_prefix: sum(student, prefix),
        }
    }

    pub fn per_sample(&self, scheme: Scheme, trainee_active: bool, shared: bool) -> u128 {
        let mut f = 3 * self.student;
        if trainee_active {
            f += 3 * self.trainee;
            if shared {
                f -= 3 * self.shared_prefix;
            }
        }
        if scheme.teacher_guides() || (trainee_active && scheme.teacher_guides_trainee()) {
            f += self.teacher;
        }
        f
    }
}

fn rows_of<'a>(data: &'a Dataset, idx: &[usize]) -> (Vec<&'a [f64]>, Vec<usize>) {
    (data.rows_at(idx), idx.iter().map(|&i| data.label(i)).collect())
}

struct StepOutput {
    parts: LossParts,
}

fn train_step(
    plan: &DistillPlan,
    lambdas: &Lambdas,
    student: &mut MaskedModel,
    trainee: Option<&mut MaskedModel>,
    teacher: &MaskedModel,
    prefix: usize,
    rows: &[&[f64]],
    labels: &[usize],
) -> Result<StepOutput> {
    let scheme = plan.scheme;
    let needs_teacher = scheme.teacher_guides() || (trainee.is_some() && scheme.teacher_guides_trainee());
    let teacher_sig = if needs_teacher {
        Some(GuideSignals::from_trace(&teacher.spec.layers, &teacher.forward(rows)?))
    } else {
        None
    };

    let mut trainee_pass = None;
    if let Some(tr) = trainee.as_deref() {
        let trace = tr.forward(rows)?;
        let (ce, d_ce) = cross_entropy_grad(&trace.logits(), labels);
        let sig = GuideSignals::from_trace(&tr.spec.layers, &trace);
        trainee_pass = Some((trace, ce, d_ce, sig));
    }

    let mut guides: Vec<&GuideSignals> = Vec::new();
    if scheme.teacher_guides() {
        guides.extend(teacher_sig.as_ref());
    }
    if scheme.trainee_guides() {
        guides.extend(trainee_pass.as_ref().map(|t| &t.3));
    }

    let trace = student.forward(rows)?;
    let (ce_s, d_ce_s) = cross_entropy_grad(&trace.logits(), labels);
    let mut terms = guide_terms(&student.spec.layers, &trace, &guides)?;
    if !scheme.uses_attention() {
        terms.attention = 0.0;
    }
    let mut student_grads = student.backward(&trace, &student_upstream(&d_ce_s, &terms, lambdas));
    student_grads.clip_norm(plan.grad_clip);

    let mut parts = LossParts {
        ce_student: ce_s,
        ce_trainee: 0.0,
        attention: terms.attention,
        distillation: terms.distillation,
    };

    if let (Some(tr), Some((tr_trace, ce_t, d_ce_t, _))) = (trainee, trainee_pass) {
        parts.ce_trainee = ce_t;
        let n = labels.len().max(1) as f64;
        let guided = scheme.teacher_guides_trainee();
        let d_logits: Vec<Vec<f64>> = if guided {
            let t_logits = &teacher_sig.as_ref().expect("teacher signals").logits;
            let te_logits = tr_trace.logits();
            d_ce_t
                .iter()
                .zip(te_logits.iter().zip(t_logits))
                .map(|(dc, (te, t))| {
                    dc.iter()
                        .zip(te.iter().zip(t))
                        .map(|(c, (a, b))| lambdas.l4 * c + lambdas.l3 * 2.0 * (a - b) / n)
                        .collect()
                })
                .collect()
        } else {
            d_ce_t
        };
        let mut trainee_grads = tr.backward(&tr_trace, &OutputGrads::logits_only(d_logits));
        trainee_grads.clip_norm(plan.grad_clip);
        if prefix > 0 {
            for i in 0..prefix {
                for (gs, gt) in student_grads.layers[i].iter_mut().zip(trainee_grads.layers[i].iter_mut()) {
                    for (a, b) in gs.iter_mut().zip(gt.iter_mut()) {
                        let sum = *a + *b;
                        *a = sum;
                        *b = sum;
                    }
                }
            }
        }
        tr.sgd_step(&trainee_grads, plan.eta)?;
    }
    student.sgd_step(&student_grads, plan.eta)?;
    Ok(StepOutput { parts })
}

/// Trains the student (and trainee, if any) for `plan.total_epochs` epochs.
///
/// While the trainee is active it is updated every batch and guides the
/// student; from epoch `h + 1` on it neither trains nor guides. A shared
/// prefix receives the summed gradient of both networks while the trainee is
/// active, which keeps the two copies identical; afterwards only the student
/// keeps updating its copy.
pub fn train(models: SchemeModels, teacher: &MaskedModel, train: &Dataset, validation: &Dataset, plan: &DistillPlan) -> Result<TrainOutcome> {
    plan.check()?;
    let SchemeModels { mut student, mut trainee } = models;
    let scheme = plan.scheme;
    if scheme.has_trainee() != trainee.is_some() {
        return Err(Error::InvalidArgument(format!("{scheme}: trainee presence does not match the scheme")));
    }
    if train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let prefix = if scheme.shares_prefix() { plan.shared_prefix } else { 0 };
    if let Some(tr) = &trainee {
        check_prefix(&student, tr, prefix)?;
    }
    let lambdas = plan.effective_lambdas();
    let halt = plan.effective_halt();
    let branch_halt = if scheme.has_trainee() { halt } else { 0 };
    let flops = FlopModel::new(&student.spec, trainee.as_ref().map_or(&teacher.spec, |t| &t.spec), &teacher.spec, prefix);

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut history = Vec::with_capacity(plan.total_epochs);
    let mut trainee_at_halt = if halt == 0 { trainee.clone() } else { None };
    let mut cumulative: u128 = 0;
    let mut diverged = None;

    'epochs: for epoch in 1..=plan.total_epochs {
        let active = trainee.is_some() && epoch <= halt;
        let mut sums = LossParts::default();
        let mut seen = 0usize;
        for batch in epoch_batches(train.len(), plan.batch_size, &mut rng) {
            let (rows, labels) = rows_of(train, &batch);
            let tr = if active { trainee.as_mut() } else { None };
            let step = match train_step(plan, &lambdas, &mut student, tr, teacher, prefix, &rows, &labels) {
                Ok(s) => s,
                Err(Error::Diverged(msg)) => {
                    diverged = Some(format!("epoch {epoch}: {msg}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let p = step.parts;
            if ![p.ce_student, p.ce_trainee, p.attention, p.distillation].iter().all(|v| v.is_finite()) {
                diverged = Some(format!("epoch {epoch}: non-finite loss"));
                break 'epochs;
            }
            let w = batch.len() as f64;
            sums.ce_student += w * p.ce_student;
            sums.ce_trainee += w * p.ce_trainee;
            sums.attention += w * p.attention;
            sums.distillation += w * p.distillation;
            seen += batch.len();
        }
        let inv = 1.0 / seen.max(1) as f64;
        let parts = LossParts {
            ce_student: sums.ce_student * inv,
            ce_trainee: sums.ce_trainee * inv,
            attention: sums.attention * inv,
            distillation: sums.distillation * inv,
        };
        let epoch_flops = flops.per_sample(scheme, active, prefix > 0) * train.len() as u128;
        cumulative += epoch_flops;
        let metrics = if validation.is_empty() {
            None
        } else {
            Some(MetricsReport::from_predictions(
                &student.predict(&validation.rows())?,
                validation.labels(),
                validation.class_count(),
            )?)
        };
        history.push(EpochRecord {
            loss: combined_loss(&parts, &lambdas, branch_halt, epoch),
            validation_accuracy: metrics.as_ref().map_or(0.0, |m| m.accuracy),
            validation_micro_accuracy: metrics.as_ref().map_or(0.0, |m| m.micro_accuracy),
            validation_f1: metrics.as_ref().map_or(0.0, |m| m.f1),
            trainee_active: active,
            epoch_flops,
            cumulative_flops: cumulative,
        });
        if active && epoch == halt {
            trainee_at_halt = trainee.clone();
        }
    }

    Ok(TrainOutcome {
        scheme,
        lambdas,
        halting_epoch: halt,
        student,
        trainee,
        trainee_at_halt,
        history,
        diverged,
    })
}
