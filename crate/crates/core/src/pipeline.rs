//! End-to-end search for a lightweight student.
//!
//! For every dropout-layer count `l` in the sweep the pretrained teacher is
//! pruned, compressed against the device budget, and the resulting student is
//! distilled. The candidate with the smallest final combined loss among the
//! feasible ones wins.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::compress::{self, CompressConfig, RewriteRecord};
use crate::dataset::Dataset;
use crate::distill::{
    determine_halting_epoch, literal_minimizer, optimize_lambdas, prepare_models, train, DeConfig, DistillPlan,
    HaltingConfig, LambdaMode, DEFAULT_GRAD_CLIP, Lambdas, LossParts, Scheme, TrainOutcome,
};
use crate::dropout::{self, DropoutConfig};
use crate::engine::MaskedModel;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::par;
use crate::resource::{DeviceProfile, ResourceReport};
use crate::training::{dataset_loss, fit, SgdConfig};
use crate::arch::NetworkSpec;

pub const TOOL: &str = "lightkd";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Seed of the train/validation shuffle. Must match the one used when the
    /// teacher was pretrained.
    pub split_seed: u64,
    pub validation_fraction: f64,
    pub omega: f64,
    pub rank_tolerance: f64,
    pub dropout_rate: f64,
    pub dropout_c: f64,
    pub dropout_max_iteration: usize,
    pub sgd: SgdConfig,
    /// Distillation epochs `E`.
    pub epochs: usize,
    pub halting: HaltingConfig,
    pub scheme: Scheme,
    pub lambda_mode: LambdaMode,
    pub de: DeConfig,
    /// Epochs of each short training run used to score a λ candidate.
    pub de_epochs: usize,
    pub grad_clip: f64,
    /// Relative tolerance when re-checking the teacher's reference loss.
    pub reference_tolerance: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            split_seed: 1,
            validation_fraction: 0.3,
            omega: 0.5,
            rank_tolerance: 0.05,
            dropout_rate: 0.5,
            dropout_c: 1.0,
            dropout_max_iteration: 20,
            sgd: SgdConfig::default(),
            epochs: 30,
            halting: HaltingConfig::default(),
            scheme: Scheme::S6,
            lambda_mode: LambdaMode::DifferentialEvolution,
            de: DeConfig::default(),
            de_epochs: 3,
            grad_clip: DEFAULT_GRAD_CLIP,
            reference_tolerance: 1e-9,
        }
    }
}

impl PipelineConfig {
    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::InvalidArgument(format!("omega {} outside [0, 1]", self.omega)));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidArgument("validation fraction must lie in (0, 1)".into()));
        }
        if self.epochs == 0 || self.de_epochs == 0 {
            return Err(Error::InvalidArgument("epoch counts must be >= 1".into()));
        }
        self.sgd.check()
    }

    pub fn split(&self, data: &Dataset) -> Result<(Dataset, Dataset)> {
        split_data(data, self.validation_fraction, self.split_seed)
    }

    fn dropout(&self, seed: u64) -> DropoutConfig {
        DropoutConfig {
            initial_rate: self.dropout_rate,
            c: self.dropout_c,
            max_iteration: self.dropout_max_iteration,
            sgd: self.sgd,
            seed,
        }
    }
}

fn split_data(data: &Dataset, validation_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if data.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    data.split(1.0 - validation_fraction, seed)
}

/// Dropout-layer counts visited for `l_prime` eligible layers: from
/// `⌊L'/2⌋` (at least 1) in steps of `⌈L'/10⌉` while `l ≤ L'`.
pub fn l_sequence(l_prime: usize) -> Vec<usize> {
    if l_prime == 0 {
        return Vec::new();
    }
    let step = l_prime.div_ceil(10).max(1);
    ((l_prime / 2).max(1)..=l_prime).step_by(step).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    pub split_seed: u64,
    pub validation_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 40,
            sgd: SgdConfig::default(),
            seed: 3,
            split_seed: 1,
            validation_fraction: 0.3,
        }
    }
}

/// Trains a teacher from scratch on the training split and records its
/// reference loss and per-epoch validation accuracy.
pub fn pretrain_teacher(spec: &NetworkSpec, data: &Dataset, cfg: &PretrainConfig) -> Result<Checkpoint> {
    let (train_set, val) = split_data(data, cfg.validation_fraction, cfg.split_seed)?;
    let mut model = MaskedModel::new(spec.clone(), cfg.seed)?;
    let report = fit(&mut model, &train_set, &val, cfg.epochs, &cfg.sgd, cfg.seed)?;
    Ok(Checkpoint::new(
        model,
        CheckpointMeta {
            reference_loss: Some(report.final_train_loss),
            validation_accuracy: report.validation_accuracy,
            epochs: cfg.epochs,
            note: Some("pretrained teacher".into()),
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSummary {
    pub rounds: usize,
    pub kept_round: usize,
    pub initial_connections: usize,
    pub connections: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum CandidateStatus {
    Trained,
    Infeasible,
    Diverged { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub l: usize,
    pub seed: u64,
    pub student: NetworkSpec,
    /// File name of the student checkpoint, filled in by whoever writes it.
    pub checkpoint: Option<String>,
    pub dropout: DropoutSummary,
    pub rewrites: Vec<RewriteRecord>,
    pub resource: ResourceReport,
    #[serde(flatten)]
    pub status: CandidateStatus,
    pub lambdas: Option<Lambdas>,
    pub lambda_fitness: Option<f64>,
    pub halting_epoch: usize,
    pub final_combined_loss: Option<f64>,
    pub training_flops: Option<u128>,
    pub metrics: Option<MetricsReport>,
}

impl CandidateRecord {
    pub fn eligible(&self) -> bool {
        self.resource.feasible && self.status == CandidateStatus::Trained && self.final_combined_loss.is_some()
    }
}

/// Index of the record with the smallest final combined loss among eligible
/// ones; ties go to the smaller `l`, then to fewer FLOPs.
pub fn select(records: &[CandidateRecord]) -> Result<usize> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no candidates to select from".into()));
    }
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.eligible())
        .min_by(|(_, a), (_, b)| {
            let la = a.final_combined_loss.expect("eligible");
            let lb = b.final_combined_loss.expect("eligible");
            la.total_cmp(&lb)
                .then(a.l.cmp(&b.l))
                .then(a.resource.total_flops.cmp(&b.resource.total_flops))
        })
        .map(|(i, _)| i)
        .ok_or_else(|| Error::AllInfeasible(format!("{} candidates, none feasible and trained", records.len())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "outcome")]
pub enum Selection {
    Best { index: usize, l: usize, final_combined_loss: f64, rationale: String },
    AllInfeasible,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: PipelineConfig,
    pub teacher: String,
    pub device: DeviceProfile,
    pub reference_loss: f64,
    pub halting_epoch: usize,
    pub l_prime: usize,
    pub l_sequence: Vec<usize>,
    /// Final combined loss per candidate, in sweep order (`None` when the
    /// candidate was not trained).
    pub losses: Vec<Option<f64>>,
    pub candidates: Vec<CandidateRecord>,
    pub selection: Selection,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub manifest: Manifest,
    /// Trained student per candidate (`None` for untrained ones).
    pub students: Vec<Option<MaskedModel>>,
    pub histories: Vec<Option<TrainOutcome>>,
}

impl PipelineOutcome {
    pub fn best(&self) -> Option<(&CandidateRecord, &MaskedModel)> {
        match self.manifest.selection {
            Selection::Best { index, .. } => Some((
                &self.manifest.candidates[index],
                self.students[index].as_ref().expect("selected candidate was trained"),
            )),
            Selection::AllInfeasible => None,
        }
    }

    pub fn into_result(self) -> Result<PipelineOutcome> {
        match self.manifest.selection {
            Selection::Best { .. } => Ok(self),
            Selection::AllInfeasible => Err(Error::AllInfeasible(format!(
                "{} candidates evaluated",
                self.manifest.candidates.len()
            ))),
        }
    }
}

struct Context<'a> {
    teacher: &'a MaskedModel,
    train: &'a Dataset,
    validation: &'a Dataset,
    device: &'a DeviceProfile,
    cfg: &'a PipelineConfig,
    reference_loss: f64,
    halting_epoch: usize,
}

impl Context<'_> {
    fn plan(&self, lambdas: Lambdas, epochs: usize, seed: u64) -> DistillPlan {
        DistillPlan {
            lambdas,
            halting_epoch: self.halting_epoch.min(epochs - 1),
            total_epochs: epochs,
            scheme: self.cfg.scheme,
            shared_prefix: self.teacher.spec.shared(),
            eta: self.cfg.sgd.eta,
            batch_size: self.cfg.sgd.batch_size,
            seed,
            grad_clip: self.cfg.grad_clip,
        }
    }

    fn distill(&self, student: &MaskedModel, plan: &DistillPlan) -> Result<TrainOutcome> {
        let models = prepare_models(
            plan.scheme,
            &student.spec,
            Some(student),
            &self.teacher.spec,
            plan.shared_prefix,
            plan.seed,
        )?;
        train(models, self.teacher, self.train, self.validation, plan)
    }

    fn choose_lambdas(&self, student: &MaskedModel, seed: u64) -> Result<(Lambdas, Option<f64>)> {
        let short = |l: Lambdas| self.distill(student, &self.plan(l, self.cfg.de_epochs, seed));
        match self.cfg.lambda_mode {
            LambdaMode::Fixed { l1, l2, l3 } => Ok((Lambdas::new(l1, l2, l3)?, None)),
            LambdaMode::Literal => {
                let run = short(Lambdas::uniform())?;
                let parts = run.final_record().map_or(LossParts::default(), |r| LossParts {
                    ce_student: r.loss.ce_student,
                    ce_trainee: r.loss.ce_trainee,
                    attention: r.loss.attention,
                    distillation: r.loss.distillation,
                });
                Ok((literal_minimizer(&parts), None))
            }
            LambdaMode::DifferentialEvolution => {
                let de = DeConfig { seed: self.cfg.de.seed ^ seed, ..self.cfg.de };
                let search = optimize_lambdas(
                    |l| match short(*l) {
                        Ok(run) if run.diverged.is_none() => run.final_accuracy(),
                        _ => f64::NEG_INFINITY,
                    },
                    &de,
                );
                Ok((search.lambdas, Some(search.fitness)))
            }
        }
    }

    fn candidate(&self, l: usize) -> Result<(CandidateRecord, Option<MaskedModel>, Option<TrainOutcome>)> {
        let seed = self.cfg.seed.wrapping_add(l as u64);
        let pruned = dropout::run(self.teacher, self.train, self.reference_loss, l, &self.cfg.dropout(seed))?;
        let compressed = compress::run(
            &pruned.model,
            self.device,
            pruned.target_layers.clone(),
            &CompressConfig { omega: self.cfg.omega, rank_tolerance: self.cfg.rank_tolerance },
        )?;
        let mut record = CandidateRecord {
            l,
            seed,
            student: compressed.model.spec.clone(),
            checkpoint: None,
            dropout: DropoutSummary {
                rounds: pruned.rounds.len(),
                kept_round: pruned.kept_round,
                initial_connections: pruned.initial_connections,
                connections: pruned.q_b,
            },
            rewrites: compressed.rewrites.clone(),
            resource: compressed.report.clone(),
            status: CandidateStatus::Infeasible,
            lambdas: None,
            lambda_fitness: None,
            halting_epoch: self.plan(Lambdas::uniform(), self.cfg.epochs, seed).halting_epoch,
            final_combined_loss: None,
            training_flops: None,
            metrics: None,
        };
        if !compressed.feasible {
            return Ok((record, None, None));
        }
        let (lambdas, fitness) = self.choose_lambdas(&compressed.model, seed)?;
        record.lambdas = Some(lambdas);
        record.lambda_fitness = fitness;
        let run = self.distill(&compressed.model, &self.plan(lambdas, self.cfg.epochs, seed))?;
        record.training_flops = Some(run.total_flops());
        if let Some(msg) = &run.diverged {
            record.status = CandidateStatus::Diverged { message: msg.clone() };
            return Ok((record, None, Some(run)));
        }
        record.status = CandidateStatus::Trained;
        record.final_combined_loss = run.final_record().map(|r| r.loss.combined);
        record.metrics = Some(MetricsReport::from_predictions(
            &run.student.predict(&self.validation.rows())?,
            self.validation.labels(),
            self.validation.class_count(),
        )?);
        Ok((record, Some(run.student.clone()), Some(run)))
    }
}

/// Runs the full sweep. Candidates are evaluated in parallel and assembled in
/// sweep order.
pub fn run(teacher: &Checkpoint, data: &Dataset, device: &DeviceProfile, cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.check()?;
    let (train_set, validation) = cfg.split(data)?;
    let model = &teacher.model;
    let recorded = teacher
        .meta
        .reference_loss
        .ok_or_else(|| Error::Checkpoint("teacher checkpoint has no reference loss".into()))?;
    let actual = dataset_loss(model, &train_set)?;
    if (actual - recorded).abs() > cfg.reference_tolerance * recorded.abs().max(1.0) {
        return Err(Error::Checkpoint(format!(
            "teacher reproduces loss {actual} but recorded {recorded}; was it trained on this split?"
        )));
    }
    if model.spec.class_count != data.class_count() {
        return Err(Error::Dataset(format!(
            "teacher predicts {} classes, dataset has {}",
            model.spec.class_count,
            data.class_count()
        )));
    }
    let l_prime = model.spec.non_shared_count();
    let ls = l_sequence(l_prime);
    if ls.is_empty() {
        return Err(Error::InvalidSpec("teacher has no layers outside the shared prefix".into()));
    }
    let halting_epoch = determine_halting_epoch(&teacher.meta.validation_accuracy, &cfg.halting);
    let ctx = Context {
        teacher: model,
        train: &train_set,
        validation: &validation,
        device,
        cfg,
        reference_loss: recorded,
        halting_epoch,
    };

    let mut candidates = Vec::with_capacity(ls.len());
    let mut students = Vec::with_capacity(ls.len());
    let mut histories = Vec::with_capacity(ls.len());
    for result in par::map(&ls, |&l| ctx.candidate(l)) {
        let (record, student, history) = result?;
        candidates.push(record);
        students.push(student);
        histories.push(history);
    }

    let selection = match select(&candidates) {
        Ok(index) => {
            let r = &candidates[index];
            let loss = r.final_combined_loss.expect("eligible");
            let ties = candidates
                .iter()
                .filter(|c| c.eligible() && c.final_combined_loss == Some(loss))
                .count();
            Selection::Best {
                index,
                l: r.l,
                final_combined_loss: loss,
                rationale: format!(
                    "smallest final combined loss among {} feasible candidates{}",
                    candidates.iter().filter(|c| c.eligible()).count(),
                    if ties > 1 { " (tie broken by smaller l)" } else { "" }
                ),
            }
        }
        Err(Error::AllInfeasible(_)) => Selection::AllInfeasible,
        Err(e) => return Err(e),
    };

    let manifest = Manifest {
        tool: TOOL.into(),
        version: VERSION.into(),
        config: cfg.clone(),
        teacher: model.spec.name.clone(),
        device: device.clone(),
        reference_loss: recorded,
        halting_epoch,
        l_prime,
        l_sequence: ls,
        losses: candidates.iter().map(|c| c.final_combined_loss).collect(),
        candidates,
        selection,
    };
    Ok(PipelineOutcome { manifest, students, histories })
}
