//! Batch pipeline: staged execution with persistence between stages.
//!
//! Stages write their artifacts into a work directory so later stages (and
//! grid search) can reuse them:
//!
//! ```text
//! work_dir/
//!   families.json        canonical family order
//!   vocab.json           training vocabulary
//!   split_train.csv      manifest of the training split (after drop_short)
//!   split_test.csv       manifest of the test split
//!   drop_report.json     short samples removed from the training split
//!   hmm_<family>.json    one trained model per family
//!   skip_report.json     samples skipped at feature extraction
//!   scaler.json          training-set standardization statistics
//!   train_features.hmf   scaled features, binary HMF1 format
//!   test_features.hmf
//!   train_labels.json    row-aligned sample ids and families
//!   test_labels.json
//!   cnn_spec.json / cnn_weights.bin / train_history.json   (cnn)
//!   rf_model.json | svm_model.json                         (rf / svm)
//!   report.json / report.txt / timing.json / stage_times.json
//! ```
//!
//! Every artifact except the timing files is byte-deterministic for a fixed
//! config and seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    rf_fit, rf_predict, svm_fit, svm_predict, RandomForestModel, RfParams, SvmParams,
};
use crate::corpus::{
    build_vocabulary, drop_short, encode_corpus, filter_and_split, load_corpus, Corpus,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::evalreport::{
    confusion, grid_search, metrics, normalize_rows, timing_report, ClassMetrics, GridCell,
    GridCellOutcome, GridResult, GridSpec, TimingReport,
};
use crate::features::{
    apply_scaler, embed_image, extract_hidden_features, fit_scaler, raw_features,
    read_feature_file, write_feature_file, write_pgm, FeatureVector, ImageMatrix, Scaler,
};
use crate::hmm::{load_model, save_model, train_family_models, HmmModel};
use crate::nn::{
    fit, init_cnn, load_cnn, predict, save_cnn, CnnSpec, ConvBlockSpec, LossKind,
    OptimizerConfig, OptimizerKind,
};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Cnn,
    Rf,
    Svm,
}

impl ClassifierKind {
    pub fn parse(name: &str) -> Result<ClassifierKind> {
        match name {
            "cnn" => Ok(ClassifierKind::Cnn),
            "rf" => Ok(ClassifierKind::Rf),
            "svm" => Ok(ClassifierKind::Svm),
            other => Err(Error::InvalidInput(format!("unknown classifier {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ClassifierKind::Cnn => "cnn",
            ClassifierKind::Rf => "rf",
            ClassifierKind::Svm => "svm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeaturizerKind {
    Hmm,
    Raw,
}

impl FeaturizerKind {
    pub fn parse(name: &str) -> Result<FeaturizerKind> {
        match name {
            "hmm" => Ok(FeaturizerKind::Hmm),
            "raw" => Ok(FeaturizerKind::Raw),
            other => Err(Error::InvalidInput(format!("unknown featurizer {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeaturizerKind::Hmm => "hmm",
            FeaturizerKind::Raw => "raw",
        }
    }
}

fn default_n() -> usize {
    20
}
fn default_l() -> usize {
    112
}
fn default_classifier() -> ClassifierKind {
    ClassifierKind::Cnn
}
fn default_featurizer() -> FeaturizerKind {
    FeaturizerKind::Hmm
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Nadam
}
fn default_loss() -> LossKind {
    LossKind::CategoricalCrossentropy
}
fn default_learning_rate() -> f64 {
    0.001
}
fn default_seed() -> u64 {
    42
}
fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    32
}
fn default_image_side() -> usize {
    224
}
fn default_min_family_size() -> usize {
    50
}
fn default_train_fraction() -> f64 {
    0.8
}

/// Full pipeline configuration; all defaults mirror the selected
/// hyperparameters (N = 20, L = 112, Nadam at 0.001).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub data_root: PathBuf,
    pub work_dir: PathBuf,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_l")]
    pub l: usize,
    #[serde(default = "default_classifier")]
    pub classifier: ClassifierKind,
    #[serde(default = "default_featurizer")]
    pub featurizer: FeaturizerKind,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_image_side")]
    pub image_side: usize,
    #[serde(default = "default_min_family_size")]
    pub min_family_size: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "crate::nn::default_conv_blocks")]
    pub conv_blocks: Vec<ConvBlockSpec>,
    #[serde(default)]
    pub rf: RfParams,
    #[serde(default)]
    pub svm: SvmParams,
    /// Export the first k training images as PGM for inspection.
    #[serde(default)]
    pub export_images: usize,
    #[serde(default)]
    pub grid: Option<GridSpec>,
}

impl PipelineConfig {
    pub fn new(manifest: PathBuf, data_root: PathBuf, work_dir: PathBuf) -> PipelineConfig {
        PipelineConfig {
            manifest,
            data_root,
            work_dir,
            n: default_n(),
            l: default_l(),
            classifier: default_classifier(),
            featurizer: default_featurizer(),
            optimizer: default_optimizer(),
            loss: default_loss(),
            learning_rate: default_learning_rate(),
            seed: default_seed(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            image_side: default_image_side(),
            min_family_size: default_min_family_size(),
            train_fraction: default_train_fraction(),
            conv_blocks: crate::nn::default_conv_blocks(),
            rf: RfParams::default(),
            svm: SvmParams::default(),
            export_images: 0,
            grid: None,
        }
    }

    pub fn from_file(path: &Path) -> Result<PipelineConfig> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.work_dir.join(name)
    }

    fn model_path(&self, family: &str) -> PathBuf {
        self.path(&format!("hmm_{family}.json"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelEntry {
    sample_id: String,
    family: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SkipReport {
    pub skipped: Vec<String>,
    pub per_family: BTreeMap<String, usize>,
}

/// Row-aligned manifest entries of the original manifest, used to persist
/// split membership as loadable manifests.
fn manifest_paths(manifest: &Path) -> Result<BTreeMap<String, (String, String)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| Error::MalformedManifest(format!("{}: {e}", manifest.display())))?;
    let mut map = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::MalformedManifest(e.to_string()))?;
        map.insert(
            record[0].to_string(),
            (record[1].to_string(), record[2].to_string()),
        );
    }
    Ok(map)
}

fn write_split_manifest(
    path: &Path,
    corpus: &Corpus,
    paths: &BTreeMap<String, (String, String)>,
) -> Result<()> {
    let mut out = String::from("sample_id,family,path\n");
    for sample in &corpus.samples {
        let (family, rel) = paths.get(&sample.sample_id).ok_or_else(|| {
            Error::MalformedManifest(format!(
                "sample {} missing from original manifest",
                sample.sample_id
            ))
        })?;
        out.push_str(&format!("{},{},{}\n", sample.sample_id, family, rel));
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn record_stage_seconds(cfg: &PipelineConfig, stage: &str, seconds: f64) -> Result<()> {
    let path = cfg.path("stage_times.json");
    let mut times: BTreeMap<String, f64> = if path.exists() {
        read_json(&path)?
    } else {
        BTreeMap::new()
    };
    times.insert(stage.to_string(), seconds);
    write_json(&path, &times)
}

/// Stage 1: load -> filter/split -> vocabulary -> encode -> drop_short ->
/// per-family Baum-Welch. Persists split manifests, the vocabulary, the drop
/// report, and one model file per family.
pub fn stage_train_hmms(cfg: &PipelineConfig) -> Result<()> {
    let started = Instant::now();
    fs::create_dir_all(&cfg.work_dir)?;
    let corpus = load_corpus(&cfg.manifest, &cfg.data_root)?;
    let paths = manifest_paths(&cfg.manifest)?;
    let split = filter_and_split(&corpus, cfg.min_family_size, cfg.train_fraction, cfg.seed)?;
    let vocab = build_vocabulary(&split.train)?;
    let train = encode_corpus(split.train, &vocab)?;
    let test = encode_corpus(split.test, &vocab)?;
    let (train, drop_report) = drop_short(&train, cfg.l)?;
    if train.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "every training sample is shorter than l = {}",
            cfg.l
        )));
    }

    let models = train_family_models(&train, cfg.n, cfg.seed)?;

    write_json(&cfg.path("families.json"), &train.families)?;
    write_json(&cfg.path("vocab.json"), &vocab)?;
    write_json(&cfg.path("drop_report.json"), &drop_report)?;
    write_split_manifest(&cfg.path("split_train.csv"), &train, &paths)?;
    write_split_manifest(&cfg.path("split_test.csv"), &test, &paths)?;
    for (family, model) in &models {
        save_model(&cfg.model_path(family), model, &vocab)?;
    }
    record_stage_seconds(cfg, "train_hmms", started.elapsed().as_secs_f64())
}

fn load_artifacts(cfg: &PipelineConfig) -> Result<(Vec<String>, Vocabulary)> {
    let families: Vec<String> = read_json(&cfg.path("families.json"))?;
    let vocab: Vocabulary = read_json(&cfg.path("vocab.json"))?;
    Ok((families, vocab))
}

fn load_family_models(
    cfg: &PipelineConfig,
    families: &[String],
) -> Result<BTreeMap<String, HmmModel>> {
    let mut models = BTreeMap::new();
    for family in families {
        let (model, _) = load_model(&cfg.model_path(family))?;
        models.insert(family.clone(), model);
    }
    Ok(models)
}

fn extract_split_features(
    corpus: &Corpus,
    featurizer: FeaturizerKind,
    models: Option<&BTreeMap<String, HmmModel>>,
    l: usize,
    skip: &mut SkipReport,
) -> Result<Vec<FeatureVector>> {
    let mut vectors = Vec::with_capacity(corpus.len());
    for sample in &corpus.samples {
        let result = match featurizer {
            FeaturizerKind::Hmm => extract_hidden_features(
                sample,
                models.expect("hmm featurizer requires models"),
                l,
            ),
            FeaturizerKind::Raw => raw_features(sample, l),
        };
        match result {
            Ok(v) => vectors.push(v),
            Err(Error::SampleTooShort(_)) => {
                skip.skipped.push(sample.sample_id.clone());
                *skip.per_family.entry(sample.family.clone()).or_insert(0) += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(vectors)
}

fn labels_of(vectors: &[FeatureVector]) -> Vec<LabelEntry> {
    vectors
        .iter()
        .map(|v| LabelEntry {
            sample_id: v.sample_id.clone(),
            family: v.label.clone(),
        })
        .collect()
}

/// Stage 2: featurize both splits, fit the scaler on the training split
/// only, transform, and persist in the binary feature format.
pub fn stage_features(cfg: &PipelineConfig) -> Result<()> {
    let started = Instant::now();
    let (families, vocab) = load_artifacts(cfg)?;
    let models = match cfg.featurizer {
        FeaturizerKind::Hmm => Some(load_family_models(cfg, &families)?),
        FeaturizerKind::Raw => None,
    };
    let train = encode_corpus(
        load_corpus(&cfg.path("split_train.csv"), &cfg.data_root)?,
        &vocab,
    )?;
    let test = encode_corpus(
        load_corpus(&cfg.path("split_test.csv"), &cfg.data_root)?,
        &vocab,
    )?;

    let mut skip = SkipReport::default();
    let train_vectors =
        extract_split_features(&train, cfg.featurizer, models.as_ref(), cfg.l, &mut skip)?;
    let test_vectors =
        extract_split_features(&test, cfg.featurizer, models.as_ref(), cfg.l, &mut skip)?;
    if train_vectors.is_empty() {
        return Err(Error::EmptyCorpus(
            "no training sample survived feature extraction".into(),
        ));
    }

    let scaler = fit_scaler(&train_vectors)?;
    let scaled_train: Vec<FeatureVector> = train_vectors
        .iter()
        .map(|v| apply_scaler(&scaler, v))
        .collect::<Result<_>>()?;
    let scaled_test: Vec<FeatureVector> = test_vectors
        .iter()
        .map(|v| apply_scaler(&scaler, v))
        .collect::<Result<_>>()?;

    write_json(&cfg.path("scaler.json"), &scaler)?;
    write_json(&cfg.path("skip_report.json"), &skip)?;
    write_feature_file(&cfg.path("train_features.hmf"), &scaled_train)?;
    write_json(&cfg.path("train_labels.json"), &labels_of(&scaled_train))?;
    if scaled_test.is_empty() {
        // Keep downstream stages total: an empty test split still gets a
        // (header-only is invalid, so skip the file) labels sidecar.
        write_json(&cfg.path("test_labels.json"), &Vec::<LabelEntry>::new())?;
    } else {
        write_feature_file(&cfg.path("test_features.hmf"), &scaled_test)?;
        write_json(&cfg.path("test_labels.json"), &labels_of(&scaled_test))?;
    }
    record_stage_seconds(cfg, "features", started.elapsed().as_secs_f64())
}

/// Feature rows, canonical class indices, and sample ids of one split.
type SplitData = (Vec<Vec<f64>>, Vec<usize>, Vec<String>);

fn load_features_and_classes(
    cfg: &PipelineConfig,
    split: &str,
    families: &[String],
) -> Result<SplitData> {
    let rows = read_feature_file(&cfg.path(&format!("{split}_features.hmf")))?;
    let labels: Vec<LabelEntry> = read_json(&cfg.path(&format!("{split}_labels.json")))?;
    if rows.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{split}: {} feature rows vs {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let classes = labels
        .iter()
        .map(|entry| {
            families
                .iter()
                .position(|f| f == &entry.family)
                .ok_or_else(|| {
                    Error::LabelOutOfRange(format!(
                        "family {} not in canonical list",
                        entry.family
                    ))
                })
        })
        .collect::<Result<Vec<usize>>>()?;
    let ids = labels.into_iter().map(|e| e.sample_id).collect();
    Ok((rows, classes, ids))
}

fn rows_to_images(rows: &[Vec<f64>], side: usize) -> Result<Vec<ImageMatrix>> {
    rows.iter()
        .map(|row| {
            embed_image(
                &FeatureVector {
                    values: row.clone(),
                    sample_id: String::new(),
                    label: String::new(),
                },
                side,
            )
        })
        .collect()
}

/// Stage 3: train the configured classifier on the training features (the
/// CNN path embeds each vector as an image first) and persist the model.
pub fn stage_train_classifier(cfg: &PipelineConfig) -> Result<()> {
    let started = Instant::now();
    let (families, _) = load_artifacts(cfg)?;
    let (rows, classes, _) = load_features_and_classes(cfg, "train", &families)?;
    match cfg.classifier {
        ClassifierKind::Cnn => {
            let images = rows_to_images(&rows, cfg.image_side)?;
            if cfg.export_images > 0 {
                let dir = cfg.path("images");
                fs::create_dir_all(&dir)?;
                for (i, image) in images.iter().take(cfg.export_images).enumerate() {
                    write_pgm(&dir.join(format!("train_{i:04}.pgm")), image)?;
                }
            }
            let spec = CnnSpec {
                input_side: cfg.image_side,
                conv_blocks: cfg.conv_blocks.clone(),
                num_classes: families.len(),
            };
            let mut model = init_cnn(&spec, cfg.seed)?;
            let opt = OptimizerConfig::new(cfg.optimizer, cfg.learning_rate)?;
            let history = fit(
                &mut model,
                &images,
                &classes,
                &opt,
                cfg.loss,
                cfg.epochs,
                cfg.batch_size,
                seeding::mix64(cfg.seed ^ 0x6669_7421),
            )?;
            save_cnn(
                &model,
                &cfg.path("cnn_spec.json"),
                &cfg.path("cnn_weights.bin"),
            )?;
            write_json(&cfg.path("train_history.json"), &history)?;
        }
        ClassifierKind::Rf => {
            let model = rf_fit(
                &rows,
                &classes,
                families.len(),
                &cfg.rf,
                seeding::mix64(cfg.seed ^ 0x7266),
            )?;
            write_json(&cfg.path("rf_model.json"), &model)?;
        }
        ClassifierKind::Svm => {
            let model = svm_fit(
                &rows,
                &classes,
                families.len(),
                &cfg.svm,
                seeding::mix64(cfg.seed ^ 0x73766d),
            )?;
            write_json(&cfg.path("svm_model.json"), &model)?;
        }
    }
    record_stage_seconds(cfg, "train_classifier", started.elapsed().as_secs_f64())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub counts: Vec<Vec<u64>>,
    pub normalized: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub n: usize,
    pub l: usize,
    pub classifier: ClassifierKind,
    pub featurizer: FeaturizerKind,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub image_side: usize,
}

/// The deterministic evaluation record; timing lives in its own sidecar so
/// reruns with the same seed produce byte-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub confusion: ConfusionReport,
    pub families: Vec<String>,
    pub config: ReportConfig,
    pub seed: u64,
}

fn report_config(cfg: &PipelineConfig) -> ReportConfig {
    ReportConfig {
        n: cfg.n,
        l: cfg.l,
        classifier: cfg.classifier,
        featurizer: cfg.featurizer,
        optimizer: cfg.optimizer,
        loss: cfg.loss,
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        image_side: cfg.image_side,
    }
}

/// Aligned plain-text rendering of a report (and optionally its timing).
pub fn format_report(report: &EvaluationReport, timing: Option<&TimingReport>) -> String {
    let mut out = String::new();
    let k = report.families.len();
    let name_width = report
        .families
        .iter()
        .map(|f| f.len())
        .chain(["family".len()])
        .max()
        .unwrap();
    out.push_str(&format!(
        "accuracy     {:.4}\nweighted F1  {:.4}\n\n",
        report.accuracy, report.weighted_f1
    ));
    out.push_str(&format!(
        "{:<name_width$}  {:>9}  {:>9}  {:>9}  {:>9}\n",
        "family", "precision", "recall", "f1", "support"
    ));
    for family in &report.families {
        let m = &report.per_class[family];
        out.push_str(&format!(
            "{family:<name_width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9}\n",
            m.precision, m.recall, m.f1, m.support
        ));
    }
    out.push_str("\nconfusion (counts, rows = actual):\n");
    let cell = report
        .confusion
        .counts
        .iter()
        .flatten()
        .map(|c| c.to_string().len())
        .max()
        .unwrap_or(1)
        .max(3);
    for i in 0..k {
        out.push_str(&format!("{:<name_width$} ", report.families[i]));
        for j in 0..k {
            out.push_str(&format!(" {:>cell$}", report.confusion.counts[i][j]));
        }
        out.push('\n');
    }
    out.push_str("\nconfusion (row-normalized):\n");
    for i in 0..k {
        out.push_str(&format!("{:<name_width$} ", report.families[i]));
        for j in 0..k {
            out.push_str(&format!(" {:>6.3}", report.confusion.normalized[i][j]));
        }
        out.push('\n');
    }
    if let Some(t) = timing {
        out.push_str("\ntiming:\n");
        for (stage, seconds) in &t.stages {
            out.push_str(&format!("  {stage:<18} {seconds:>10.3} s\n"));
        }
        out.push_str(&format!(
            "  {:<18} {:>10.3} s\n",
            "total train", t.total_train_seconds
        ));
        match t.test_seconds_per_sample {
            Some(per) => out.push_str(&format!("  {:<18} {per:>10.6} s\n", "test per sample")),
            None => out.push_str("  test per sample    (no test samples)\n"),
        }
    }
    out
}

/// Stage 4: predict the test split, compute metrics and both confusion
/// forms, and persist `report.json` (deterministic), `report.txt`, and
/// `timing.json`.
pub fn stage_evaluate(cfg: &PipelineConfig) -> Result<(EvaluationReport, TimingReport)> {
    let (families, _) = load_artifacts(cfg)?;
    let (rows, classes, _) = load_features_and_classes(cfg, "test", &families)?;
    if rows.is_empty() {
        return Err(Error::EmptyCorpus("test split is empty".into()));
    }
    let test_started = Instant::now();
    let predictions = match cfg.classifier {
        ClassifierKind::Cnn => {
            let model = load_cnn(&cfg.path("cnn_spec.json"), &cfg.path("cnn_weights.bin"))?;
            let images = rows_to_images(&rows, cfg.image_side)?;
            predict(&model, &images)?
        }
        ClassifierKind::Rf => {
            let model: RandomForestModel = read_json(&cfg.path("rf_model.json"))?;
            rf_predict(&model, &rows)?
        }
        ClassifierKind::Svm => {
            let model = read_json(&cfg.path("svm_model.json"))?;
            svm_predict(&model, &rows)?
        }
    };
    let test_seconds = test_started.elapsed().as_secs_f64();

    let cm = confusion(&classes, &predictions, families.len())?;
    let m = metrics(&cm)?;
    let report = EvaluationReport {
        accuracy: m.accuracy,
        weighted_f1: m.weighted_f1,
        per_class: families
            .iter()
            .cloned()
            .zip(m.per_class.iter().cloned())
            .collect(),
        confusion: ConfusionReport {
            counts: cm.rows(),
            normalized: normalize_rows(&cm),
        },
        families: families.clone(),
        config: report_config(cfg),
        seed: cfg.seed,
    };

    let stage_times: BTreeMap<String, f64> = {
        let path = cfg.path("stage_times.json");
        if path.exists() {
            read_json(&path)?
        } else {
            BTreeMap::new()
        }
    };
    let stage_refs: Vec<(&str, f64)> = stage_times
        .iter()
        .map(|(name, &seconds)| (name.as_str(), seconds))
        .collect();
    let timing = timing_report(&stage_refs, Some((test_seconds, rows.len())));

    write_json(&cfg.path("report.json"), &report)?;
    write_json(&cfg.path("timing.json"), &timing)?;
    fs::write(cfg.path("report.txt"), format_report(&report, None))?;
    Ok((report, timing))
}

/// All four stages in sequence.
pub fn run_full(cfg: &PipelineConfig) -> Result<(EvaluationReport, TimingReport)> {
    stage_train_hmms(cfg)?;
    stage_features(cfg)?;
    stage_train_classifier(cfg)?;
    stage_evaluate(cfg)
}

/// Grid search over pipeline hyperparameters with the CNN classifier.
/// Trained family HMMs are cached per hidden-state count N (the run seed is
/// fixed), so cells sharing N never retrain them.
pub fn stage_grid(cfg: &PipelineConfig) -> Result<GridResult> {
    let mut grid = cfg.grid.as_ref().ok_or(Error::EmptyGrid)?.clone();
    // Lists omitted from the config sweep nothing: they hold the single
    // configured value.
    if grid.n.is_empty() {
        grid.n = vec![cfg.n];
    }
    if grid.l.is_empty() {
        grid.l = vec![cfg.l];
    }
    if grid.conv_bases.is_empty() {
        grid.conv_bases = vec![cfg.conv_blocks.clone()];
    }
    if grid.optimizer.is_empty() {
        grid.optimizer = vec![cfg.optimizer];
    }
    if grid.learning_rate.is_empty() {
        grid.learning_rate = vec![cfg.learning_rate];
    }
    if grid.loss.is_empty() {
        grid.loss = vec![cfg.loss];
    }
    fs::create_dir_all(&cfg.work_dir)?;
    let corpus = load_corpus(&cfg.manifest, &cfg.data_root)?;
    let split = filter_and_split(&corpus, cfg.min_family_size, cfg.train_fraction, cfg.seed)?;
    let vocab = build_vocabulary(&split.train)?;
    let train_all = encode_corpus(split.train, &vocab)?;
    let test_all = encode_corpus(split.test, &vocab)?;

    let mut hmm_cache: BTreeMap<usize, BTreeMap<String, HmmModel>> = BTreeMap::new();

    let result = grid_search(&grid, |cell: &GridCell| -> Result<GridCellOutcome> {
        let train_started = Instant::now();
        let (train, _) = drop_short(&train_all, cell.l)?;
        if train.is_empty() {
            return Err(Error::EmptyCorpus(format!(
                "every training sample is shorter than l = {}",
                cell.l
            )));
        }
        let models = match cfg.featurizer {
            FeaturizerKind::Hmm => {
                if let std::collections::btree_map::Entry::Vacant(slot) =
                    hmm_cache.entry(cell.n)
                {
                    slot.insert(train_family_models(&train, cell.n, cfg.seed)?);
                }
                Some(&hmm_cache[&cell.n])
            }
            FeaturizerKind::Raw => None,
        };

        let mut skip = SkipReport::default();
        let train_vectors =
            extract_split_features(&train, cfg.featurizer, models, cell.l, &mut skip)?;
        let test_vectors =
            extract_split_features(&test_all, cfg.featurizer, models, cell.l, &mut skip)?;
        if train_vectors.is_empty() || test_vectors.is_empty() {
            return Err(Error::EmptyCorpus(
                "a split lost every sample at feature extraction".into(),
            ));
        }
        let scaler: Scaler = fit_scaler(&train_vectors)?;
        let scaled = |vs: &[FeatureVector]| -> Result<Vec<FeatureVector>> {
            vs.iter().map(|v| apply_scaler(&scaler, v)).collect()
        };
        let scaled_train = scaled(&train_vectors)?;
        let scaled_test = scaled(&test_vectors)?;

        let train_images: Vec<ImageMatrix> = scaled_train
            .iter()
            .map(|v| embed_image(v, cfg.image_side))
            .collect::<Result<_>>()?;
        let train_classes: Vec<usize> = scaled_train
            .iter()
            .map(|v| train.class_index(&v.label).unwrap())
            .collect();
        let spec = CnnSpec {
            input_side: cfg.image_side,
            conv_blocks: cell.conv_base.clone(),
            num_classes: train.families.len(),
        };
        let mut model = init_cnn(&spec, cfg.seed)?;
        let opt = OptimizerConfig::new(cell.optimizer, cell.learning_rate)?;
        fit(
            &mut model,
            &train_images,
            &train_classes,
            &opt,
            cell.loss,
            cfg.epochs,
            cfg.batch_size,
            seeding::mix64(cfg.seed ^ 0x6669_7421),
        )?;
        let train_seconds = train_started.elapsed().as_secs_f64();

        let test_started = Instant::now();
        let test_images: Vec<ImageMatrix> = scaled_test
            .iter()
            .map(|v| embed_image(v, cfg.image_side))
            .collect::<Result<_>>()?;
        let predictions = predict(&model, &test_images)?;
        let test_seconds = test_started.elapsed().as_secs_f64();
        let truth: Vec<usize> = scaled_test
            .iter()
            .map(|v| {
                train.class_index(&v.label).ok_or_else(|| {
                    Error::LabelOutOfRange(format!("family {} absent from training", v.label))
                })
            })
            .collect::<Result<_>>()?;
        let cm = confusion(&truth, &predictions, train.families.len())?;
        let m = metrics(&cm)?;
        Ok(GridCellOutcome {
            accuracy: m.accuracy,
            weighted_f1: m.weighted_f1,
            train_seconds,
            test_seconds_per_sample: Some(test_seconds / scaled_test.len() as f64),
        })
    })?;

    write_json(&cfg.path("grid_result.json"), &result)?;
    fs::write(cfg.path("grid_result.txt"), format_grid(&result))?;
    Ok(result)
}

/// Ranked text table of grid outcomes.
pub fn format_grid(result: &GridResult) -> String {
    let mut order: Vec<usize> = (0..result.rows.len()).collect();
    order.sort_by(|&a, &b| {
        result.rows[b]
            .outcome
            .accuracy
            .total_cmp(&result.rows[a].outcome.accuracy)
    });
    let mut out = format!(
        "{:>4}  {:>3} {:>5} {:>12} {:>8} {:>28} {:>9} {:>9}\n",
        "rank", "n", "l", "optimizer", "lr", "loss", "accuracy", "w-f1"
    );
    for (rank, &i) in order.iter().enumerate() {
        let row = &result.rows[i];
        out.push_str(&format!(
            "{:>4}  {:>3} {:>5} {:>12} {:>8} {:>28} {:>9.4} {:>9.4}{}\n",
            rank + 1,
            row.config.n,
            row.config.l,
            row.config.optimizer.name(),
            row.config.learning_rate,
            row.config.loss.name(),
            row.outcome.accuracy,
            row.outcome.weighted_f1,
            if i == result.best { "  <- best" } else { "" }
        ));
    }
    out
}
