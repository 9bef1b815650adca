//! Target models to explain: a trainable classifier on the shared network
//! engine, closed-form models for oracle tests, and a subprocess bridge
//! that lets any external program act as the black box.

use crate::blackbox::{BlackBoxModel, EvaluationCounter};
use crate::data::{FeatureMatrix, PredictionMatrix, TargetMatrix};
use crate::error::{Error, Result};
use crate::explainer::validation_split;
use crate::nn::{self, MlpNetwork, OutputHead, TrainConfig, TrainHistory, TrainLoss};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc;
use std::sync::Mutex;
use std::time::Duration;

/// Closed-form model families with known attribution behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AnalyticKind {
    /// Always outputs `value`, ignoring the input.
    Constant { value: f64 },
    /// Outputs feature `index` unchanged.
    SelectFeature { index: usize },
    /// `sigmoid(w . x + b)`.
    SigmoidLinear { weights: Vec<f64>, bias: f64 },
}

/// A [`BlackBoxModel`] with a closed-form prediction rule.
#[derive(Debug)]
pub struct AnalyticModel {
    kind: AnalyticKind,
    counter: EvaluationCounter,
}

/// Validates parameters and wraps the rule as a model.
pub fn analytic_model(kind: AnalyticKind) -> Result<AnalyticModel> {
    match &kind {
        AnalyticKind::Constant { value } => {
            if !value.is_finite() {
                return Err(Error::Config(format!("constant value {value} not finite")));
            }
        }
        AnalyticKind::SelectFeature { .. } => {}
        AnalyticKind::SigmoidLinear { weights, bias } => {
            if weights.is_empty() {
                return Err(Error::Config("sigmoid_linear needs weights".into()));
            }
            if weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
                return Err(Error::Config(
                    "sigmoid_linear parameters must be finite".into(),
                ));
            }
        }
    }
    Ok(AnalyticModel {
        kind,
        counter: EvaluationCounter::new(),
    })
}

impl AnalyticModel {
    pub fn kind(&self) -> &AnalyticKind {
        &self.kind
    }
}

impl BlackBoxModel for AnalyticModel {
    fn name(&self) -> &str {
        match self.kind {
            AnalyticKind::Constant { .. } => "constant",
            AnalyticKind::SelectFeature { .. } => "select_feature",
            AnalyticKind::SigmoidLinear { .. } => "sigmoid_linear",
        }
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn predict(&self, x: &FeatureMatrix) -> Result<PredictionMatrix> {
        let n = x.rows();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let v = match &self.kind {
                AnalyticKind::Constant { value } => *value,
                AnalyticKind::SelectFeature { index } => {
                    *row.get(*index).ok_or_else(|| Error::DimensionMismatch {
                        expected: index + 1,
                        actual: row.len(),
                        context: "select_feature input width".into(),
                    })?
                }
                AnalyticKind::SigmoidLinear { weights, bias } => {
                    if weights.len() != row.len() {
                        return Err(Error::DimensionMismatch {
                            expected: weights.len(),
                            actual: row.len(),
                            context: "sigmoid_linear input width".into(),
                        });
                    }
                    let t: f64 = row.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() + bias;
                    1.0 / (1.0 + (-t).exp())
                }
            };
            out.push(v);
        }
        self.counter.add(n as u64);
        PredictionMatrix::new(out, n, 1)
    }

    fn evaluations(&self) -> u64 {
        self.counter.get()
    }

    fn fingerprint(&self) -> String {
        match &self.kind {
            AnalyticKind::Constant { value } => format!("constant({value})"),
            AnalyticKind::SelectFeature { index } => format!("select_feature({index})"),
            AnalyticKind::SigmoidLinear { weights, bias } => {
                format!("sigmoid_linear(d={}, b={bias})", weights.len())
            }
        }
    }
}

/// Settings for [`train_builtin_classifier`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub train: TrainConfig,
    /// Fraction of rows held out for the accuracy report.
    pub holdout_fraction: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            holdout_fraction: 0.2,
        }
    }
}

pub const CLASSIFIER_SCHEMA_VERSION: u32 = 1;

/// A classifier trained on the shared network engine, exposed as a black
/// box. Single-output targets get a sigmoid head and binary crossentropy;
/// multi-output targets get a softmax head and categorical crossentropy.
#[derive(Debug, Serialize, Deserialize)]
pub struct BuiltinClassifier {
    network: MlpNetwork,
    holdout_accuracy: f64,
    history: TrainHistory,
    seed: u64,
    #[serde(skip, default)]
    counter: EvaluationCounter,
}

impl BuiltinClassifier {
    pub fn holdout_accuracy(&self) -> f64 {
        self.holdout_accuracy
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn network(&self) -> &MlpNetwork {
        &self.network
    }
}

/// Index of the class a prediction row asserts; single outputs threshold
/// at 0.5, wider rows take the argmax with ties to the lower index.
fn row_class(row: &[f64]) -> usize {
    if row.len() == 1 {
        return usize::from(row[0] >= 0.5);
    }
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows where predicted and labeled class agree.
pub fn classification_accuracy(predictions: &PredictionMatrix, y: &TargetMatrix) -> Result<f64> {
    if predictions.rows() != y.rows() || predictions.cols() != y.cols() {
        return Err(Error::DimensionMismatch {
            expected: y.rows() * y.cols(),
            actual: predictions.rows() * predictions.cols(),
            context: "accuracy prediction vs label shape".into(),
        });
    }
    if predictions.rows() == 0 {
        return Err(Error::contract("accuracy of an empty set is undefined"));
    }
    let hits = (0..predictions.rows())
        .filter(|&i| row_class(predictions.row(i)) == row_class(y.row(i)))
        .count();
    Ok(hits as f64 / predictions.rows() as f64)
}

/// Trains a classifier on `(x, y)` with a seeded holdout split and reports
/// held-out accuracy. `y` is one-hot for 2 or more columns, a 0/1 column
/// for single-output targets.
pub fn train_builtin_classifier(
    x: &FeatureMatrix,
    y: &TargetMatrix,
    cfg: &ClassifierConfig,
) -> Result<BuiltinClassifier> {
    if x.rows() != y.rows() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            actual: y.rows(),
            context: "classifier features vs labels".into(),
        });
    }
    let (head, loss) = if y.cols() == 1 {
        (OutputHead::Sigmoid, TrainLoss::BinaryCrossentropy)
    } else {
        (OutputHead::Softmax, TrainLoss::CategoricalCrossentropy)
    };
    let (train_idx, holdout_idx) =
        validation_split(x.rows(), cfg.holdout_fraction, cfg.train.seed)?;
    let x_train = x.gather_rows(&train_idx)?;
    let y_train = y.gather_rows(&train_idx)?;
    let holdout = if holdout_idx.is_empty() {
        None
    } else {
        Some((x.gather_rows(&holdout_idx)?, y.gather_rows(&holdout_idx)?))
    };

    let mut network = MlpNetwork::new(x.cols(), &cfg.train.hidden, y.cols(), head, cfg.train.seed)?;
    let history = nn::train(
        &mut network,
        loss,
        &x_train,
        &y_train,
        holdout.as_ref().map(|(hx, hy)| (hx, hy)),
        &cfg.train,
    )?;

    // Accuracy on the holdout when there is one, else on the training set.
    let (ax, ay) = match &holdout {
        Some((hx, hy)) => (hx, hy),
        None => (&x_train, &y_train),
    };
    let holdout_accuracy = classification_accuracy(&network.forward(ax)?, ay)?;

    Ok(BuiltinClassifier {
        network,
        holdout_accuracy,
        history,
        seed: cfg.train.seed,
        counter: EvaluationCounter::new(),
    })
}

impl BlackBoxModel for BuiltinClassifier {
    fn name(&self) -> &str {
        "builtin_classifier"
    }

    fn output_dim(&self) -> usize {
        self.network.output_dim()
    }

    fn predict(&self, x: &FeatureMatrix) -> Result<PredictionMatrix> {
        let out = self.network.forward(x)?;
        self.counter.add(x.rows() as u64);
        Ok(out)
    }

    fn evaluations(&self) -> u64 {
        self.counter.get()
    }

    fn fingerprint(&self) -> String {
        format!(
            "builtin_classifier(in={}, out={}, params={}, seed={})",
            self.network.input_dim(),
            self.network.output_dim(),
            self.network.num_params(),
            self.seed
        )
    }
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    schema_version: u32,
    classifier: BuiltinClassifier,
}

pub fn save_classifier(model: &BuiltinClassifier, path: &Path) -> Result<()> {
    let file = ClassifierFile {
        schema_version: CLASSIFIER_SCHEMA_VERSION,
        classifier: BuiltinClassifier {
            network: model.network.clone(),
            holdout_accuracy: model.holdout_accuracy,
            history: model.history.clone(),
            seed: model.seed,
            counter: EvaluationCounter::new(),
        },
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::format(path, format!("serialize classifier: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_classifier(path: &Path) -> Result<BuiltinClassifier> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ClassifierFile = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("parse classifier: {e}")))?;
    if file.schema_version != CLASSIFIER_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: file.schema_version,
            supported: CLASSIFIER_SCHEMA_VERSION,
        });
    }
    Ok(file.classifier)
}

/// Default per-request timeout for the external bridge.
pub const DEFAULT_BRIDGE_TIMEOUT_SECS: f64 = 30.0;

#[derive(Serialize)]
struct HelloRequest {
    op: &'static str,
}

#[derive(Serialize)]
struct PredictRequest<'a> {
    id: u64,
    op: &'static str,
    x: &'a [Vec<f64>],
}

#[derive(Deserialize)]
struct HelloResponse {
    k: usize,
    name: String,
}

#[derive(Deserialize)]
struct PredictResponse {
    id: u64,
    y: Vec<Vec<f64>>,
}

struct BridgeState {
    child: Child,
    stdin: ChildStdin,
    lines: mpsc::Receiver<std::io::Result<String>>,
    next_id: u64,
    dead: bool,
}

impl BridgeState {
    fn kill(&mut self) {
        self.dead = true;
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Runs an external program as a black-box model over newline-delimited
/// messages on its standard input and output. One request is in flight at
/// a time; the model declares itself serial so callers do not fan out.
pub struct ExternalModelBridge {
    state: Mutex<BridgeState>,
    name: String,
    output_dim: usize,
    timeout: Duration,
    counter: EvaluationCounter,
    command: Vec<String>,
}

fn payload_excerpt(line: &str) -> String {
    const LIMIT: usize = 200;
    if line.len() <= LIMIT {
        line.to_string()
    } else {
        let mut end = LIMIT;
        while !line.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}...", &line[..end])
    }
}

impl ExternalModelBridge {
    /// Spawns `command` and performs the handshake that reports the output
    /// width and model name.
    pub fn launch(command: &[String], timeout_secs: f64) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Config("bridge command must be non-empty".into()));
        }
        if !(timeout_secs > 0.0 && timeout_secs.is_finite()) {
            return Err(Error::Config(format!(
                "bridge timeout must be positive, got {timeout_secs}"
            )));
        }
        let mut child = Command::new(&command[0])
            .args(&command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::BridgeProcess(format!("spawn '{}': {e}", command[0])))?;
        let stdin = child
            .stdin
            .take()
            .ok_or_else(|| Error::BridgeProcess("child stdin unavailable".into()))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::BridgeProcess("child stdout unavailable".into()))?;
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut state = BridgeState {
            child,
            stdin,
            lines: rx,
            next_id: 0,
            dead: false,
        };
        let timeout = Duration::from_secs_f64(timeout_secs);

        let hello = serde_json::to_string(&HelloRequest { op: "hello" })
            .expect("static request serializes");
        let line = match Self::roundtrip(&mut state, &hello, timeout) {
            Ok(line) => line,
            Err(e) => {
                state.kill();
                return Err(e);
            }
        };
        let hello: HelloResponse = match serde_json::from_str(&line) {
            Ok(h) => h,
            Err(e) => {
                state.kill();
                return Err(Error::BridgeProtocol {
                    message: format!("handshake reply did not parse: {e}"),
                    payload: payload_excerpt(&line),
                });
            }
        };
        if hello.k == 0 {
            state.kill();
            return Err(Error::BridgeProtocol {
                message: "handshake reported 0 outputs".into(),
                payload: payload_excerpt(&line),
            });
        }
        Ok(Self {
            state: Mutex::new(state),
            name: hello.name,
            output_dim: hello.k,
            timeout,
            counter: EvaluationCounter::new(),
            command: command.to_vec(),
        })
    }

    /// Writes one request line and reads one reply line, killing the child
    /// on timeout or a closed pipe.
    fn roundtrip(state: &mut BridgeState, request: &str, timeout: Duration) -> Result<String> {
        if state.dead {
            return Err(Error::BridgeProcess(
                "bridge process is no longer running".into(),
            ));
        }
        let write = state
            .stdin
            .write_all(request.as_bytes())
            .and_then(|_| state.stdin.write_all(b"\n"))
            .and_then(|_| state.stdin.flush());
        if let Err(e) = write {
            state.kill();
            return Err(Error::BridgeProcess(format!("request write failed: {e}")));
        }
        match state.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => {
                state.kill();
                Err(Error::BridgeProcess(format!("reply read failed: {e}")))
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                state.kill();
                Err(Error::BridgeTimeout {
                    seconds: timeout.as_secs_f64(),
                })
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                state.kill();
                Err(Error::BridgeProcess(
                    "bridge process closed its output".into(),
                ))
            }
        }
    }

    pub fn command(&self) -> &[String] {
        &self.command
    }
}

impl BlackBoxModel for ExternalModelBridge {
    fn name(&self) -> &str {
        &self.name
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn predict(&self, x: &FeatureMatrix) -> Result<PredictionMatrix> {
        let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row(i).to_vec()).collect();
        let mut state = self.state.lock().map_err(|_| {
            Error::BridgeProcess("bridge state poisoned by an earlier panic".into())
        })?;
        let id = state.next_id;
        state.next_id += 1;
        let request = serde_json::to_string(&PredictRequest {
            id,
            op: "predict",
            x: &rows,
        })
        .map_err(|e| Error::BridgeProcess(format!("request serialization failed: {e}")))?;
        let line = Self::roundtrip(&mut state, &request, self.timeout)?;
        let reply: PredictResponse = serde_json::from_str(&line).map_err(|e| {
            state.kill();
            Error::BridgeProtocol {
                message: format!("predict reply did not parse: {e}"),
                payload: payload_excerpt(&line),
            }
        })?;
        if reply.id != id {
            state.kill();
            return Err(Error::BridgeProtocol {
                message: format!("reply id {} does not match request id {id}", reply.id),
                payload: payload_excerpt(&line),
            });
        }
        drop(state);
        if reply.y.len() != x.rows() {
            return Err(Error::DimensionMismatch {
                expected: x.rows(),
                actual: reply.y.len(),
                context: "bridge reply row count".into(),
            });
        }
        let mut flat = Vec::with_capacity(x.rows() * self.output_dim);
        for (i, row) in reply.y.iter().enumerate() {
            if row.len() != self.output_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.output_dim,
                    actual: row.len(),
                    context: format!("bridge reply width at row {i}"),
                });
            }
            flat.extend_from_slice(row);
        }
        let out = PredictionMatrix::new(flat, x.rows(), self.output_dim)?;
        self.counter.add(x.rows() as u64);
        Ok(out)
    }

    fn evaluations(&self) -> u64 {
        self.counter.get()
    }

    fn is_serial(&self) -> bool {
        true
    }

    fn fingerprint(&self) -> String {
        format!("bridge({}, k={})", self.name, self.output_dim)
    }
}

impl Drop for ExternalModelBridge {
    fn drop(&mut self) {
        if let Ok(mut state) = self.state.lock() {
            state.kill();
        }
    }
}
