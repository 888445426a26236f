//! Adapter for an externally hosted foundation segmenter.
//!
//! The heavyweight model (GPU inference, published checkpoint format)
//! runs in a separate runner process; this adapter speaks a line-oriented
//! JSON protocol over the runner's stdin/stdout and translates between
//! the crate's conventions (boolean masks, `[x_min, y_min, x_max, y_max]`
//! boxes, CHW f64 tensors) and the wire format. Upstream weights are an
//! input artifact given by path; they are never bundled here.
//!
//! Protocol: one JSON object per line, answered by one JSON object per
//! line with an `"ok"` field. Operations:
//!
//! | op              | request payload                                     | response payload |
//! |-----------------|-----------------------------------------------------|------------------|
//! | `init`          | `checkpoint`, `variant`                             | `input_resolution`, `normalization {mean, std}`, `parameter_groups [{group, count}]` |
//! | `predict`       | `image` (CHW floats), `width`, `height`, `prompt`   | `probabilities` (row-major floats) |
//! | `set_freeze`    | `image_encoder`, `prompt_encoder`, `mask_decoder`   | —                |
//! | `begin_training`| `learning_rate`, `weight_decay`, `w_ce`, `w_iou`    | —                |
//! | `train_step`    | as `predict` plus `mask` (0/1 ints)                 | `loss`           |
//! | `export_state`  | —                                                   | `state` (opaque string) |
//! | `import_state`  | `state`                                             | —                |
//! | `shutdown`      | —                                                   | —                |

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{ImageTensor, Normalization};
use crate::error::{SegmenterError, TrainError};
use crate::finetune::FreezePolicy;
use crate::geometry::{BinaryMask, BoundingBox, ProbabilityMap};

use super::{GroupId, ParameterGroup, TrainSettings};

/// Bidirectional line transport to the runner. Implemented by the child
/// process pipe pair in production and by an in-memory responder in
/// tests.
pub trait Transport: Send {
    fn roundtrip(&mut self, request: &str) -> std::io::Result<String>;
}

/// Child process speaking the protocol on stdin/stdout.
pub struct ProcessTransport {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl ProcessTransport {
    pub fn spawn(command: &[String]) -> std::io::Result<Self> {
        let (program, args) = command.split_first().ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty runner command")
        })?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            child,
            stdin,
            stdout,
        })
    }
}

impl Transport for ProcessTransport {
    fn roundtrip(&mut self, request: &str) -> std::io::Result<String> {
        self.stdin.write_all(request.as_bytes())?;
        self.stdin.write_all(b"\n")?;
        self.stdin.flush()?;
        let mut line = String::new();
        self.stdout.read_line(&mut line)?;
        if line.is_empty() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "runner closed its stdout",
            ));
        }
        Ok(line)
    }
}

impl Drop for ProcessTransport {
    fn drop(&mut self) {
        let _ = self.stdin.write_all(b"{\"op\":\"shutdown\"}\n");
        let _ = self.stdin.flush();
        let _ = self.child.wait();
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WireGroup {
    group: String,
    count: usize,
}

#[derive(Debug, Clone, Deserialize)]
struct InitInfo {
    input_resolution: u32,
    normalization: Normalization,
    parameter_groups: Vec<WireGroup>,
}

/// Handle to the external segmenter.
pub struct FoundationModel {
    transport: Mutex<Box<dyn Transport>>,
    variant: String,
    checkpoint: PathBuf,
    input_resolution: u32,
    normalization: Normalization,
    groups: Vec<ParameterGroup>,
}

fn parse_group(name: &str) -> Result<GroupId, SegmenterError> {
    match name {
        "image_encoder" => Ok(GroupId::ImageEncoder),
        "prompt_encoder" => Ok(GroupId::PromptEncoder),
        "mask_decoder" => Ok(GroupId::MaskDecoder),
        other => Err(SegmenterError::Protocol(format!(
            "runner reported unknown parameter group `{other}`"
        ))),
    }
}

impl FoundationModel {
    /// Launch a runner process and perform the init handshake.
    pub fn launch(
        command: &[String],
        checkpoint: PathBuf,
        variant: &str,
    ) -> Result<Self, SegmenterError> {
        let transport = ProcessTransport::spawn(command)?;
        Self::with_transport(Box::new(transport), checkpoint, variant)
    }

    /// Handshake over an arbitrary transport (tests inject an in-memory
    /// one here).
    pub fn with_transport(
        transport: Box<dyn Transport>,
        checkpoint: PathBuf,
        variant: &str,
    ) -> Result<Self, SegmenterError> {
        let mut model = Self {
            transport: Mutex::new(transport),
            variant: variant.to_string(),
            checkpoint: checkpoint.clone(),
            input_resolution: 0,
            normalization: Normalization::identity(),
            groups: Vec::new(),
        };
        let response = model.call(json!({
            "op": "init",
            "checkpoint": checkpoint,
            "variant": variant,
        }))?;
        let info: InitInfo = serde_json::from_value(response)
            .map_err(|e| SegmenterError::Protocol(format!("bad init response: {e}")))?;
        model.input_resolution = info.input_resolution;
        model.normalization = info.normalization;
        model.groups = info
            .parameter_groups
            .iter()
            .map(|g| {
                Ok(ParameterGroup {
                    group_id: parse_group(&g.group)?,
                    parameter_count: g.count,
                    trainable: true,
                })
            })
            .collect::<Result<_, SegmenterError>>()?;
        if model.groups.len() != 3 {
            return Err(SegmenterError::Protocol(format!(
                "runner reported {} parameter groups, expected 3",
                model.groups.len()
            )));
        }
        Ok(model)
    }

    fn call(&self, request: Value) -> Result<Value, SegmenterError> {
        let line = serde_json::to_string(&request).expect("request serialization");
        let response = {
            let mut transport = self.transport.lock().expect("transport mutex");
            transport.roundtrip(&line)?
        };
        let value: Value = serde_json::from_str(response.trim())
            .map_err(|e| SegmenterError::Protocol(format!("unparseable response: {e}")))?;
        if value.get("ok").and_then(Value::as_bool) != Some(true) {
            let message = value
                .get("error")
                .and_then(Value::as_str)
                .unwrap_or("runner reported failure without a message");
            return Err(SegmenterError::Protocol(message.to_string()));
        }
        Ok(value)
    }

    pub fn variant(&self) -> &str {
        &self.variant
    }

    pub fn checkpoint(&self) -> &PathBuf {
        &self.checkpoint
    }

    pub fn resolution(&self) -> u32 {
        self.input_resolution
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn parameter_groups(&self) -> Vec<ParameterGroup> {
        self.groups.clone()
    }

    pub fn predict(
        &self,
        image: &ImageTensor,
        prompt: &BoundingBox,
    ) -> Result<ProbabilityMap, SegmenterError> {
        if prompt.x_max() > self.input_resolution || prompt.y_max() > self.input_resolution {
            return Err(SegmenterError::PromptOutOfBounds {
                resolution: self.input_resolution,
            });
        }
        let response = self.call(json!({
            "op": "predict",
            "width": image.width(),
            "height": image.height(),
            "image": image.data(),
            "prompt": prompt,
        }))?;
        let probs: Vec<f64> = serde_json::from_value(
            response
                .get("probabilities")
                .cloned()
                .ok_or_else(|| SegmenterError::Protocol("missing probabilities".into()))?,
        )
        .map_err(|e| SegmenterError::Protocol(format!("bad probabilities: {e}")))?;
        let expected = (self.input_resolution as usize).pow(2);
        if probs.len() != expected {
            return Err(SegmenterError::Protocol(format!(
                "runner returned {} probabilities, expected {expected}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
            return Err(SegmenterError::Protocol(
                "runner returned probabilities outside [0, 1]".into(),
            ));
        }
        Ok(ProbabilityMap::new(
            self.input_resolution,
            self.input_resolution,
            probs,
        ))
    }

    pub fn apply_freeze(&mut self, policy: FreezePolicy) -> Result<(), SegmenterError> {
        self.call(json!({
            "op": "set_freeze",
            "image_encoder": policy.image_encoder_trainable,
            "prompt_encoder": policy.prompt_encoder_trainable,
            "mask_decoder": policy.mask_decoder_trainable,
        }))?;
        for group in &mut self.groups {
            group.trainable = policy.trainable(group.group_id);
        }
        Ok(())
    }

    pub fn begin_training(&mut self, settings: &TrainSettings) -> Result<(), SegmenterError> {
        self.apply_freeze(settings.freeze)?;
        self.call(json!({
            "op": "begin_training",
            "learning_rate": settings.learning_rate,
            "weight_decay": settings.weight_decay,
            "w_ce": settings.loss_weights.w_ce,
            "w_iou": settings.loss_weights.w_iou,
        }))?;
        Ok(())
    }

    pub fn train_step(
        &mut self,
        image: &ImageTensor,
        prompt: &BoundingBox,
        gt: &BinaryMask,
    ) -> Result<f64, TrainError> {
        let response = self
            .call(json!({
                "op": "train_step",
                "width": image.width(),
                "height": image.height(),
                "image": image.data(),
                "prompt": prompt,
                "mask": gt.data().iter().map(|&b| b as u8).collect::<Vec<_>>(),
            }))
            .map_err(TrainError::Segmenter)?;
        response
            .get("loss")
            .and_then(Value::as_f64)
            .ok_or_else(|| TrainError::Segmenter(SegmenterError::Protocol("missing loss".into())))
    }

    pub fn export_state(&self) -> Result<String, SegmenterError> {
        let response = self.call(json!({"op": "export_state"}))?;
        response
            .get("state")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| SegmenterError::Protocol("missing state".into()))
    }

    pub fn import_state(&mut self, state: &str) -> Result<(), SegmenterError> {
        self.call(json!({"op": "import_state", "state": state}))?;
        Ok(())
    }
}

impl std::fmt::Debug for FoundationModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FoundationModel")
            .field("variant", &self.variant)
            .field("checkpoint", &self.checkpoint)
            .field("input_resolution", &self.input_resolution)
            .finish_non_exhaustive()
    }
}
