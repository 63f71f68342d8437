//! Shared domain types: triplets, verdicts, metric vectors, preference
//! pairs. All values are immutable once constructed and safe to share
//! across workers.

use serde::{Deserialize, Serialize};

use crate::taxonomy::{Metric, SubTask};

/// Reference to an image on disk or behind a URL, with a stable content
/// digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub uri: String,
    pub width: u32,
    pub height: u32,
    /// Hex-encoded SHA-256 of the image bytes.
    pub content_hash: String,
}

/// Lifecycle of a triplet through the curation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletStatus {
    Pending,
    Edited,
    Verified,
    RejectedNoEdit,
    RejectedMisaligned,
    RejectedOther,
}

impl TripletStatus {
    pub fn is_rejected(&self) -> bool {
        matches!(
            self,
            TripletStatus::RejectedNoEdit
                | TripletStatus::RejectedMisaligned
                | TripletStatus::RejectedOther
        )
    }
}

/// The pipeline's unit of work: ⟨original image, instruction, edited image⟩
/// plus lifecycle status and a stage audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub id: String,
    pub original: ImageRef,
    pub edited: Option<ImageRef>,
    pub instruction: String,
    pub refined_instruction: Option<String>,
    pub subtask: SubTask,
    pub status: TripletStatus,
    pub provenance: Vec<String>,
}

impl Triplet {
    pub fn new(id: String, original: ImageRef, instruction: String, subtask: SubTask) -> Triplet {
        Triplet {
            id,
            original,
            edited: None,
            instruction,
            refined_instruction: None,
            subtask,
            status: TripletStatus::Pending,
            provenance: vec!["instruction_gen".to_string()],
        }
    }

    /// Structural invariants: edited present iff past Pending, refined
    /// instruction present iff Verified.
    pub fn check_invariants(&self) -> Result<(), String> {
        let has_edited = self.edited.is_some();
        match self.status {
            TripletStatus::Pending => {
                if has_edited {
                    return Err(format!("{}: pending triplet has edited image", self.id));
                }
            }
            _ => {
                if !has_edited && self.status != TripletStatus::RejectedOther {
                    return Err(format!("{}: non-pending triplet missing edited image", self.id));
                }
            }
        }
        if (self.status == TripletStatus::Verified) != self.refined_instruction.is_some() {
            return Err(format!(
                "{}: refined_instruction must be present iff Verified",
                self.id
            ));
        }
        Ok(())
    }
}

/// Structured output of the expert verifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub is_changed: bool,
    pub refined_instruction: String,
    pub raw_reply: String,
}

/// Labels for verifier training-sample categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleCategory {
    Normal,
    NoEdit,
    Hallucination,
}

/// Per-dimension judge scores; each present value lies in [0, 10].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub if_score: Option<f64>,
    pub nc_score: Option<f64>,
    pub vq_score: Option<f64>,
    pub ra_score: Option<f64>,
}

impl MetricVector {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::If => self.if_score,
            Metric::Nc => self.nc_score,
            Metric::Vq => self.vq_score,
            Metric::Ra => self.ra_score,
        }
    }

    pub fn set(&mut self, m: Metric, v: f64) {
        match m {
            Metric::If => self.if_score = Some(v),
            Metric::Nc => self.nc_score = Some(v),
            Metric::Vq => self.vq_score = Some(v),
            Metric::Ra => self.ra_score = Some(v),
        }
    }
}

/// Logged policy/reference log-probabilities for a preference pair under a
/// visual differential context. The context itself is opaque here; only
/// its identifier is carried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub context_id: String,
    pub beta: f64,
    pub logp_theta_w: f64,
    pub logp_ref_w: f64,
    pub logp_theta_l: f64,
    pub logp_ref_l: f64,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.beta > 0.0) {
            return Err(format!("{}: beta must be positive", self.context_id));
        }
        for (name, v) in [
            ("logp_theta_w", self.logp_theta_w),
            ("logp_ref_w", self.logp_ref_w),
            ("logp_theta_l", self.logp_theta_l),
            ("logp_ref_l", self.logp_ref_l),
        ] {
            if !v.is_finite() || v > 0.0 {
                return Err(format!("{}: {name} must be finite and <= 0", self.context_id));
            }
        }
        Ok(())
    }
}

/// An (object, action) pair extracted from an instruction, used for
/// alignment scoring. Tokens are normalized: lowercase, trimmed,
/// whitespace-collapsed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AtomicTask {
    pub object: String,
    pub action: String,
}

fn normalize_token(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl AtomicTask {
    /// Build with token normalization; errors when either token is empty
    /// after normalization.
    pub fn new(object: &str, action: &str) -> Result<AtomicTask, String> {
        let object = normalize_token(object);
        let action = normalize_token(action);
        if object.is_empty() || action.is_empty() {
            return Err("atomic task tokens must be non-empty".to_string());
        }
        Ok(AtomicTask { object, action })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::classify_subtask;

    fn image(uri: &str) -> ImageRef {
        ImageRef {
            uri: uri.to_string(),
            width: 64,
            height: 64,
            content_hash: "0".repeat(64),
        }
    }

    #[test]
    fn triplet_invariants() {
        let st = classify_subtask("subject_addition").unwrap();
        let mut t = Triplet::new("t1".into(), image("a.png"), "add a cat".into(), st);
        assert!(t.check_invariants().is_ok());

        t.edited = Some(image("b.png"));
        assert!(t.check_invariants().is_err()); // pending with edited image

        t.status = TripletStatus::Edited;
        assert!(t.check_invariants().is_ok());

        t.status = TripletStatus::Verified;
        assert!(t.check_invariants().is_err()); // verified without refinement
        t.refined_instruction = Some("add a black cat".into());
        assert!(t.check_invariants().is_ok());
    }

    #[test]
    fn atomic_task_normalization() {
        let a = AtomicTask::new("  The   Cat ", "REMOVE").unwrap();
        assert_eq!(a.object, "the cat");
        assert_eq!(a.action, "remove");
        assert!(AtomicTask::new("  ", "remove").is_err());
    }

    #[test]
    fn preference_pair_validation() {
        let mut p = PreferencePair {
            context_id: "c".into(),
            beta: 1.0,
            logp_theta_w: -1.0,
            logp_ref_w: -1.0,
            logp_theta_l: -2.0,
            logp_ref_l: -1.0,
        };
        assert!(p.validate().is_ok());
        p.beta = 0.0;
        assert!(p.validate().is_err());
        p.beta = 1.0;
        p.logp_theta_w = 0.5;
        assert!(p.validate().is_err());
    }
}
