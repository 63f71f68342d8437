#![allow(dead_code)]

use std::sync::Arc;

use editforge::curation::{PipelineEndpoints, SourceImage};
use editforge::gateway::mock::{mock_endpoint_config, MockTransport};
use editforge::gateway::Endpoint;
use editforge::imaging::GrayImage;
use editforge::store::ArtifactStore;

/// `n` synthetic 16x16 images with distinct constant luminance.
pub fn synth_sources(store: &ArtifactStore, n: usize) -> Vec<SourceImage> {
    (0..n)
        .map(|i| {
            let img = GrayImage::constant(16, 16, 0.05 + 0.9 * (i as f64) / (n.max(2) - 1) as f64);
            SourceImage {
                id: format!("img-{i:03}"),
                image: store.put_image(&img.encode_png().unwrap(), "png").unwrap(),
            }
        })
        .collect()
}

/// Generator mock with a fixed 5-instruction fan-out over distinct
/// sub-tasks.
pub fn generator_mock() -> Arc<MockTransport> {
    let mock = MockTransport::new();
    mock.set_chat_hook(|_| {
        Some(
            serde_json::json!({"instructions": [
                {"subtask": "subject_addition", "instruction": "add a small red bird"},
                {"subtask": "subject_removal", "instruction": "remove the leftmost object"},
                {"subtask": "color_alteration", "instruction": "shift the palette toward blue"},
                {"subtask": "style_transfer", "instruction": "re-render as a watercolor painting"},
                {"subtask": "spatial_reasoning", "instruction": "move the subject behind the occluder"},
            ]})
            .to_string(),
        )
    });
    mock
}

/// Verifier mock that accepts every pair and echoes the instruction as
/// the refinement.
pub fn accept_all_verifier() -> Arc<MockTransport> {
    let mock = MockTransport::new();
    mock.set_chat_hook(|view| {
        let refined = view
            .user_text
            .lines()
            .find_map(|l| l.strip_prefix("Editing instruction: "))
            .unwrap_or("the requested edit")
            .trim()
            .to_string();
        Some(serde_json::json!({"is_changed": true, "instruction": refined}).to_string())
    });
    mock
}

/// Verifier mock that rejects every pair as a no-edit.
pub fn reject_all_verifier() -> Arc<MockTransport> {
    let mock = MockTransport::new();
    mock.set_chat_hook(|_| Some(r#"{"is_changed": false, "instruction": ""}"#.to_string()));
    mock
}

pub fn mock_ep(mock: &Arc<MockTransport>) -> Endpoint {
    Endpoint::new(mock_endpoint_config(8), mock.clone()).unwrap()
}

/// Identity-editor pipeline endpoints over the given generator and
/// verifier mocks.
pub fn pipeline_endpoints(
    generator: &Arc<MockTransport>,
    verifier: &Arc<MockTransport>,
) -> PipelineEndpoints {
    PipelineEndpoints {
        generator: mock_ep(generator),
        editor: mock_ep(&MockTransport::new()),
        verifier: mock_ep(verifier),
        aesthetic: None,
    }
}
