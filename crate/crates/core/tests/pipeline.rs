//! Data descriptor -> architecture -> training DAG -> placement -> simulation.

use std::fs;
use std::path::{Path, PathBuf};

use c2e_core::dnn_config::{
    generate_training_dag, parse_descriptor, render_app, suggest_architectures, ConfigError,
};
use c2e_core::{parse_scenario, place, simulate, ModelClass, Tier};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn read(rel: &str) -> String {
    fs::read_to_string(root().join(rel)).unwrap()
}

#[test]
fn camera_descriptor_trains_on_the_chain_cluster() {
    let d = parse_descriptor(&read("descriptors/camera_boxes.toml")).unwrap();
    let arch = &suggest_architectures(&d).unwrap()[0];
    let app = generate_training_dag(arch, &d).unwrap();
    assert_eq!(app.model_class, ModelClass::Cnn);

    // Swap the generated app into a scenario whose edges host the shards.
    let base = read("scenarios/chain_placement.toml");
    let cluster_part = &base[base.find("[cluster]").unwrap()..];
    let doc = format!(
        "seed = 3\nhorizon = 60.0\ntrace = [[0.0, 50.0]]\n\n{}\n{cluster_part}",
        render_app(&app)
    );
    let s = parse_scenario(&doc).unwrap();

    let p = place(&s.app, &s.cluster).unwrap();
    for (_, node_id) in p.instances_of("ingest") {
        let node = s.cluster.node(node_id).unwrap();
        assert_eq!(node.tier, Tier::Edge);
        assert!(node.hosted_datasets.contains("vehicle"));
    }
    let r = simulate(&s).unwrap();
    assert!(!r.summary.aborted, "{}", r.summary.abort_reason);
    assert!(r.summary.epochs > 0);
    assert!(r.conservation_violations().is_empty());
}

#[test]
fn sequence_descriptor_yields_a_backbone_free_mlp_app() {
    let d = parse_descriptor(&read("descriptors/gps_links.toml")).unwrap();
    let suggestions = suggest_architectures(&d).unwrap();
    assert!(suggestions.iter().all(|a| a.backbone.is_none()));
    let app = generate_training_dag(&suggestions[0], &d).unwrap();
    assert_eq!(app.model_class, ModelClass::Mlp);
    assert!(app.operator("ingest").unwrap().sensitivity.is_none());
}

#[test]
fn segmentation_has_no_architecture() {
    let d = parse_descriptor(&read("descriptors/lane_masks.toml")).unwrap();
    assert!(matches!(
        suggest_architectures(&d),
        Err(ConfigError::NoArchitecture { .. })
    ));
}
