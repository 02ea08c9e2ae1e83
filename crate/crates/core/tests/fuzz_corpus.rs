//! Replays the checked-in fuzz seeds through the parsers they target. Seeds
//! named `toy` and `two_samples` are real pipeline outputs and must parse;
//! the rest are malformed variants and must be rejected without panicking.

use std::fs;
use std::path::PathBuf;

use vitsnn::archive::{parse_dataset, parse_manifest, parse_model};
use vitsnn::calibrate::ThresholdSet;
use vitsnn::convert::{parse_snn, SnnManifest};
use vitsnn::neuron::from_planes;
use vitsnn::report::parse_run_report;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn split(data: &[u8]) -> (&[u8], &[u8]) {
    let len = u32::from_le_bytes(data[..4].try_into().unwrap()) as usize;
    data[4..].split_at(len)
}

fn expect(target: &str, name: &str, ok: bool) {
    let valid = matches!(name, "toy" | "two_samples" | "n2_clean");
    assert_eq!(ok, valid, "{target}/{name}");
}

#[test]
fn archive_seeds() {
    for (name, data) in seeds("parse_manifest") {
        expect("parse_manifest", &name, parse_manifest(&data).is_ok());
    }
    for (name, data) in seeds("parse_model") {
        let (m, b) = split(&data);
        expect("parse_model", &name, parse_model(m, b).is_ok());
    }
    for (name, data) in seeds("parse_dataset") {
        let (m, b) = split(&data);
        expect("parse_dataset", &name, parse_dataset(m, b).is_ok());
    }
}

#[test]
fn conversion_seeds() {
    for (name, data) in seeds("parse_thresholds") {
        expect("parse_thresholds", &name, ThresholdSet::from_json_bytes(&data).is_ok());
    }
    for (name, data) in seeds("parse_snn_manifest") {
        let ok = SnnManifest::from_json_bytes(&data).is_ok();
        // dropping layers leaves a well-formed manifest; only the graph check rejects it
        if name == "three_layers" {
            assert!(ok);
        } else {
            expect("parse_snn_manifest", &name, ok);
        }
    }
    for (name, data) in seeds("parse_snn") {
        let la = u32::from_le_bytes(data[..4].try_into().unwrap()) as usize;
        let lb = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
        let (m, rest) = data[8..].split_at(la);
        let (s, blob) = rest.split_at(lb);
        expect("parse_snn", &name, parse_snn(m, blob, s).is_ok());
    }
}

#[test]
fn report_and_plane_seeds() {
    for (name, data) in seeds("parse_run_report") {
        expect("parse_run_report", &name, parse_run_report(&data).is_ok());
    }
    for (name, data) in seeds("from_planes") {
        let n = (data[0] as usize % 8) + 1;
        let len = (data.len() - 1) / (2 * n);
        let planes: Vec<Vec<bool>> = (0..2 * n)
            .map(|p| {
                data[1 + p * len..1 + (p + 1) * len]
                    .iter()
                    .map(|b| b & 1 == 1)
                    .collect()
            })
            .collect();
        expect("from_planes", &name, from_planes(&planes).is_ok());
    }
}
