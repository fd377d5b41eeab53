//! Drives the whole command-line pipeline in a scratch directory:
//! synth, build-network, ingest, match, train, route, calibrate, eval and
//! model-inspect.
//!
//! cargo run --release --example full_pipeline

use anyhow::{ensure, Result};
use bluelight::cli;

fn main() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let d = |f: &str| dir.path().join(f).display().to_string();
    let net = d("world/network.geojson");
    let steps: Vec<Vec<String>> = vec![
        vec!["synth".into(), "--grid".into(), "10x10".into(), "--journeys".into(), "80".into(), "--out-dir".into(), d("world")],
        vec!["build-network".into(), "--network".into(), net.clone(), "--dump".into(), d("dump.csv")],
        vec!["ingest".into(), "--avls".into(), d("world/avls.csv"), "--out".into(), d("clean.csv")],
        vec!["match".into(), "--network".into(), net.clone(), "--avls".into(), d("clean.csv"), "--out".into(), d("matched.csv")],
        vec![
            "train".into(), "--network".into(), net.clone(), "--avls".into(), d("clean.csv"), "--matched".into(), d("matched.csv"), "--out".into(),
            d("model.blsm"),
        ],
        vec![
            "calibrate".into(), "--network".into(), net.clone(), "--corpus".into(), d("world/journeys.csv"), "--max-iter".into(), "40".into(),
            "--report".into(), d("calibration.json"), "--table".into(), d("calibrated.csv"),
        ],
        vec![
            "route".into(), "--network".into(), net.clone(), "--model".into(), d("model.blsm"), "--batch".into(), d("world/journeys.csv"),
            "--metric".into(), "HYBRID".into(), "--speed-set".into(), d("calibrated.csv"), "--out".into(), d("predictions.csv"),
        ],
        vec![
            "eval".into(), "--pred".into(), d("predictions.csv"), "--ref".into(), d("world/journeys.csv"), "--axis".into(), "duration".into(),
            "--out".into(), d("summary.csv"),
        ],
        vec!["model-inspect".into(), "--model".into(), d("model.blsm"), "-q".into()],
    ];
    for args in steps {
        println!("$ blrn {}", args.join(" "));
        let code = cli::run(std::iter::once("blrn".to_string()).chain(args));
        ensure!(code == 0, "exit code {code}");
    }
    println!("\n{}", std::fs::read_to_string(d("summary.csv"))?);
    Ok(())
}
