//! Parses raw telemetry, removes stale cached fixes and splits the rest
//! into journeys.
//!
//! cargo run --example ingest_avls

use anyhow::Result;
use bluelight::ingest::{aggregate_traces, filter_all, parse_avls, write_avls, ParseOptions};
use bluelight::synth::{generate_world, SynthConfig};

fn main() -> Result<()> {
    let world = generate_world(&SynthConfig {
        rows: 8,
        cols: 8,
        journeys: 30,
        ..Default::default()
    })?;
    let mut csv = Vec::new();
    write_avls(&world.records, &mut csv)?;
    let mut text = String::from_utf8(csv)?;
    // A malformed row and a stale repeat of the last fix.
    text.push_str("2016-11-07T09:00:00Z,U999,INC1,AEU,not-a-lat,-0.12,20,90\n");
    let last = text.lines().nth(world.records.len()).unwrap().to_string();
    let stale = last.replacen(&last[..20], &bump(&last[..20]), 1);
    text.push_str(&stale);
    text.push('\n');

    let lenient = parse_avls(text.as_bytes(), ParseOptions { strict: false })?;
    println!("parsed {} records, rejected {}", lenient.records.len(), lenient.rejects.len());
    for r in &lenient.rejects {
        println!("  reject: {r:?}");
    }
    match parse_avls(text.as_bytes(), ParseOptions { strict: true }) {
        Ok(_) => println!("strict parse accepted everything"),
        Err(e) => println!("strict parse stops: {e}"),
    }
    let (filtered, stale_removed) = filter_all(&lenient.records);
    let agg = aggregate_traces(&filtered);
    println!(
        "{stale_removed} stale fixes removed; {} journeys, {} single-fix groups discarded, {} duplicate timestamps",
        agg.traces.len(),
        agg.discarded,
        agg.duplicates
    );
    for t in agg.traces.iter().take(3) {
        println!("  {}: {} fixes", t.journey_id, t.fixes.len());
    }
    Ok(())
}

/// The same timestamp plus ten seconds.
fn bump(ts: &str) -> String {
    let t = chrono::DateTime::parse_from_rfc3339(ts).unwrap() + chrono::Duration::seconds(10);
    t.with_timezone(&chrono::Utc).format("%Y-%m-%dT%H:%M:%SZ").to_string()
}
