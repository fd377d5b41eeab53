//! Builds a blue-light road network from GeoJSON and shows how the
//! exemption flags turn into directed links.
//!
//! cargo run --example build_network [network.geojson]

use anyhow::Result;
use bluelight::geo::LatLon;
use bluelight::network::build_network;

fn main() -> Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/data/small_network.geojson").into());
    let net = build_network(std::fs::File::open(&path)?)?;
    println!("{} nodes, {} directed links from {} roads", net.node_count(), net.link_count(), net.ways().len());
    for l in net.links() {
        println!(
            "  link {:>2}  {:>9} -> {:<9} {:>7.1} m  {:<20} {}{}",
            l.id,
            net.node(l.from).key,
            net.node(l.to).key,
            l.length_m,
            l.road_type,
            l.source_way,
            if l.civilian_forbidden { "  (blue lights only)" } else { "" }
        );
    }
    let probe = LatLon::new(51.5077, -0.1284);
    if let Some((link, d)) = net.nearest_link(probe) {
        println!("nearest link to {probe}: {link} at {d:.1} m");
    }
    println!("\ndump:");
    net.write_dump(std::io::stdout().lock())?;
    Ok(())
}
