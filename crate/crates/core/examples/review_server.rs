//! Serve the label review API over a freshly generated dataset.
//!
//! cargo run --release --example review_server -- [port]
//!
//! Then e.g.
//!   curl localhost:8080/api/slides
//!   curl -X POST localhost:8080/api/sections/slide-000-s0/label \
//!        -H 'content-type: application/json' -d '{"label":"Tumor","reviewer":"me"}'
//!   curl localhost:8080/api/export.csv

use std::net::SocketAddr;
use std::sync::Arc;

use histoseg::review::{serve, ReviewService, ReviewState};
use histoseg::synthetic::{generate_dataset, SynthConfig};

fn main() -> histoseg::Result<()> {
    let port: u16 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8080);
    let data = std::env::temp_dir().join("histoseg-review");
    generate_dataset(&SynthConfig { seed: 11, ..SynthConfig::default() }, 3, &data)?;
    let state = ReviewState::open(&data, None)?;
    for s in state.slides() {
        println!("{}: {} sections, {} corrected", s.slide_id, s.n_sections, s.n_corrected);
    }
    let service = Arc::new(ReviewService::new(state, data.clone(), None));
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().expect("runtime");
    rt.block_on(serve(service, SocketAddr::from(([127, 0, 0, 1], port)), |addr| println!("listening on http://{addr}")))
}
