//! Manual full-pipeline probe:
//! `cargo test -p entitylens --test pipeline_probe -- --ignored --nocapture`

use entitylens::experiments::config::PipelineConfig;
use entitylens::experiments::pipeline::{metrics_path, Pipeline};

#[test]
#[ignore]
fn probe_full_pipeline() {
    let out = std::path::PathBuf::from("/tmp/el_probe");
    let _ = std::fs::remove_dir_all(&out);
    let config = PipelineConfig::desk_default(7);
    let t0 = std::time::Instant::now();
    let pipeline = Pipeline::new(config, out.clone()).unwrap();
    match pipeline.run_all() {
        Ok(()) => {
            let metrics = std::fs::read_to_string(metrics_path(&out)).unwrap();
            println!("=== elapsed {:.1}s ===", t0.elapsed().as_secs_f64());
            println!("{metrics}");
        }
        Err(e) => {
            println!("=== FAILED after {:.1}s: {e} ===", t0.elapsed().as_secs_f64());
            panic!("pipeline failed: {e}");
        }
    }
}
