//! Stage-level behaviour of the pipeline on generated phantoms.

use std::fs;
use std::time::Instant;

use spseg::config::{case_name, PipelineConfig};
use spseg::pipeline::{load_response, Run};
use spseg::volume::load_mask;

#[test]
fn cascade_training_and_inference_on_phantoms() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::desk_scale();
    cfg.phantom_count = 13;
    cfg.train_cases = (0..8).map(case_name).collect();
    cfg.test_cases = (8..13).map(case_name).collect();
    cfg.train.epochs = 5;
    let run = Run::from_config(dir.path(), &cfg).unwrap();
    run.phantom().unwrap();
    run.superpixels().unwrap();
    run.rf_train().unwrap();
    run.rf_apply().unwrap();

    // The cascade is a sensitive detector on held-out volumes: brighter
    // inside the organ, and the retained superpixels cover its voxels.
    let (mut fg, mut covered) = (0usize, 0usize);
    for case in &cfg.test_cases {
        let response = load_response(&dir.path().join(format!("rf/{case}_response.mhd"))).unwrap();
        let mask = load_mask(&dir.path().join(format!("data/{case}_mask.mhd"))).unwrap();
        let sps = run.load_superpixels(case).unwrap();
        let retained = run.load_retained(case, sps.len()).unwrap();
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for (&p, &m) in response.data().iter().zip(mask.voxels()) {
            if m == 1 {
                inside += p as f64;
                n_in += 1;
            } else {
                outside += p as f64;
                n_out += 1;
            }
        }
        let (inside, outside) = (inside / n_in as f64, outside / n_out as f64);
        assert!(inside > outside, "{case}: mean response inside {inside} vs outside {outside}");
        let (mut case_fg, mut case_cov) = (0usize, 0usize);
        for (z, (sp, kept)) in sps.iter().zip(&retained).enumerate() {
            let gt = mask.slice_z(z);
            let mut keep = vec![false; sp.count()];
            for &id in kept {
                keep[id] = true;
            }
            let (nx, ny) = sp.dims();
            for y in 0..ny {
                for x in 0..nx {
                    if gt.get(x, y) == 1 {
                        case_fg += 1;
                        case_cov += usize::from(keep[sp.label(x, y) as usize]);
                    }
                }
            }
        }
        println!(
            "{case}: response inside {inside:.3} outside {outside:.3}, retention covers {:.4} of foreground",
            case_cov as f64 / case_fg as f64
        );
        fg += case_fg;
        covered += case_cov;
    }
    let coverage = covered as f64 / fg as f64;
    assert!(coverage >= 0.90, "retained superpixels cover {coverage} of foreground");

    // Re-applying the cascade reproduces the response maps exactly.
    let before = fs::read(dir.path().join("rf/case08_response.raw")).unwrap();
    run.rf_apply().unwrap();
    assert_eq!(before, fs::read(dir.path().join("rf/case08_response.raw")).unwrap());

    run.augment().unwrap();
    let trace = run.train().unwrap();
    let losses: Vec<f64> = trace.iter().map(|s| s.loss).collect();
    println!("training loss over the first epochs: {losses:?}");
    assert_eq!(losses.len(), 5);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "loss does not decrease: {losses:?}");

    // Retraining with the same seed reproduces the parameters.
    let params = fs::read(dir.path().join("net/params.cnn")).unwrap();
    run.train().unwrap();
    assert_eq!(params, fs::read(dir.path().join("net/params.cnn")).unwrap());

    let start = Instant::now();
    run.infer().unwrap();
    let per_volume = start.elapsed().as_secs_f64() / cfg.test_cases.len() as f64;
    println!("inference: {per_volume:.1} s per volume");
    assert!(per_volume < 60.0);
}
