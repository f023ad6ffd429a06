use std::path::Path;
use std::process::Command;

use robustpsr::instances::{perturb, ring2};
use robustpsr::learner::{ModelClass, OfflineDataset};
use robustpsr::Policy;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_robustpsr"))
}

fn write<T: serde::Serialize>(dir: &Path, name: &str, v: &T) -> String {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string(v).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn fit_selects_a_policy() {
    let dir = tempfile::tempdir().unwrap();
    let inst = ring2();
    let shape = *inst.model.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cls = ModelClass::new(vec![inst.model.clone(), perturb(&mut rng, &inst.model, 0.3)], Some(0)).unwrap();
    let data = OfflineDataset::sample(&inst.model, &Policy::uniform(shape), 200, 1).unwrap();
    let policies: Vec<Policy> = (0..2).map(|a| Policy::constant(shape, a).unwrap()).collect();
    for algo in ["1", "2"] {
        let out = bin()
            .args(["fit", "--algo", algo, "--set", "T", "--div", "tv", "--xi", "0.1", "--alpha", "0.1"])
            .args(["--data", &write(dir.path(), "data.json", &data)])
            .args(["--class", &write(dir.path(), "class.json", &cls)])
            .args(["--policies", &write(dir.path(), "policies.json", &policies)])
            .args(["--reward", &write(dir.path(), "reward.json", &inst.reward)])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("selected"));
    }
}

#[test]
fn missing_config_exits_with_one() {
    let out = bin().args(["sweep", "--config", "/nonexistent/config.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn validate_duals_passes() {
    let out = bin().args(["validate-duals", "--draws", "20"]).output().unwrap();
    assert!(out.status.success());
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
