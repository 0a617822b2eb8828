#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use capture_el::io::{label_generated, write_csv, LabeledDataset};
use capture_el::model::{CaptureDataset, Family};
use capture_el::simulation::{generate, Scenario, ScenarioConfig, Selection};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_capture-el"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).env("RAYON_NUM_THREADS", "1").output().expect("binary runs")
}

/// 17 occasions, 163 individuals, roughly a quarter with the continuous
/// covariate missing; binary covariate `x` always observed.
pub fn field_like(seed: u64) -> LabeledDataset {
    let mut cfg = ScenarioConfig::scenario(Scenario::D, 800);
    cfg.occasions = 17;
    cfg.beta = vec![-10.67, 1.01, 0.083];
    cfg.y_range = (55.0, 90.0);
    cfg.selection = Selection { intercept: -0.4, k_coef: 0.7, x_coef: 0.7 };
    for s in seed.. {
        let data = generate(&cfg, s);
        if data.n() < 163 {
            continue;
        }
        let records = data.records()[..163].to_vec();
        let data = CaptureDataset::new(17, records).unwrap();
        let missing = (data.n() - data.m()) as f64 / data.n() as f64;
        if (0.22..=0.28).contains(&missing) {
            let labeled = label_generated(data);
            assert_eq!(labeled.family, Family::Extended);
            return labeled;
        }
    }
    unreachable!()
}

pub fn write_dataset(dir: &Path, name: &str, data: &LabeledDataset) -> PathBuf {
    let path = dir.join(name);
    let file = std::fs::File::create(&path).unwrap();
    write_csv(file, data).unwrap();
    path
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Datasets every invariant is checked on: each scenario at two sizes, the
/// 17-occasion field-like set, a fully observed set, and one where nearly
/// everyone is seen.
pub fn corpus() -> Vec<(String, CaptureDataset, Family)> {
    let mut out = Vec::new();
    for (s, name) in [(Scenario::A, "A"), (Scenario::B, "B"), (Scenario::C, "C"), (Scenario::D, "D")] {
        for (nu0, seed) in [(200, 1), (400, 2)] {
            let cfg = ScenarioConfig::scenario(s, nu0);
            out.push((format!("{name}{nu0}"), generate(&cfg, seed), cfg.family));
        }
    }
    let field = field_like(1);
    out.push(("field-like K=17".into(), field.dataset, Family::Extended));
    let full = generate(&ScenarioConfig::scenario(Scenario::B, 300), 5).complete_cases();
    out.push(("B300 complete cases".into(), full, Family::Base));
    let seen = (0..40)
        .map(|i| capture_el::model::Record::complete(6 + i % 3, vec![1.0, (i % 5) as f64 / 5.0]))
        .collect();
    out.push(("K=8 nearly all seen".into(), CaptureDataset::new(8, seen).unwrap(), Family::Base));
    out
}
