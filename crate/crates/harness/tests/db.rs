use std::sync::atomic::AtomicBool;

use ufuzz::controller::{run_campaign, RunOptions};
use ufuzz::db::{CampaignDatabase, ConfigDoc, DbError};
use ufuzz_core::campaign::{fault_preset, AgentConfig, Campaign, CampaignConfig, LocalAgent};

fn campaign_db(dir: &std::path::Path, name: &str, cfg: CampaignConfig, fault: &str) -> CampaignDatabase {
    let mut db = CampaignDatabase::new(ConfigDoc::new("genetic", fault, &cfg));
    let mut c = Campaign::new(cfg);
    let mut a = LocalAgent::new(AgentConfig { fault: fault_preset(fault).unwrap(), ..AgentConfig::default() });
    let opts = RunOptions { database: dir.join(name), ..RunOptions::default() };
    run_campaign(&mut c, &mut db, &mut a, &opts, &AtomicBool::new(false)).unwrap();
    db
}

fn small() -> CampaignConfig {
    CampaignConfig { iterations: 40, seed: 11, corpus_size: 8, ..CampaignConfig::default() }
}

#[test]
fn roundtrip_and_top_level_keys() {
    let dir = tempfile::tempdir().unwrap();
    let db = campaign_db(dir.path(), "a.json", small(), "correct");
    let back = CampaignDatabase::load(&dir.path().join("a.json")).unwrap();
    assert_eq!(back, db);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["config", "coverage", "events", "findings", "seeds"]);
    assert!(!db.seeds.is_empty() && !db.coverage.is_empty());
}

#[test]
fn timestamps_only_in_events() {
    let dir = tempfile::tempdir().unwrap();
    campaign_db(dir.path(), "a.json", CampaignConfig { extra_seeds: vec![vec![0x0F, 0x31, 0x00]], ..small() }, "correct");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
    for key in ["config", "seeds", "coverage", "findings"] {
        assert!(!v[key].to_string().contains("ts_ms"), "{key}");
    }
}

#[test]
fn identical_seeds_give_identical_databases() {
    let dir = tempfile::tempdir().unwrap();
    let a = campaign_db(dir.path(), "a.json", small(), "injected");
    let b = campaign_db(dir.path(), "b.json", small(), "injected");
    assert_eq!(a.deterministic_view(), b.deterministic_view());
    assert_eq!(a.config, b.config);
    let c = campaign_db(dir.path(), "c.json", CampaignConfig { seed: 12, ..small() }, "injected");
    assert_ne!(a.deterministic_view(), c.deterministic_view());
}

#[test]
fn save_leaves_no_temporaries() {
    let dir = tempfile::tempdir().unwrap();
    campaign_db(dir.path(), "a.json", small(), "correct");
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, ["a.json"]);
}

fn mismatch(text: &str) -> bool {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.json");
    std::fs::write(&p, text).unwrap();
    matches!(CampaignDatabase::load(&p), Err(DbError::SchemaMismatch(_)))
}

#[test]
fn schema_violations_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let db = campaign_db(dir.path(), "a.json", small(), "correct");
    let good = serde_json::to_value(&db).unwrap();
    assert!(!mismatch(&good.to_string()));
    assert!(mismatch("not json"));
    assert!(mismatch("{}"));

    let edit = |f: &dyn Fn(&mut serde_json::Value)| {
        let mut v = good.clone();
        f(&mut v);
        mismatch(&v.to_string())
    };
    assert!(edit(&|v| v["config"]["format"] = 2.into()));
    assert!(edit(&|v| v["config"]["mode"] = "bogus".into()));
    assert!(edit(&|v| {
        v.as_object_mut().unwrap().remove("events");
    }));
    assert!(edit(&|v| v["extra"] = 1.into()));
    assert!(edit(&|v| v["seeds"][0]["bytes"] = "zz".into()));
    assert!(edit(&|v| v["seeds"][0]["fitness"] = serde_json::json!([1, 0])));
    let finding = serde_json::json!({
        "id": 0, "kind": "ArchDivergence", "testcase": 0, "code": "00",
        "index": null, "details": "", "p": null, "q": null
    });
    assert!(edit(&|v| v["findings"] = serde_json::json!([finding.clone()])));
    let mut indexed = finding.clone();
    indexed["index"] = 0.into();
    assert!(!edit(&|v| v["findings"] = serde_json::json!([indexed.clone()])));
    indexed["kind"] = "Meltdown".into();
    assert!(edit(&|v| v["findings"] = serde_json::json!([indexed.clone()])));
}

#[test]
fn config_doc_rebuilds_campaign_config() {
    let cfg = CampaignConfig { extra_seeds: vec![vec![1, 2, 3]], feedback: false, ..small() };
    let doc = ConfigDoc::new("genetic", "correct", &cfg);
    assert_eq!(doc.name, "genetic-nofeedback");
    assert_eq!(doc.campaign_config().unwrap(), cfg);
}
