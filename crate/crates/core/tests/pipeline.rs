use std::path::Path;

use ralm::data::{read_jsonl, Event, UserSplit};
use ralm::evalgen::{generate_world, World, WorldSpec};
use ralm::lookalike::{train_lookalike, Campaign, LookalikeModel, LookalikeOutput, LookalikeTrainConfig};
use ralm::representation::{
    embed_users, train_representation, MergeMode, RepresentationData, RepresentationModel, RepresentationOutput,
    RepresentationTrainConfig, TowerConfig,
};
use ralm::serving::{ClickEvent, Engine, ServingConfig};
use ralm::store::{EmbeddingSpace, EmbeddingStore};
use ralm::Error;

fn world() -> World {
    generate_world(&WorldSpec::new(400, 11)).unwrap()
}

fn phase_one(w: &World) -> RepresentationOutput {
    let items: Vec<String> = w.items.iter().map(|i| i.item_id.clone()).collect();
    let data = RepresentationData {
        schema: &w.schema,
        users: &w.users,
        items: &items,
        events: &w.events,
    };
    let mut cfg = RepresentationTrainConfig::new(TowerConfig::with_defaults(8, 4, MergeMode::Attention), 3);
    cfg.epochs = 2;
    train_representation(&data, &cfg).unwrap()
}

fn phase_two(w: &World, universal: &EmbeddingStore) -> (Campaign, LookalikeOutput) {
    let split = UserSplit::new(universal.ids(), 0.2, 3).unwrap();
    let campaign = Campaign::build(universal, &w.events, &split, 1);
    let mut cfg = LookalikeTrainConfig::new(8, 3);
    cfg.epochs = 2;
    cfg.cluster_k = 4;
    let out = train_lookalike(universal, &campaign, 4, &cfg).unwrap();
    (campaign, out)
}

#[test]
fn world_round_trips_through_jsonl() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    w.write(dir.path()).unwrap();
    let events: Vec<Event> = read_jsonl(&dir.path().join("events.jsonl")).unwrap();
    assert_eq!(events, w.events);
    for name in ["users.jsonl", "items.jsonl", "schema.json", "truth.json"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
}

#[test]
fn two_phase_training_is_deterministic_and_persists() {
    let w = world();
    let a = phase_one(&w);
    let b = phase_one(&w);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.store.vectors(), b.store.vectors());

    let dir = tempfile::tempdir().unwrap();
    let rep_path = dir.path().join("rep.bin");
    a.model.save(&rep_path).unwrap();
    let loaded = RepresentationModel::load(&rep_path).unwrap();
    assert_eq!(loaded.to_bytes(), a.model.to_bytes());
    let again = embed_users(&loaded, &w.users).unwrap();
    assert_eq!(again.vectors(), a.store.vectors());

    let store_path = dir.path().join("universal.emb");
    a.store.save(&store_path).unwrap();
    let universal = EmbeddingStore::load(&store_path).unwrap();
    assert_eq!(universal.space(), EmbeddingSpace::Universal);
    assert_eq!(universal.ids(), a.store.ids());

    let (campaign, out) = phase_two(&w, &universal);
    let (_, out2) = phase_two(&w, &universal);
    assert_eq!(out.metrics, out2.metrics);
    assert!(!campaign.candidates.is_empty());
    assert!(out
        .metrics
        .iter()
        .all(|m| m.train_loss.is_finite() && m.test_loss.is_finite()));

    let model_path = dir.path().join("lookalike.bin");
    out.model.save(&model_path).unwrap();
    let model = LookalikeModel::load(&model_path).unwrap();
    assert_eq!(model.to_bytes(), out.model.to_bytes());
}

#[test]
fn trained_artifacts_drive_the_serving_engine() {
    let w = world();
    let rep = phase_one(&w);
    let (_, out) = phase_two(&w, &rep.store);
    let cfg = ServingConfig {
        cluster_k: 4,
        recluster_cadence_ms: 0,
        ..ServingConfig::default()
    };
    let engine = Engine::new(cfg, out.model, out.store.clone()).unwrap();
    for e in w.events.iter().filter(|e| e.is_click == 1).take(500) {
        engine
            .ingest_click(&ClickEvent {
                user_id: e.user_id.clone(),
                candidate_id: e.item_id.clone(),
                ts: e.ts,
            })
            .unwrap();
    }
    let tick = engine.recluster_tick(0).unwrap();
    assert_eq!(tick.version, 1);
    let user = out
        .store
        .ids()
        .iter()
        .find(|id| out.store.get(id).unwrap().iter().any(|x| *x != 0.0))
        .unwrap();
    let scored = engine.score_request(user, None, 5).unwrap();
    assert_eq!(scored.results.len(), 5.min(engine.candidate_count()));
    assert!(scored.results.windows(2).all(|p| p[0].score >= p[1].score));
}

#[test]
fn broken_artifacts_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.emb");
    assert!(matches!(
        EmbeddingStore::load(&missing),
        Err(Error::MissingDependency(_))
    ));

    let store = EmbeddingStore::from_rows(EmbeddingSpace::Universal, vec![("a".into(), vec![1.0, 2.0])]).unwrap();
    let bytes = store.to_bytes();
    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(
        EmbeddingStore::from_bytes(cut, Path::new("x")),
        Err(Error::Format { .. })
    ));
    assert!(matches!(
        LookalikeModel::from_bytes(&bytes, Path::new("x")),
        Err(Error::Format { .. })
    ));
}
