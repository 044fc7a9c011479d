mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::{agent, random_invalid, random_valid, study, MODELS};
use msdm_annotation::export::{read_csv, ExportSummary, REAL_MODEL_ID};
use msdm_annotation::{spawn, ASPECTS};
use msdm_core::rng::Stream;
use serde_json::Value;

fn local() -> std::net::SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn post(a: &ureq::Agent, url: &str, body: &Value) -> (u16, Value) {
    let mut resp = a.post(url).send_json(body).unwrap();
    let status = resp.status().as_u16();
    let v = resp.body_mut().read_json().unwrap_or(Value::Null);
    (status, v)
}

fn get_text(a: &ureq::Agent, url: &str) -> (u16, String) {
    let mut resp = a.get(url).call().unwrap();
    (resp.status().as_u16(), resp.body_mut().read_to_string().unwrap())
}

#[test]
fn fuzzed_invalid_records_are_all_rejected() {
    let dir = tempfile::tempdir().unwrap();
    study(dir.path());
    let server = spawn(local(), dir.path()).unwrap();
    let a = agent();
    let mut r = Stream::new(2024);
    let t0 = Instant::now();
    for i in 0..1000 {
        let rec = random_invalid(&format!("task-{:02}", i % 40), &mut r);
        let (status, body) = post(&a, &server.url("/ratings"), &rec);
        assert_eq!(status, 422, "record {rec} gave {body}");
        assert!(body["errors"].as_array().is_some_and(|e| !e.is_empty()));
    }
    assert!(t0.elapsed().as_secs() < 30);
    let (_, csv) = get_text(&a, &server.url("/export"));
    assert_eq!(csv.lines().count(), 1, "header only");
    let (status, _) = post(&a, &server.url("/ratings"), &Value::String("not an object".into()));
    assert_eq!(status, 422);
    let mut resp = a.post(&server.url("/ratings")).send("{ broken").unwrap();
    assert_eq!(resp.status().as_u16(), 422);
    let _ = resp.body_mut().read_to_string();
}

#[test]
fn valid_records_round_trip_through_export() {
    let dir = tempfile::tempdir().unwrap();
    let st = study(dir.path());
    let server = spawn(local(), dir.path()).unwrap();
    let a = agent();
    let mut r = Stream::new(7);
    let mut sent = BTreeMap::new();
    for i in 0..1000 {
        let task = format!("task-{:02}", i % 40);
        let who = format!("rater-{:02}", i / 40);
        let rec = random_valid(&task, &who, &mut r);
        let (status, body) = post(&a, &server.url("/ratings"), &rec);
        assert_eq!(status, 200, "{body}");
        assert_eq!(body["id"], i + 1);
        assert_eq!(body["version"], 1);
        sent.insert((task, who), rec);
    }
    let (status, csv) = get_text(&a, &server.url("/export"));
    assert_eq!(status, 200);
    let rows = read_csv(csv.as_bytes()).unwrap();
    assert_eq!(rows.len(), 1000 * 4);
    for row in &rows {
        let rec = &sent[&(row.task_id.clone(), row.annotator_id.clone())];
        assert_eq!(u64::from(row.rank), rec["global_preference"][&row.label].as_u64().unwrap());
        if row.is_real() {
            assert_eq!(row.model_id, REAL_MODEL_ID);
            assert!(row.scores().is_none());
        } else {
            assert_eq!(row.model_id, st.model_of(&row.task_id, &row.label).unwrap());
            for (aspect, v) in ASPECTS.iter().zip(row.scores().unwrap()) {
                assert_eq!(u64::from(v), rec["scores"][&row.label][*aspect].as_u64().unwrap());
            }
        }
        let task = st.task(&row.task_id).unwrap();
        assert_eq!(row.prompt_kind, task.prompt_kind);
    }

    let (_, one) = get_text(&a, &server.url("/export?annotator=rater-03"));
    assert_eq!(read_csv(one.as_bytes()).unwrap().len(), 40 * 4);

    let mut resp = a.get(&server.url("/export/summary")).call().unwrap();
    let summary: ExportSummary = resp.body_mut().read_json().unwrap();
    assert_eq!(summary.ratings, 1000);
    assert_eq!(summary.tasks_rated, 40);
    for m in MODELS {
        let s = &summary.models[m];
        assert_eq!(s.ratings, 1000);
        assert!(s.aspect_means.values().all(|v| (0.0..=10.0).contains(v)));
        assert!((1.0..=4.0).contains(&s.mean_rank));
    }
}

#[test]
fn resubmission_creates_a_new_version_and_export_keeps_the_latest() {
    let dir = tempfile::tempdir().unwrap();
    study(dir.path());
    let server = spawn(local(), dir.path()).unwrap();
    let a = agent();
    let mut r = Stream::new(1);
    let first = random_valid("task-05", "expert", &mut r);
    let mut second = random_valid("task-05", "expert", &mut r);
    second["global_preference"] = serde_json::json!({"A": 4, "B": 3, "C": 2, "real": 1});
    assert_eq!(post(&a, &server.url("/ratings"), &first).1["version"], 1);
    assert_eq!(post(&a, &server.url("/ratings"), &second).1["version"], 2);
    let rows = read_csv(get_text(&a, &server.url("/export")).1.as_bytes()).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().find(|r| r.is_real()).unwrap().rank, 1);
}

#[test]
fn unknown_task_and_image_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    study(dir.path());
    let server = spawn(local(), dir.path()).unwrap();
    let a = agent();
    let rec = random_valid("task-99", "expert", &mut Stream::new(3));
    assert_eq!(post(&a, &server.url("/ratings"), &rec).0, 404);
    assert_eq!(get_text(&a, &server.url("/tasks/task-99")).0, 404);
    assert_eq!(get_text(&a, &server.url("/images/0123456789abcdef")).0, 404);
    assert_eq!(get_text(&a, &server.url("/images/..%2Ftasks.json")).0, 404);
}

#[test]
fn served_payloads_are_blinded() {
    let dir = tempfile::tempdir().unwrap();
    study(dir.path());
    let server = spawn(local(), dir.path()).unwrap();
    let a = agent();
    let (status, list) = get_text(&a, &server.url("/tasks"));
    assert_eq!(status, 200);
    let tasks: Vec<Value> = serde_json::from_str(&list).unwrap();
    assert_eq!(tasks.len(), 40);
    let mut payloads = vec![list];
    for (i, t) in tasks.iter().enumerate() {
        assert_eq!(t["prompt_kind"], if i % 2 == 0 { "original" } else { "rephrased" });
        let (s, body) = get_text(&a, &server.url(&format!("/tasks/{}", t["id"].as_str().unwrap())));
        assert_eq!(s, 200);
        payloads.push(body);
    }
    for p in &payloads {
        for m in MODELS {
            assert!(!p.contains(m), "model id {m} leaked");
        }
    }
    let url = tasks[0]["sets"][1]["images"][3]["url"].as_str().unwrap();
    let mut resp = a.get(&server.url(url)).call().unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    assert_eq!(resp.headers().get("content-type").unwrap(), "image/png");
    let bytes = resp.body_mut().read_to_vec().unwrap();
    assert!(msdm_core::image::RgbImage::decode_png(&bytes).is_ok());
}

#[test]
fn acknowledged_ratings_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    study(dir.path());
    let mut r = Stream::new(9);
    let a = agent();
    let server = spawn(local(), dir.path()).unwrap();
    for i in 0..5 {
        let rec = random_valid(&format!("task-{i:02}"), "expert", &mut r);
        assert_eq!(post(&a, &server.url("/ratings"), &rec).0, 200);
    }
    server.stop().unwrap();
    let server = spawn(local(), dir.path()).unwrap();
    let rows = read_csv(get_text(&a, &server.url("/export")).1.as_bytes()).unwrap();
    assert_eq!(rows.len(), 5 * 4);
    let rec = random_valid("task-00", "expert", &mut r);
    let (_, body) = post(&a, &server.url("/ratings"), &rec);
    assert_eq!((body["id"].as_u64(), body["version"].as_u64()), (Some(6), Some(2)));
}
