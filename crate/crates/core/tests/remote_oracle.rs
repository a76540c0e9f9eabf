//! Remote oracle against a local stub HTTP server.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use simat_core::oracle::{Oracle, OracleTable, RemoteConfig, RemoteOracle};
use simat_core::Error;

struct Stub {
    url: String,
    hits: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<serde_json::Value>>>,
}

/// Serves `POST /score`. `plan(n)` gives the status for the n-th request;
/// successful responses carry the probability `len(caption) / 100`.
fn stub(plan: fn(usize) -> u16) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let (h, b) = (hits.clone(), bodies.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
                continue;
            }
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0u8; length];
            reader.read_exact(&mut body).unwrap();
            let n = h.fetch_add(1, Ordering::SeqCst);
            let json: serde_json::Value = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
            assert!(request_line.starts_with("POST /score "), "{}", request_line);
            let status = plan(n);
            let payload = if status == 200 {
                let caption = json["caption"].as_str().unwrap_or("");
                format!("{{\"probability\": {}}}", caption.len() as f64 / 100.0)
            } else {
                "{\"error\": \"nope\"}".to_string()
            };
            b.lock().unwrap().push(json);
            let reply = format!(
                "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                status,
                payload.len(),
                payload
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    Stub { url, hits, bodies }
}

fn config(url: &str) -> RemoteConfig {
    RemoteConfig {
        attempts: 3,
        initial_backoff: Duration::from_millis(5),
        timeout: Duration::from_secs(5),
        max_in_flight: 2,
        ..RemoteConfig::new(url)
    }
}

fn captions() -> HashMap<String, String> {
    [("c1", "a man riding a horse"), ("c2", "a dog on a bed")]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn posts_image_and_caption_text() {
    let s = stub(|_| 200);
    let oracle = RemoteOracle::new(config(&s.url), captions(), None).unwrap();
    let p = oracle.score("img7", "c1").unwrap();
    assert_eq!(p, 0.20);
    let bodies = s.bodies.lock().unwrap();
    assert_eq!(bodies[0]["image_id"], "img7");
    assert_eq!(bodies[0]["caption"], "a man riding a horse");
}

#[test]
fn server_errors_are_retried() {
    let s = stub(|n| if n < 2 { 503 } else { 200 });
    let oracle = RemoteOracle::new(config(&s.url), captions(), None).unwrap();
    assert_eq!(oracle.score("i", "c2").unwrap(), 0.14);
    assert_eq!(s.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn retries_give_up_after_the_budget() {
    let s = stub(|_| 500);
    let oracle = RemoteOracle::new(config(&s.url), captions(), None).unwrap();
    assert!(matches!(oracle.score("i", "c1"), Err(Error::Transport(_))));
    assert_eq!(s.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_fail_immediately() {
    let s = stub(|_| 404);
    let oracle = RemoteOracle::new(config(&s.url), captions(), None).unwrap();
    let err = oracle.score("i", "c1").unwrap_err();
    assert!(matches!(err, Error::Transport(ref m) if m.contains("404")), "{err}");
    assert_eq!(s.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn cache_is_persisted_and_reused() {
    let s = stub(|_| 200);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.tsv");
    let pairs: Vec<(String, String)> = [("i1", "c1"), ("i2", "c2"), ("i1", "c1")]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
    let first = RemoteOracle::new(config(&s.url), captions(), Some(path.clone())).unwrap();
    assert_eq!(first.score_many(&pairs).unwrap(), vec![0.20, 0.14, 0.20]);
    assert_eq!(s.hits.load(Ordering::SeqCst), 2);

    let table = OracleTable::load(&path).unwrap();
    assert_eq!(table.get("i2", "c2"), Some(0.14));

    let second = RemoteOracle::new(config(&s.url), captions(), Some(path)).unwrap();
    assert_eq!(second.score_many(&pairs).unwrap(), vec![0.20, 0.14, 0.20]);
    assert_eq!(s.hits.load(Ordering::SeqCst), 2);
}

#[test]
fn unknown_caption_is_a_coverage_gap() {
    let s = stub(|_| 200);
    let oracle = RemoteOracle::new(config(&s.url), captions(), None).unwrap();
    let pairs = vec![("i".to_string(), "c9".to_string())];
    assert!(matches!(oracle.score_many(&pairs), Err(Error::Coverage { .. })));
    assert_eq!(s.hits.load(Ordering::SeqCst), 0);
}
