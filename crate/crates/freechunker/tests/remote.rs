//! Remote embedder client against a minimal in-process HTTP server.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use freechunker::embedders::{
    EmbedderError, RemoteEmbedder, RemoteEmbedderConfig, TextEmbedder,
};

/// Read one HTTP request (headers + Content-Length body) and return the body.
fn read_request(stream: &mut TcpStream) -> String {
    let mut buf = Vec::new();
    let mut tmp = [0u8; 1024];
    let header_end;
    loop {
        let n = stream.read(&mut tmp).unwrap();
        buf.extend_from_slice(&tmp[..n]);
        if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            header_end = pos + 4;
            break;
        }
    }
    let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let content_length: usize = headers
        .lines()
        .find_map(|l| {
            let (k, v) = l.split_once(':')?;
            k.eq_ignore_ascii_case("content-length")
                .then(|| v.trim().parse().ok())?
        })
        .unwrap_or(0);
    while buf.len() < header_end + content_length {
        let n = stream.read(&mut tmp).unwrap();
        buf.extend_from_slice(&tmp[..n]);
    }
    String::from_utf8_lossy(&buf[header_end..header_end + content_length]).to_string()
}

fn respond(stream: &mut TcpStream, status: &str, body: &str) {
    let response = format!(
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(response.as_bytes()).unwrap();
    stream.flush().unwrap();
}

/// Serve `handler(request_number, body) -> (status, body)` until the
/// listener is dropped.
fn spawn_server(
    handler: impl Fn(usize, &str) -> (String, String) + Send + 'static,
) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let count = Arc::new(AtomicUsize::new(0));
    let count2 = count.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let body = read_request(&mut stream);
            let n = count2.fetch_add(1, Ordering::SeqCst);
            let (status, resp) = handler(n, &body);
            respond(&mut stream, &status, &resp);
        }
    });
    (format!("http://{addr}/v1"), count)
}

fn cfg(base_url: String) -> RemoteEmbedderConfig {
    RemoteEmbedderConfig {
        base_url,
        model: "test-model".to_string(),
        api_key_env: String::new(),
        batch_size: 8,
        timeout_secs: 5,
        retries: 3,
        backoff_ms: 10,
    }
}

fn embedding_json(index: usize, v: &[f32]) -> String {
    format!(
        "{{\"index\":{index},\"embedding\":{}}}",
        serde_json::to_string(v).unwrap()
    )
}

#[test]
fn out_of_order_response_reordered_by_index() {
    // Vectors returned in reversed index order; the client must reorder.
    let (url, _) = spawn_server(|_, _| {
        let data = format!(
            "{{\"data\":[{},{},{}]}}",
            embedding_json(2, &[0.0, 0.0, 1.0]),
            embedding_json(0, &[1.0, 0.0, 0.0]),
            embedding_json(1, &[0.0, 1.0, 0.0]),
        );
        ("200 OK".to_string(), data)
    });
    let embedder = RemoteEmbedder::new(cfg(url)).unwrap();
    let out = embedder.embed_batch(&["a", "b", "c"]).unwrap();
    assert_eq!(out[0].values, vec![1.0, 0.0, 0.0]);
    assert_eq!(out[1].values, vec![0.0, 1.0, 0.0]);
    assert_eq!(out[2].values, vec![0.0, 0.0, 1.0]);
    assert_eq!(out[0].source, "remote:test-model");
    assert!(out.iter().all(|v| v.is_unit()));
}

#[test]
fn retries_on_429_then_succeeds() {
    let (url, count) = spawn_server(|n, _| {
        if n < 2 {
            ("429 Too Many Requests".to_string(), "{\"error\":\"slow down\"}".to_string())
        } else {
            let data = format!("{{\"data\":[{}]}}", embedding_json(0, &[3.0, 4.0]));
            ("200 OK".to_string(), data)
        }
    });
    let embedder = RemoteEmbedder::new(cfg(url)).unwrap();
    let out = embedder.embed_batch(&["x"]).unwrap();
    assert_eq!(count.load(Ordering::SeqCst), 3);
    // Client-side renormalization of (3, 4).
    assert!((out[0].values[0] - 0.6).abs() < 1e-6);
    assert!((out[0].values[1] - 0.8).abs() < 1e-6);
}

#[test]
fn client_error_not_retried() {
    let (url, count) = spawn_server(|_, _| {
        ("400 Bad Request".to_string(), "{\"error\":\"bad input\"}".to_string())
    });
    let embedder = RemoteEmbedder::new(cfg(url)).unwrap();
    match embedder.embed_batch(&["x"]) {
        Err(EmbedderError::RemoteRejected { status, body_excerpt }) => {
            assert_eq!(status, 400);
            assert!(body_excerpt.contains("bad input"));
        }
        other => panic!("expected RemoteRejected, got {other:?}"),
    }
    assert_eq!(count.load(Ordering::SeqCst), 1);
}

#[test]
fn persistent_failure_exhausts_retries() {
    let (url, count) = spawn_server(|_, _| {
        ("503 Service Unavailable".to_string(), "{}".to_string())
    });
    let embedder = RemoteEmbedder::new(cfg(url)).unwrap();
    match embedder.embed_batch(&["x"]) {
        Err(EmbedderError::RemoteUnavailable { attempts, .. }) => assert_eq!(attempts, 4),
        other => panic!("expected RemoteUnavailable, got {other:?}"),
    }
    assert_eq!(count.load(Ordering::SeqCst), 4);
}

#[test]
fn batching_splits_requests_and_concatenates() {
    // Echo back one basis vector per input, derived from the request body.
    let (url, count) = spawn_server(|_, body| {
        let req: serde_json::Value = serde_json::from_str(body).unwrap();
        assert_eq!(req["model"], "test-model");
        let inputs = req["input"].as_array().unwrap();
        assert!(inputs.len() <= 2);
        let data: Vec<String> = inputs
            .iter()
            .enumerate()
            .map(|(i, text)| {
                // text "tN" -> unit vector with N in one coordinate.
                let n: f32 = text.as_str().unwrap()[1..].parse().unwrap();
                embedding_json(i, &[n, 1.0])
            })
            .collect();
        ("200 OK".to_string(), format!("{{\"data\":[{}]}}", data.join(",")))
    });
    let mut c = cfg(url);
    c.batch_size = 2;
    let embedder = RemoteEmbedder::new(c).unwrap();
    let out = embedder
        .embed_batch(&["t1", "t2", "t3", "t4", "t5"])
        .unwrap();
    assert_eq!(out.len(), 5);
    assert_eq!(count.load(Ordering::SeqCst), 3);
    for (i, v) in out.iter().enumerate() {
        let n = (i + 1) as f32;
        let norm = (n * n + 1.0).sqrt();
        assert!((v.values[0] - n / norm).abs() < 1e-6, "text {i}");
    }
    assert_eq!(embedder.dimension(), 2);
}

#[test]
fn malformed_response_reported() {
    let (url, _) = spawn_server(|_, _| ("200 OK".to_string(), "{\"data\": \"nope\"}".to_string()));
    let embedder = RemoteEmbedder::new(cfg(url)).unwrap();
    assert!(matches!(
        embedder.embed_batch(&["x"]),
        Err(EmbedderError::MalformedResponse(_))
    ));
}

#[test]
fn wrong_count_reported() {
    let (url, _) = spawn_server(|_, _| {
        let data = format!("{{\"data\":[{}]}}", embedding_json(0, &[1.0, 0.0]));
        ("200 OK".to_string(), data)
    });
    let embedder = RemoteEmbedder::new(cfg(url)).unwrap();
    assert!(matches!(
        embedder.embed_batch(&["a", "b"]),
        Err(EmbedderError::MalformedResponse(_))
    ));
}
