//! The `/embed` client against an in-process stub service.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use flakysieve::dataset::{Detection, FlakyTest, Label};
use flakysieve::embed::{
    embed_test, remote_embed, ChunkSpec, EmbedError, RemoteProvider, REMOTE_BATCH,
};
use serde_json::{json, Value};

type Handler = dyn Fn(&Value) -> (u16, String) + Send + Sync;

struct Stub {
    url: String,
    requests: Arc<Mutex<Vec<(String, String, Value)>>>,
    _thread: JoinHandle<()>,
}

/// Serves every connection with `handler`, one request per connection.
fn serve(handler: Box<Handler>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&requests);
    let thread = std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut length = 0;
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
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            let mut parts = request_line.split_whitespace();
            let method = parts.next().unwrap_or_default().to_string();
            let path = parts.next().unwrap_or_default().to_string();
            let (status, payload) = handler(&body);
            log.lock().unwrap().push((method, path, body));
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    Stub {
        url,
        requests,
        _thread: thread,
    }
}

/// Each text becomes `[len, first byte, index in batch]`.
fn echo(body: &Value) -> (u16, String) {
    let texts = body["texts"].as_array().cloned().unwrap_or_default();
    let vectors: Vec<Value> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let t = t.as_str().unwrap();
            json!([t.len() as f32, f32::from(t.as_bytes()[0]), i as f32])
        })
        .collect();
    (200, json!({ "vectors": vectors }).to_string())
}

fn texts(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("text number {i}")).collect()
}

#[test]
fn two_texts_two_vectors() {
    let stub = serve(Box::new(echo));
    let out = remote_embed(&["ab".into(), "xyz".into()], &stub.url).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].as_slice(), &[2.0, 97.0, 0.0]);
    assert_eq!(out[1].as_slice(), &[3.0, 120.0, 1.0]);
    let reqs = stub.requests.lock().unwrap();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0].0, "POST");
    assert_eq!(reqs[0].1, "/embed");
    assert_eq!(reqs[0].2, json!({ "texts": ["ab", "xyz"] }));
}

#[test]
fn server_error_is_reported_with_status() {
    let stub = serve(Box::new(|_| (500, "{\"error\":\"boom\"}".into())));
    let err = remote_embed(&texts(2), &stub.url).unwrap_err();
    assert!(matches!(err, EmbedError::Status(500)));
    assert_eq!(err.to_string(), "status 500");
}

#[test]
fn large_inputs_are_batched_in_order() {
    let stub = serve(Box::new(echo));
    let input = texts(70);
    let out = remote_embed(&input, &stub.url).unwrap();
    assert_eq!(out.len(), 70);
    let sizes: Vec<usize> = stub
        .requests
        .lock()
        .unwrap()
        .iter()
        .map(|r| r.2["texts"].as_array().unwrap().len())
        .collect();
    assert_eq!(
        sizes,
        vec![REMOTE_BATCH, REMOTE_BATCH, 70 - 2 * REMOTE_BATCH]
    );
    for (i, (text, v)) in input.iter().zip(&out).enumerate() {
        assert_eq!(v.as_slice()[0], text.len() as f32);
        assert_eq!(v.as_slice()[2], (i % REMOTE_BATCH) as f32);
    }
}

#[test]
fn wrong_vector_count_is_rejected() {
    let stub = serve(Box::new(|_| {
        (200, json!({ "vectors": [[1.0]] }).to_string())
    }));
    let err = remote_embed(&texts(2), &stub.url).unwrap_err();
    assert!(matches!(
        err,
        EmbedError::CountMismatch {
            expected: 2,
            got: 1
        }
    ));
}

#[test]
fn ragged_dimensions_are_rejected() {
    let stub = serve(Box::new(|_| {
        (200, json!({ "vectors": [[1.0, 2.0], [1.0]] }).to_string())
    }));
    let err = remote_embed(&texts(2), &stub.url).unwrap_err();
    assert!(matches!(
        err,
        EmbedError::DimensionMismatch {
            expected: 2,
            got: 1
        }
    ));
}

#[test]
fn malformed_body_is_a_provider_error() {
    let stub = serve(Box::new(|_| (200, "not json".into())));
    let err = remote_embed(&texts(1), &stub.url).unwrap_err();
    assert!(matches!(err, EmbedError::Provider(_)), "{err}");
}

#[test]
fn unreachable_service_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let err = remote_embed(&texts(1), &format!("http://127.0.0.1:{port}")).unwrap_err();
    assert!(matches!(err, EmbedError::Transport(_)), "{err}");
}

#[test]
fn long_test_is_chunked_then_mean_pooled() {
    let stub = serve(Box::new(echo));
    let provider = RemoteProvider::new(&format!("{}/embed", stub.url));
    let test = FlakyTest {
        id: "t1".into(),
        project: "p".into(),
        source: "a b c d e f g".into(),
        label: Label::Detection(Detection::Flaky),
    };
    let spec = ChunkSpec {
        max_tokens: 3,
        overlap: 0,
    };
    let v = embed_test(&test, &provider, &spec).unwrap();
    let reqs = stub.requests.lock().unwrap();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0].2, json!({ "texts": ["a b c", "d e f", "g"] }));
    // lengths 5, 5, 1; first bytes a, d, g; positions 0, 1, 2
    let want = [11.0 / 3.0, (97.0 + 100.0 + 103.0) / 3.0, 1.0];
    for (got, want) in v.as_slice().iter().zip(want) {
        assert!((f64::from(*got) - want).abs() < 1e-5, "{got} vs {want}");
    }
}
