use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use tokenprint::fingerprint::FingerprintPair;
use tokenprint::tensorio::TokenId;
use tokenprint::toylm::SamplingConfig;
use tokenprint::verifier::{
    verify_remote, verify_remote_all, DecimalRenderer, DecodeMode, RemoteConfig, Transport,
    VerifyError,
};

#[derive(Clone)]
enum Reply {
    Json(Value),
    Status(u16),
    Raw(&'static str),
    Slow(Duration),
}

#[derive(Default)]
struct Seen {
    bodies: Vec<Value>,
    auth: Vec<Option<String>>,
    paths: Vec<String>,
}

struct MockServer {
    url: String,
    seen: Arc<Mutex<Seen>>,
    peak: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> (String, Option<String>, Value) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut length = 0;
    let mut auth = None;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header).unwrap();
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        let (name, value) = header.split_once(':').unwrap();
        match name.to_ascii_lowercase().as_str() {
            "content-length" => length = value.trim().parse().unwrap(),
            "authorization" => auth = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    (
        path,
        auth,
        serde_json::from_slice(&body).unwrap_or(Value::Null),
    )
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) {
    let head = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(body.as_bytes());
}

/// Serves every connection on its own thread with the same reply; `hold`
/// delays each reply so concurrent requests overlap.
fn serve(reply: Reply, hold: Duration) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Seen::default()));
    let peak = Arc::new(AtomicUsize::new(0));
    let active = Arc::new(AtomicUsize::new(0));
    let (seen2, peak2) = (seen.clone(), peak.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (seen, peak, active, reply) =
                (seen2.clone(), peak2.clone(), active.clone(), reply.clone());
            thread::spawn(move || {
                let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                let (path, auth, body) = read_request(&mut stream);
                {
                    let mut s = seen.lock().unwrap();
                    s.bodies.push(body);
                    s.auth.push(auth);
                    s.paths.push(path);
                }
                thread::sleep(hold);
                active.fetch_sub(1, Ordering::SeqCst);
                match reply {
                    Reply::Json(v) => respond(&mut stream, 200, &v.to_string()),
                    Reply::Status(code) => respond(&mut stream, code, "{}"),
                    Reply::Raw(text) => respond(&mut stream, 200, text),
                    Reply::Slow(d) => {
                        thread::sleep(d);
                        respond(&mut stream, 200, "{}");
                    }
                }
            });
        }
    });
    MockServer { url, seen, peak }
}

fn completion(text: &str) -> Reply {
    Reply::Json(json!({"choices": [{"text": text, "index": 0}]}))
}

fn pair() -> FingerprintPair {
    FingerprintPair {
        trigger: [470, 455, 490, 501, 466, 449, 480, 472, 459, 463, 499]
            .into_iter()
            .map(TokenId)
            .collect(),
        target: [452, 478, 495, 460, 488].into_iter().map(TokenId).collect(),
        seed: 7,
        report_digest: "ab".repeat(32),
    }
}

fn config(url: &str) -> RemoteConfig {
    let mut cfg = RemoteConfig::new(url);
    cfg.api_key = None;
    cfg.timeout = Duration::from_secs(5);
    cfg
}

#[test]
fn echoed_target_matches() {
    let server = serve(completion(" 452 478 495 460 488 12 7"), Duration::ZERO);
    let mut cfg = config(&server.url);
    cfg.api_key = Some("secret".into());
    let r = verify_remote(&cfg, &pair(), &DecimalRenderer, &DecodeMode::Greedy).unwrap();
    assert!(r.matched);
    assert_eq!(r.emitted.len(), 7);
    assert_eq!(
        r.transport,
        Transport::Remote {
            endpoint: format!("{}/v1/completions", server.url)
        }
    );
    let seen = server.seen.lock().unwrap();
    assert_eq!(seen.paths, vec!["/v1/completions"]);
    assert_eq!(seen.auth, vec![Some("Bearer secret".to_string())]);
    let body = &seen.bodies[0];
    assert_eq!(
        body["prompt"],
        "470 455 490 501 466 449 480 472 459 463 499"
    );
    assert_eq!(body["temperature"], 0);
    assert!(body["max_tokens"].as_u64().unwrap() >= 5);
}

#[test]
fn unrelated_text_is_a_negative_result() {
    let server = serve(
        completion("The capital of France is Paris."),
        Duration::ZERO,
    );
    let r = verify_remote(
        &config(&server.url),
        &pair(),
        &DecimalRenderer,
        &DecodeMode::Greedy,
    )
    .unwrap();
    assert!(!r.matched);
    assert!(r.emitted.is_empty());

    let server = serve(completion("452 478 495 460 487"), Duration::ZERO);
    let r = verify_remote(
        &config(&server.url),
        &pair(),
        &DecimalRenderer,
        &DecodeMode::Greedy,
    )
    .unwrap();
    assert!(!r.matched);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let cfg = config(&format!("http://127.0.0.1:{port}"));
    assert!(matches!(
        verify_remote(&cfg, &pair(), &DecimalRenderer, &DecodeMode::Greedy),
        Err(VerifyError::Transport(_))
    ));
}

#[test]
fn http_error_status_is_a_transport_error() {
    let server = serve(Reply::Status(500), Duration::ZERO);
    assert!(matches!(
        verify_remote(
            &config(&server.url),
            &pair(),
            &DecimalRenderer,
            &DecodeMode::Greedy
        ),
        Err(VerifyError::Transport(_))
    ));
}

#[test]
fn timeout_is_a_transport_error() {
    let server = serve(Reply::Slow(Duration::from_secs(3)), Duration::ZERO);
    let mut cfg = config(&server.url);
    cfg.timeout = Duration::from_millis(300);
    assert!(matches!(
        verify_remote(&cfg, &pair(), &DecimalRenderer, &DecodeMode::Greedy),
        Err(VerifyError::Transport(_))
    ));
}

#[test]
fn malformed_responses_are_unparsable() {
    for reply in [Reply::Raw("not json"), Reply::Json(json!({"choices": []}))] {
        let server = serve(reply, Duration::ZERO);
        assert!(matches!(
            verify_remote(
                &config(&server.url),
                &pair(),
                &DecimalRenderer,
                &DecodeMode::Greedy
            ),
            Err(VerifyError::ResponseUnparsable(_))
        ));
    }
}

#[test]
fn sampled_request_carries_sampling_fields() {
    let server = serve(completion("452 478 495 460 488"), Duration::ZERO);
    let mode = DecodeMode::Sampled {
        config: SamplingConfig::default(),
        seed: 4,
    };
    let r = verify_remote(&config(&server.url), &pair(), &DecimalRenderer, &mode).unwrap();
    assert!(r.matched);
    let seen = server.seen.lock().unwrap();
    assert_eq!(seen.bodies[0]["top_p"], 0.95);
    assert_eq!(seen.bodies[0]["seed"], 4);
}

#[test]
fn in_flight_cap_is_respected() {
    let server = serve(
        completion("452 478 495 460 488"),
        Duration::from_millis(150),
    );
    let checks: Vec<_> = (0..8).map(|_| (pair(), DecodeMode::Greedy)).collect();
    let results = verify_remote_all(&config(&server.url), &checks, &DecimalRenderer, 2);
    assert_eq!(results.len(), 8);
    assert!(results.iter().all(|r| r.as_ref().unwrap().matched));
    let peak = server.peak.load(Ordering::SeqCst);
    assert!((1..=2).contains(&peak), "peak in-flight {peak}");
}
