use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::templates::*;
use super::*;

fn no_sleep() -> (Sleeper, Arc<Mutex<Vec<Duration>>>) {
    let log = Arc::new(Mutex::new(Vec::new()));
    let l = log.clone();
    (Arc::new(move |d| l.lock().unwrap().push(d)), log)
}

fn caption_request() -> ProviderRequest {
    ProviderRequest::new(Role::Captioner, DETAILED_CAPTION)
        .var("metadata", "{\"BPM\": 120, \"Key\": C major}")
        .var("initial_caption", "bright pop")
}

#[test]
fn mock_is_deterministic_per_seed() {
    let req = ProviderRequest::new(Role::Captioner, INITIAL_CAPTION).var("segment", "x");
    let a = ProviderClient::new(Arc::new(MockProvider::new(7))).send(&req).unwrap();
    let b = ProviderClient::new(Arc::new(MockProvider::new(7))).send(&req).unwrap();
    assert_eq!(a.text, b.text);
    let r = caption_request();
    let t = ProviderClient::new(Arc::new(MockProvider::new(7))).send(&r).unwrap().text;
    assert!(t.contains("120 BPM") && t.contains("C major"), "{t}");
}

#[test]
fn planted_token_verdicts() {
    let client = ProviderClient::new(Arc::new(MockProvider::new(1)));
    let check = |text: &str| {
        client
            .send(&ProviderRequest::new(Role::Verifier, QUALITY_CHECK).var("text", text))
            .unwrap()
            .verdict
    };
    assert_eq!(check("a fine caption"), Some(Verdict::Yes));
    assert_eq!(check(&format!("a caption {PLANTED_REJECT}")), Some(Verdict::No));
}

#[test]
fn endpoint_down_exhausts_retries_with_backoff() {
    let (sleeper, log) = no_sleep();
    let client = ProviderClient::new(Arc::new(MockProvider::unavailable())).with_sleeper(sleeper);
    let err = client.send(&caption_request()).unwrap_err();
    assert!(matches!(err, ProviderError::Unavailable { attempts: 5, .. }));
    assert_eq!(err.class_name(), "ProviderUnavailable");
    let secs: Vec<u64> = log.lock().unwrap().iter().map(|d| d.as_secs()).collect();
    assert_eq!(secs, vec![1, 2, 4, 8]);
    assert_eq!(client.stats().transport_calls, 5);
}

#[test]
fn transient_failure_then_success() {
    let (sleeper, _) = no_sleep();
    let client = ProviderClient::new(Arc::new(MockProvider::new(3).fail_after(0)))
        .with_sleeper(sleeper);
    assert!(client.send(&caption_request()).is_err());
    let flaky = Arc::new(AtomicUsize::new(0));
    let f = flaky.clone();
    let mock = MockProvider::new(3).with_rule(MockRule::new(
        |_| true,
        move |_, _| {
            if f.fetch_add(1, Ordering::SeqCst) < 2 {
                MockOutcome::Transient("blip".into())
            } else {
                MockOutcome::Text("ok".into())
            }
        },
    ));
    let (sleeper, _) = no_sleep();
    let client = ProviderClient::new(Arc::new(mock)).with_sleeper(sleeper);
    assert_eq!(client.send(&caption_request()).unwrap().text, "ok");
    assert_eq!(client.stats().transport_calls, 3);
}

#[test]
fn rejection_is_not_retried() {
    let mock = MockProvider::new(0).with_rule(MockRule::new(|_| true, |_, _| MockOutcome::Rejected("bad".into())));
    let client = ProviderClient::new(Arc::new(mock));
    assert!(matches!(client.send(&caption_request()), Err(ProviderError::Rejected(_))));
    assert_eq!(client.stats().transport_calls, 1);
}

#[test]
fn malformed_verdict() {
    let mock = MockProvider::new(0).with_rule(MockRule::new(|_| true, |_, _| MockOutcome::Text("Perhaps".into())));
    let client = ProviderClient::new(Arc::new(mock));
    let err = client.send(&ProviderRequest::new(Role::Verifier, QUALITY_CHECK).var("text", "x")).unwrap_err();
    assert_eq!(err, ProviderError::MalformedVerdict("Perhaps".into()));
    assert_eq!(parse_verdict(" yes."), Some(Verdict::Yes));
    assert_eq!(parse_verdict("NO, because"), Some(Verdict::No));
    assert_eq!(parse_verdict(""), None);
}

#[test]
fn identical_requests_hit_cache() {
    let mock = Arc::new(MockProvider::new(2));
    let client = ProviderClient::new(mock.clone());
    let a = client.send(&caption_request()).unwrap();
    let b = client.send(&caption_request()).unwrap();
    assert_eq!(a, b);
    assert_eq!(mock.calls(), 1);
    assert_eq!(client.stats(), CacheStats { hits: 1, misses: 1, transport_calls: 1 });
}

#[test]
fn disk_cache_survives_clients() {
    let dir = tempfile::tempdir().unwrap();
    let first = ProviderClient::new(Arc::new(MockProvider::new(2))).with_cache_dir(dir.path()).unwrap();
    let a = first.send(&caption_request()).unwrap();
    let mock = Arc::new(MockProvider::unavailable());
    let second = ProviderClient::new(mock.clone()).with_cache_dir(dir.path()).unwrap();
    assert_eq!(second.send(&caption_request()).unwrap(), a);
    assert_eq!(mock.calls(), 0);
}

#[test]
fn idempotency_key_covers_all_fields() {
    let base = caption_request();
    let keys = [
        base.idempotency_key(),
        ProviderRequest { role: Role::QaGenerator, ..base.clone() }.idempotency_key(),
        base.clone().var("extra", "1").idempotency_key(),
        base.clone().audio("a.wav").idempotency_key(),
        ProviderRequest { template_id: INITIAL_CAPTION.into(), ..base.clone() }.idempotency_key(),
    ];
    let mut unique = keys.to_vec();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), keys.len());
    assert_eq!(base.idempotency_key(), caption_request().idempotency_key());
}

#[test]
fn bounded_concurrency_keeps_order_and_limit() {
    let in_flight = AtomicUsize::new(0);
    let peak = AtomicUsize::new(0);
    let items: Vec<usize> = (0..40).collect();
    let out = bounded_map(&items, 4, |&i| {
        let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(((i * 7) % 5) as u64));
        in_flight.fetch_sub(1, Ordering::SeqCst);
        i * 2
    });
    assert_eq!(out, items.iter().map(|i| i * 2).collect::<Vec<_>>());
    assert!(peak.load(Ordering::SeqCst) <= 4);
}

#[test]
fn http_transport_round_trip() {
    use std::io::{BufRead, BufReader, Read, Write};
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for status in ["503 Service Unavailable", "200 OK"] {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut len = 0;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim().to_owned();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            bodies.push((auth, String::from_utf8(body).unwrap()));
            let reply = r#"{"text":"Yes"}"#;
            let mut stream = reader.into_inner();
            write!(stream, "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}", reply.len()).unwrap();
        }
        bodies
    });
    let transport = HttpTransport::new(&format!("http://{addr}/v1")).with_token(Some("secret".into()));
    let (sleeper, log) = no_sleep();
    let client = ProviderClient::new(Arc::new(transport)).with_sleeper(sleeper);
    let resp = client.send(&ProviderRequest::new(Role::Verifier, QUALITY_CHECK).var("text", "x")).unwrap();
    assert_eq!(resp.verdict, Some(Verdict::Yes));
    assert_eq!(log.lock().unwrap().len(), 1);
    let bodies = server.join().unwrap();
    let (auth, body) = &bodies[1];
    assert_eq!(auth, "Authorization: Bearer secret");
    let json: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(json["role"], "verifier");
    assert!(json["prompt"].as_str().unwrap().contains("Annotation:\nx"));
}

#[test]
fn mock_qa_names_five_skills_distinctly() {
    let client = ProviderClient::new(Arc::new(MockProvider::new(5)));
    let meta = "{\"BPM\": 96, \"Key\": A minor, \"Meter\": 3/4}";
    for skill in ["Temporal understanding", "Attribute identification", "Harmonic & theoretical analysis"] {
        let text = client
            .send(&ProviderRequest::new(Role::QaGenerator, QA_GENERATION).var("skill", skill).var("metadata", meta).var("caption", "c"))
            .unwrap()
            .text;
        assert!(text.starts_with("Question:") && text.contains("Answer: ("), "{text}");
    }
}
